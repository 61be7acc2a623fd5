// SPDX-License-Identifier: Apache-2.0
#pragma once

// Raw numeric loops shared by the autodiff ops and the tape-free paths.
// Every reduction runs strictly left to right.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace tkc::kernel {

inline constexpr double kNormEpsilon = 1e-12;

inline double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  return dot(a.data(), b.data(), std::min(a.size(), b.size()));
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

/// y[rows x out] = x[rows x in] * w[out x in]^T + bias[out].
/// Accumulates in input order per output, then adds the bias.
inline void linear_forward(const double* x, const double* w, const double* bias, double* y, std::size_t rows,
                           std::size_t in, std::size_t out) {
  std::vector<double> wt(in * out);
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t i = 0; i < in; ++i) wt[i * out + o] = w[o * in + i];
  for (std::size_t r = 0; r < rows; ++r) {
    double* yr = y + r * out;
    std::fill(yr, yr + out, 0.0);
    const double* xr = x + r * in;
    for (std::size_t i = 0; i < in; ++i) axpy(xr[i], wt.data() + i * out, yr, out);
    for (std::size_t o = 0; o < out; ++o) yr[o] += bias[o];
  }
}

/// Divides each row by max(||row||, eps). `norms` receives the unguarded norms.
inline void normalize_rows(const double* x, double* y, double* norms, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    const double n = std::sqrt(dot(xr, xr, cols));
    norms[r] = n;
    const double denom = std::max(n, kNormEpsilon);
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = xr[c] / denom;
  }
}

/// One InfoNCE row: -log softmax(logits)[0] where logits are
/// [a.p, a.n_0, ..., a.n_{K-1}] / tau. Max-shifted log-sum-exp.
/// `neg_row(k)` returns a pointer to the k-th negative. If `probs` is non-null
/// it receives the K+1 softmax probabilities (positive first).
template <typename NegRow>
double nce_row(const double* anchor, const double* pos, NegRow&& neg_row, std::size_t k, std::size_t dim, double tau,
               double* probs = nullptr) {
  std::vector<double> logits(k + 1);
  logits[0] = dot(anchor, pos, dim) / tau;
  for (std::size_t j = 0; j < k; ++j) logits[j + 1] = dot(anchor, neg_row(j), dim) / tau;
  double m = logits[0];
  for (std::size_t j = 1; j <= k; ++j) m = std::max(m, logits[j]);
  const double shift0 = m - logits[0];
  double s = 0.0;
  for (std::size_t j = 0; j <= k; ++j) {
    logits[j] = std::exp(logits[j] - m);
    s += logits[j];
  }
  if (probs) {
    for (std::size_t j = 0; j <= k; ++j) probs[j] = logits[j] / s;
  }
  return std::log(s) + shift0;
}

}  // namespace tkc::kernel
