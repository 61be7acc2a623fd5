// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include "tkc/binary_io.hpp"
#include "tkc/errors.hpp"
#include "tkc/tensor.hpp"

namespace tkc {

/// SGD with heavy-ball momentum and L2 weight decay:
///   g' = g + wd * p;  v = mu * v + g';  p -= lr * v
/// Buffers are keyed by position in the parameter list handed to step(), so
/// callers must always pass the same list in the same order.
class SgdMomentum {
 public:
  SgdMomentum() = default;
  SgdMomentum(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  /// Updates every parameter that holds a gradient; parameters without one
  /// are left untouched (their buffers too).
  void step(std::span<Tensor* const> params, double lr) {
    if (buffers_.empty()) {
      for (const Tensor* p : params) buffers_.emplace_back(p->size(), 0.0);
    }
    if (buffers_.size() != params.size()) throw ShapeError("optimizer parameter list changed size");
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      if (!p.has_grad()) continue;
      auto& v = buffers_[i];
      if (v.size() != p.size()) throw ShapeError("optimizer buffer does not match parameter");
      auto data = p.data();
      auto grad = p.grad();
      for (std::size_t j = 0; j < v.size(); ++j) {
        const double g = grad[j] + weight_decay_ * data[j];
        v[j] = momentum_ * v[j] + g;
        data[j] -= lr * v[j];
      }
    }
  }

  double momentum() const { return momentum_; }
  double weight_decay() const { return weight_decay_; }
  const std::vector<std::vector<double>>& buffers() const { return buffers_; }

  void save(ByteWriter& w) const {
    w.f64(momentum_);
    w.f64(weight_decay_);
    w.u64(buffers_.size());
    for (const auto& b : buffers_) w.f64s(b);
  }

  static SgdMomentum load(ByteReader& r) {
    SgdMomentum o;
    o.momentum_ = r.f64();
    o.weight_decay_ = r.f64();
    const auto n = r.u64();
    if (n > r.remaining() / 8) throw TruncatedPayload("optimizer section truncated");
    for (std::uint64_t i = 0; i < n; ++i) o.buffers_.push_back(r.f64s());
    return o;
  }

 private:
  double momentum_ = 0.9;
  double weight_decay_ = 1e-4;
  std::vector<std::vector<double>> buffers_;
};

/// Linear warm-up from base/10 to base over `warmup_steps`, then cosine decay
/// towards 0 over the remaining steps.
inline double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double lr_base) {
  if (total_steps == 0 || step >= total_steps) throw ValueError("lr_schedule: step outside [0, total_steps)");
  if (step < warmup_steps) {
    const double start = lr_base / 10.0;
    return start + (lr_base - start) * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return lr_base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace tkc
