// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tkc/errors.hpp"
#include "tkc/networks.hpp"

namespace tkc {

/// teacher <- alpha * teacher + (1 - alpha) * student, elementwise.
inline void ema_blend(std::span<double> teacher, std::span<const double> student, double alpha) {
  if (teacher.size() != student.size()) throw ShapeError("ema: teacher and student sizes differ");
  const double beta = 1.0 - alpha;
  for (std::size_t i = 0; i < teacher.size(); ++i) teacher[i] = alpha * teacher[i] + beta * student[i];
}

struct EmaState {
  EncoderParams teacher;
  double alpha = 0.999;
  std::uint64_t step = 0;
};

inline void ema_update(EmaState& state, const EncoderParams& student) {
  if (!state.teacher.same_architecture(student)) throw ShapeError("ema: teacher and student architectures differ");
  auto tp = state.teacher.parameters();
  const auto sp = student.parameters();
  for (std::size_t i = 0; i < tp.size(); ++i) ema_blend(tp[i]->data(), sp[i]->data(), state.alpha);
  ++state.step;
}

/// Closed form of n+1 EMA updates over students S^0..S^n starting from T0:
///   (1 - a) * sum_{m=0}^{n} a^m S^{n-m} + a^{n+1} T0
inline std::vector<double> ema_unrolled(std::span<const std::vector<double>> students, std::span<const double> t0,
                                        double alpha) {
  if (students.empty()) throw ValueError("ema_unrolled needs at least one student");
  const std::size_t n = students.size() - 1;
  std::vector<double> out(t0.size(), 0.0);
  double power = 1.0;  // alpha^m
  for (std::size_t m = 0; m <= n; ++m) {
    const auto& s = students[n - m];
    if (s.size() != t0.size()) throw ShapeError("ema_unrolled: student size differs from T0");
    const double w = (1.0 - alpha) * power;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * s[i];
    power *= alpha;
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += power * t0[i];
  return out;
}

inline EncoderParams ema_unrolled(std::span<const EncoderParams> students, const EncoderParams& t0, double alpha) {
  std::vector<std::vector<double>> flat;
  flat.reserve(students.size());
  for (const auto& s : students) {
    if (!s.same_architecture(t0)) throw ShapeError("ema_unrolled: architecture mismatch");
    flat.push_back(s.flatten());
  }
  EncoderParams out = t0;
  out.unflatten(ema_unrolled(flat, t0.flatten(), alpha));
  return out;
}

struct EmaWeightProfile {
  std::vector<double> weights;  // weights[m] = share of student S^{n-m}
  double residual = 0.0;        // alpha^n, share of the initial teacher
};

/// Shares of the last n students in the current teacher.
inline EmaWeightProfile ema_weight_profile(double alpha, std::size_t n_steps) {
  if (n_steps == 0) throw ValueError("ema_weight_profile needs n_steps >= 1");
  EmaWeightProfile p;
  p.weights.reserve(n_steps);
  double power = 1.0;
  for (std::size_t m = 0; m < n_steps; ++m) {
    p.weights.push_back((1.0 - alpha) * power);
    power *= alpha;
  }
  p.residual = power;
  return p;
}

/// Smallest m with (1 - alpha) * alpha^m < threshold, i.e. how many steps back
/// a student still carries noticeable weight.
inline std::size_t ema_horizon(double alpha, double threshold) {
  if (!(alpha > 0.0 && alpha < 1.0) || !(threshold > 0.0)) throw ValueError("ema_horizon needs 0 < alpha < 1");
  const double w0 = 1.0 - alpha;
  if (w0 < threshold) return 0;
  auto m = static_cast<std::size_t>(std::floor(std::log(threshold / w0) / std::log(alpha)));
  while ((1.0 - alpha) * std::pow(alpha, static_cast<double>(m)) >= threshold) ++m;
  while (m > 0 && (1.0 - alpha) * std::pow(alpha, static_cast<double>(m - 1)) < threshold) --m;
  return m;
}

}  // namespace tkc
