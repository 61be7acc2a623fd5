// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <charconv>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tkc/autodiff.hpp"
#include "tkc/data.hpp"
#include "tkc/errors.hpp"
#include "tkc/kernels.hpp"
#include "tkc/losses.hpp"
#include "tkc/optim.hpp"
#include "tkc/rng.hpp"
#include "tkc/tensor.hpp"

namespace tkc {

/// Label predicted by a cosine k-nearest-neighbour vote.
///
/// Neighbours are ranked by similarity (descending), equal similarities by
/// lower training index. A tied vote goes to the tied class whose member
/// ranks highest, i.e. the nearest neighbour among the tied classes.
inline std::int32_t knn_predict(const Tensor& train, std::span<const std::int32_t> train_labels,
                                std::span<const double> query, std::size_t k, std::vector<double>& sims_scratch,
                                std::vector<std::uint32_t>& order_scratch) {
  const std::size_t n = train.rows();
  sims_scratch.resize(n);
  order_scratch.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    sims_scratch[i] = kernel::dot(train.row(i), query);
    order_scratch[i] = static_cast<std::uint32_t>(i);
  }
  std::partial_sort(order_scratch.begin(), order_scratch.begin() + static_cast<std::ptrdiff_t>(k), order_scratch.end(),
                    [&](std::uint32_t a, std::uint32_t b) {
                      return sims_scratch[a] > sims_scratch[b] || (sims_scratch[a] == sims_scratch[b] && a < b);
                    });
  std::int32_t max_label = 0;
  for (std::size_t r = 0; r < k; ++r) max_label = std::max(max_label, train_labels[order_scratch[r]]);
  std::vector<std::size_t> votes(static_cast<std::size_t>(max_label) + 1, 0);
  for (std::size_t r = 0; r < k; ++r) ++votes[static_cast<std::size_t>(train_labels[order_scratch[r]])];
  const std::size_t best = *std::max_element(votes.begin(), votes.end());
  for (std::size_t r = 0; r < k; ++r) {
    const auto label = train_labels[order_scratch[r]];
    if (votes[static_cast<std::size_t>(label)] == best) return label;
  }
  return train_labels[order_scratch[0]];
}

/// Top-1 accuracy of cosine kNN. Embeddings are expected unit-norm, so the
/// dot product is the cosine.
inline double knn_eval(const Tensor& train_embeds, std::span<const std::int32_t> train_labels,
                       const Tensor& test_embeds, std::span<const std::int32_t> test_labels, std::size_t k) {
  if (train_embeds.rows() != train_labels.size() || test_embeds.rows() != test_labels.size())
    throw ShapeError("knn_eval: one label per embedding row required");
  if (train_embeds.cols() != test_embeds.cols()) throw ShapeError("knn_eval: embedding dimensions differ");
  if (k == 0 || k % 2 == 0) throw ValueError("knn_eval: k must be odd");
  if (k > train_embeds.rows()) throw ValueError("knn_eval: k exceeds the training set size");
  for (auto l : train_labels)
    if (l < 0) throw ValueError("knn_eval: labels must be non-negative");
  std::vector<double> sims;
  std::vector<std::uint32_t> order;
  std::size_t correct = 0;
  for (std::size_t q = 0; q < test_embeds.rows(); ++q)
    if (knn_predict(train_embeds, train_labels, test_embeds.row(q), k, sims, order) == test_labels[q]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(test_embeds.rows());
}

struct ProbeConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double lr = 0.5;
  double momentum = 0.9;
  double train_fraction = 0.8;
  std::uint64_t seed = 11;
};

struct ProbeResult {
  double test_top1 = 0.0;
  double train_top1 = 0.0;
  Tensor weight;  // [classes x d]
  Tensor bias;    // [classes]
};

/// Softmax linear classifier on frozen embeddings, trained with the same SGD
/// machinery as the encoders; reports held-out top-1.
inline ProbeResult linear_probe(const Tensor& embeds, std::span<const std::int32_t> labels, const ProbeConfig& cfg) {
  if (embeds.rank() != 2 || embeds.rows() != labels.size()) throw ShapeError("linear_probe: one label per row required");
  std::int32_t max_label = -1, min_label = std::numeric_limits<std::int32_t>::max();
  for (auto l : labels) {
    max_label = std::max(max_label, l);
    min_label = std::min(min_label, l);
  }
  if (min_label < 0) throw ValueError("linear_probe: labels must be non-negative");
  if (max_label == min_label) throw ValueError("linear_probe: input has a single class");
  const std::size_t classes = static_cast<std::size_t>(max_label) + 1;
  const std::size_t d = embeds.cols();

  const Split split = train_test_split(embeds.rows(), cfg.train_fraction, cfg.seed);
  if (split.train.empty() || split.test.empty()) throw ValueError("linear_probe: split leaves an empty side");

  ProbeResult res{0.0, 0.0, Tensor({classes, d}), Tensor({classes})};
  res.weight.set_requires_grad(true);
  res.bias.set_requires_grad(true);
  SgdMomentum opt(cfg.momentum, 0.0);
  Rng rng(Rng::derive(cfg.seed, 1));
  std::vector<Tensor*> params{&res.weight, &res.bias};

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = random_permutation(split.train.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      Tensor xb({end - start, d});
      std::vector<std::int32_t> yb;
      for (std::size_t r = start; r < end; ++r) {
        const auto i = split.train[order[r]];
        std::copy_n(embeds.row(i).begin(), d, xb.row(r - start).begin());
        yb.push_back(labels[i]);
      }
      Tape tape;
      Var logits = ag::linear(tape.constant(std::move(xb)), tape.param(res.weight), tape.param(res.bias));
      Var loss = ag::softmax_cross_entropy(logits, std::move(yb));
      res.weight.zero_grad();
      res.bias.zero_grad();
      tape.backward(loss);
      opt.step(params, cfg.lr);
    }
  }

  auto accuracy = [&](const std::vector<std::uint32_t>& idx) {
    std::size_t correct = 0;
    std::vector<double> logits(classes);
    for (auto i : idx) {
      kernel::linear_forward(embeds.row(i).data(), res.weight.data().data(), res.bias.data().data(), logits.data(), 1,
                             d, classes);
      const auto pred = std::max_element(logits.begin(), logits.end()) - logits.begin();
      if (pred == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(idx.size());
  };
  res.test_top1 = accuracy(split.test);
  res.train_top1 = accuracy(split.train);
  res.weight.zero_grad();
  res.bias.zero_grad();
  return res;
}

/// Cosine similarity clamped to [-1, 1]. For identical inputs it is exactly
/// 1: sqrt(fl(s*s)) == s in IEEE arithmetic, so s / s == 1.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: dimension mismatch");
  const double ab = kernel::dot(a, b);
  const double denom = std::sqrt(kernel::dot(a, a) * kernel::dot(b, b));
  if (denom == 0.0) return 0.0;
  return std::clamp(ab / denom, -1.0, 1.0);
}

/// Per-sample stability: similarity between the current teacher embedding and
/// the same sample's embedding from the previous epoch.
inline std::vector<double> stability(const Tensor& curr, const Tensor& prev) {
  if (curr.shape() != prev.shape()) throw ShapeError("stability: feature sets differ in shape");
  std::vector<double> out(curr.rows());
  for (std::size_t i = 0; i < curr.rows(); ++i) out[i] = cosine(curr.row(i), prev.row(i));
  return out;
}

struct MetricRecord {
  std::size_t epoch = 0;
  LossBreakdown loss;  // mean over the epoch's steps
  double knn_top1 = 0.0;
  std::optional<double> linear_top1;
  double mean_stability = std::numeric_limits<double>::quiet_NaN();  // NaN when no previous epoch exists
  double lr = 0.0;
};

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

/// Header: epoch,loss_total,loss_current,loss_temporal_0..h-1,knn_top1,mean_stability,lr
inline std::string metrics_csv(std::span<const MetricRecord> records, std::size_t h) {
  std::string out = "epoch,loss_total,loss_current";
  for (std::size_t j = 0; j < h; ++j) out += ",loss_temporal_" + std::to_string(j);
  out += ",knn_top1,mean_stability,lr\n";
  for (const auto& r : records) {
    out += std::to_string(r.epoch) + "," + format_double(r.loss.total) + "," + format_double(r.loss.current);
    for (std::size_t j = 0; j < h; ++j)
      out += "," + format_double(j < r.loss.temporal.size() ? r.loss.temporal[j] : 0.0);
    out += "," + format_double(r.knn_top1) + "," + format_double(r.mean_stability) + "," + format_double(r.lr) + "\n";
  }
  return out;
}

/// Mean of `mean_stability` over the last `window` records that have one.
inline double trailing_mean_stability(std::span<const MetricRecord> records, std::size_t window) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = records.size(); i-- > 0 && count < window;) {
    if (std::isnan(records[i].mean_stability)) continue;
    sum += records[i].mean_stability;
    ++count;
  }
  return count ? sum / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
}

/// Long-format dump: `history[e]` holds every sample's stability in epoch e+1.
inline std::string stability_csv(std::span<const std::vector<double>> history) {
  std::string out = "sample_id,epoch,stability\n";
  for (std::size_t e = 0; e < history.size(); ++e)
    for (std::size_t i = 0; i < history[e].size(); ++i)
      out += std::to_string(i) + "," + std::to_string(e + 1) + "," + format_double(history[e][i]) + "\n";
  return out;
}

}  // namespace tkc
