// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tkc/autodiff.hpp"
#include "tkc/errors.hpp"
#include "tkc/rng.hpp"
#include "tkc/tensor.hpp"

namespace tkc {

struct LinearLayer {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]
};

/// Linear -> ReLU -> ... -> Linear stack whose output rows are unit-normalised.
///
/// Used for the student and teacher encoders (EncoderParams), the knowledge
/// transformers and the optional predictor. Copying an Mlp deep-copies every
/// weight, which is what EMA snapshots rely on.
class Mlp {
 public:
  Mlp() = default;

  /// He-normal weights (variance 2/fan_in) and zero biases.
  Mlp(std::vector<std::size_t> layer_dims, std::uint64_t seed) : dims_(std::move(layer_dims)) {
    if (dims_.size() < 2) throw ShapeError("an MLP needs at least input and output extents");
    Rng rng(seed);
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      const std::size_t in = dims_[l], out = dims_[l + 1];
      LinearLayer layer{Tensor({out, in}), Tensor({out})};
      const double stddev = std::sqrt(2.0 / static_cast<double>(in));
      for (double& w : layer.weight.data()) w = stddev * rng.normal();
      layers_.push_back(std::move(layer));
    }
  }

  /// Zero-initialised network with the given extents.
  static Mlp zeros(std::vector<std::size_t> layer_dims) {
    Mlp m;
    m.dims_ = std::move(layer_dims);
    if (m.dims_.size() < 2) throw ShapeError("an MLP needs at least input and output extents");
    for (std::size_t l = 0; l + 1 < m.dims_.size(); ++l)
      m.layers_.push_back({Tensor({m.dims_[l + 1], m.dims_[l]}), Tensor({m.dims_[l + 1]})});
    return m;
  }

  const std::vector<std::size_t>& layer_dims() const { return dims_; }
  std::size_t input_dim() const { return dims_.front(); }
  std::size_t output_dim() const { return dims_.back(); }
  std::vector<LinearLayer>& layers() { return layers_; }
  const std::vector<LinearLayer>& layers() const { return layers_; }

  /// Parameter tensors in a fixed order: w0, b0, w1, b1, ...
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }
  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (const auto& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->size();
    return n;
  }

  void set_trainable(bool on) {
    for (auto* p : parameters()) p->set_requires_grad(on);
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(parameter_count());
    for (const auto* p : parameters()) flat.insert(flat.end(), p->data().begin(), p->data().end());
    return flat;
  }

  void unflatten(std::span<const double> flat) {
    if (flat.size() != parameter_count())
      throw ShapeError("unflatten: expected " + std::to_string(parameter_count()) + " values, got " +
                       std::to_string(flat.size()));
    std::size_t off = 0;
    for (auto* p : parameters()) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), p->size(), p->data().begin());
      off += p->size();
    }
  }

  bool same_architecture(const Mlp& o) const { return dims_ == o.dims_; }

  /// Bit-identical weights.
  bool same_values(const Mlp& o) const {
    if (!same_architecture(o)) return false;
    for (std::size_t l = 0; l < layers_.size(); ++l)
      if (!layers_[l].weight.same_values(o.layers_[l].weight) || !layers_[l].bias.same_values(o.layers_[l].bias))
        return false;
    return true;
  }

  /// Differentiable forward. Parameters flow into the tape as leaves; those
  /// marked requires_grad receive gradients on backward.
  Var forward(Tape& tape, const Var& x) {
    check_input(x.value());
    Var h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      h = ag::linear(h, tape.param(layers_[l].weight), tape.param(layers_[l].bias));
      if (l + 1 < layers_.size()) h = ag::relu(h);
    }
    return ag::l2_normalize(h);
  }

  /// Tape-free forward with the same arithmetic as the differentiable one.
  Tensor forward(const Tensor& x) const {
    check_input(x);
    Tape tape;
    Var h = tape.constant(x);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      h = ag::linear(h, tape.constant(layers_[l].weight), tape.constant(layers_[l].bias));
      if (l + 1 < layers_.size()) h = ag::relu(h);
    }
    return ag::l2_normalize(h).value();
  }

 private:
  void check_input(const Tensor& x) const {
    if (x.rank() != 2 || x.cols() != input_dim())
      throw ShapeError("network expects [batch x " + std::to_string(input_dim()) + "] input, got " +
                       shape_str(x.shape()));
  }

  std::vector<std::size_t> dims_;
  std::vector<LinearLayer> layers_;
};

/// Learnable values of an encoder (student or teacher).
using EncoderParams = Mlp;

/// He-initialised encoder, deterministic under `seed`.
inline EncoderParams init_params(std::vector<std::size_t> dims, std::uint64_t seed) {
  if (dims.empty()) throw ShapeError("init_params needs at least one extent");
  return Mlp(std::move(dims), seed);
}

enum class KtStructure { two_layer, four_layer, bottleneck };

inline std::string_view to_string(KtStructure s) {
  switch (s) {
    case KtStructure::two_layer:
      return "two_layer";
    case KtStructure::four_layer:
      return "four_layer";
    case KtStructure::bottleneck:
      return "bottleneck";
  }
  return "?";
}

inline KtStructure parse_kt_structure(std::string_view s) {
  if (s == "two_layer") return KtStructure::two_layer;
  if (s == "four_layer") return KtStructure::four_layer;
  if (s == "bottleneck") return KtStructure::bottleneck;
  throw ConfigError("unknown knowledge-transformer structure '" + std::string(s) + "'");
}

/// Layer extents for a knowledge transformer over d-dimensional embeddings.
///   two_layer:  d -> hidden -> d
///   four_layer: d -> hidden -> hidden -> hidden -> d
///   bottleneck: d -> 16*hidden -> d
inline std::vector<std::size_t> kt_layer_dims(KtStructure s, std::size_t dim, std::size_t hidden) {
  switch (s) {
    case KtStructure::two_layer:
      return {dim, hidden, dim};
    case KtStructure::four_layer:
      return {dim, hidden, hidden, hidden, dim};
    case KtStructure::bottleneck:
      return {dim, 16 * hidden, dim};
  }
  throw ConfigError("unknown knowledge-transformer structure");
}

/// Per-teacher MLP re-weighting a temporal target before the loss.
/// Also used, with the same shapes, as the predictor of the L2 variant.
class KnowledgeTransformer {
 public:
  KnowledgeTransformer() = default;
  KnowledgeTransformer(KtStructure structure, std::size_t dim, std::size_t hidden, std::uint64_t seed)
      : structure_(structure), net_(kt_layer_dims(structure, dim, hidden), seed) {}
  KnowledgeTransformer(KtStructure structure, Mlp net) : structure_(structure), net_(std::move(net)) {}

  KtStructure structure() const { return structure_; }
  std::size_t dim() const { return net_.output_dim(); }
  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }

  Var forward(Tape& tape, const Var& z) {
    if (z.value().cols() != dim()) throw ShapeError("knowledge transformer input dimension mismatch");
    return net_.forward(tape, z);
  }
  Tensor forward(const Tensor& z) const { return net_.forward(z); }

 private:
  KtStructure structure_ = KtStructure::two_layer;
  Mlp net_;
};

using Predictor = KnowledgeTransformer;

}  // namespace tkc
