// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tkc/binary_io.hpp"
#include "tkc/errors.hpp"
#include "tkc/rng.hpp"
#include "tkc/tensor.hpp"

namespace tkc {

/// Immutable sample table with float32 features, identical to the on-disk
/// layout. Labels are for evaluation only; nothing on the training loss path
/// reads them.
struct Dataset {
  std::size_t n_samples = 0;
  std::size_t in_dim = 0;
  std::size_t class_count = 0;
  std::vector<float> features;  // [n_samples x in_dim]
  std::vector<std::int32_t> labels;
  std::string provenance;

  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(features).subspan(i * in_dim, in_dim);
  }

  /// Rows `index` as a float64 matrix.
  Tensor gather(std::span<const std::uint32_t> index) const {
    Tensor out({index.size(), in_dim});
    for (std::size_t r = 0; r < index.size(); ++r) {
      const auto src = row(index[r]);
      auto dst = out.row(r);
      for (std::size_t c = 0; c < in_dim; ++c) dst[c] = static_cast<double>(src[c]);
    }
    return out;
  }

  Tensor all_features() const {
    std::vector<std::uint32_t> idx(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) idx[i] = static_cast<std::uint32_t>(i);
    return gather(idx);
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.n_samples == b.n_samples && a.in_dim == b.in_dim && a.labels == b.labels &&
           std::equal(a.features.begin(), a.features.end(), b.features.begin(), b.features.end(),
                      [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
  }
};

struct MixtureSpec {
  std::size_t classes = 8;
  std::size_t per_class = 512;
  std::size_t dim = 32;
  double spread = 4.0;
  std::uint64_t seed = 7;
};

/// Class centres uniform on the sphere of radius `spread`; each sample is its
/// centre plus N(0, I) noise. Samples are stored class by class.
inline Dataset make_gaussian_mixture(const MixtureSpec& spec) {
  if (spec.classes < 2) throw ValueError("a mixture needs at least two classes");
  if (spec.per_class == 0 || spec.dim == 0) throw ValueError("mixture extents must be positive");
  if (!(spec.spread >= 0.0)) throw ValueError("spread must be non-negative");
  Rng rng(spec.seed);
  std::vector<double> centers(spec.classes * spec.dim);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    double norm2 = 0.0;
    for (std::size_t j = 0; j < spec.dim; ++j) {
      const double v = rng.normal();
      centers[c * spec.dim + j] = v;
      norm2 += v * v;
    }
    const double s = spec.spread / std::sqrt(norm2);
    for (std::size_t j = 0; j < spec.dim; ++j) centers[c * spec.dim + j] *= s;
  }
  Dataset ds;
  ds.n_samples = spec.classes * spec.per_class;
  ds.in_dim = spec.dim;
  ds.class_count = spec.classes;
  ds.features.resize(ds.n_samples * spec.dim);
  ds.labels.resize(ds.n_samples);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t s = 0; s < spec.per_class; ++s) {
      const std::size_t i = c * spec.per_class + s;
      ds.labels[i] = static_cast<std::int32_t>(c);
      for (std::size_t j = 0; j < spec.dim; ++j)
        ds.features[i * spec.dim + j] = static_cast<float>(centers[c * spec.dim + j] + rng.normal());
    }
  }
  ds.provenance = "gaussian_mixture(classes=" + std::to_string(spec.classes) +
                  ",per_class=" + std::to_string(spec.per_class) + ",dim=" + std::to_string(spec.dim) +
                  ",seed=" + std::to_string(spec.seed) + ")";
  return ds;
}

struct AugmentSpec {
  double gaussian_sigma = 0.5;
  double mask_fraction = 0.25;

  bool is_identity() const { return gaussian_sigma == 0.0 && mask_fraction == 0.0; }
};

inline void validate(const AugmentSpec& spec) {
  if (!(spec.gaussian_sigma >= 0.0)) throw ValueError("augmentation sigma must be non-negative");
  if (!(spec.mask_fraction >= 0.0 && spec.mask_fraction < 1.0)) throw ValueError("mask fraction must lie in [0, 1)");
}

/// Adds N(0, sigma^2) noise to every coordinate, then zeroes a random
/// round(mask_fraction * dim) coordinates. sigma = 0 and mask = 0 is the
/// identity and draws nothing from `rng`.
inline void augment_inplace(std::span<double> x, const AugmentSpec& spec, Rng& rng) {
  if (spec.gaussian_sigma > 0.0)
    for (double& v : x) v += spec.gaussian_sigma * rng.normal();
  const auto n_mask = static_cast<std::size_t>(std::floor(spec.mask_fraction * static_cast<double>(x.size()) + 0.5));
  if (n_mask == 0) return;
  std::vector<std::size_t> coords(x.size());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  for (std::size_t i = 0; i < n_mask; ++i) {
    const auto j = i + rng.below(coords.size() - i);
    std::swap(coords[i], coords[j]);
    x[coords[i]] = 0.0;
  }
}

inline Tensor augment(const Tensor& x, const AugmentSpec& spec, Rng& rng) {
  Tensor out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) augment_inplace(out.row(r), spec, rng);
  return out;
}

// TKDS layout: "TKDS", u32 version, u32 n_samples, u32 in_dim (LE), then
// n_samples*in_dim f32 features, then n_samples i32 labels.
inline constexpr std::uint32_t kTkdsVersion = 1;

inline std::string encode_tkds(const Dataset& ds) {
  ByteWriter w;
  w.raw("TKDS");
  w.u32(kTkdsVersion);
  w.u32(static_cast<std::uint32_t>(ds.n_samples));
  w.u32(static_cast<std::uint32_t>(ds.in_dim));
  for (float f : ds.features) w.f32(f);
  for (auto l : ds.labels) w.u32(static_cast<std::uint32_t>(l));
  return w.take();
}

inline Dataset decode_tkds(std::string_view bytes, std::string provenance = {}) {
  if (bytes.size() < 16) throw TruncatedPayload("TKDS header needs 16 bytes, file has " + std::to_string(bytes.size()));
  ByteReader r(bytes);
  if (r.raw(4) != "TKDS") throw FormatError("not a TKDS file (bad magic)");
  if (const auto v = r.u32(); v != kTkdsVersion) throw FormatError("unsupported TKDS version " + std::to_string(v));
  const std::uint64_t n = r.u32();
  const std::uint64_t dim = r.u32();
  if (n == 0 || dim == 0) throw FormatError("TKDS extents must be positive");
  const std::uint64_t payload = n * dim * 4 + n * 4;  // both factors < 2^32, cannot overflow 64 bits
  if (payload > (std::uint64_t{1} << 40)) throw FormatError("TKDS extents overflow the supported size");
  if (r.remaining() < payload)
    throw TruncatedPayload("TKDS payload truncated: need " + std::to_string(payload) + " bytes, have " +
                           std::to_string(r.remaining()));
  if (r.remaining() > payload) throw FormatError("TKDS file has trailing bytes");
  Dataset ds;
  ds.n_samples = n;
  ds.in_dim = dim;
  ds.features.resize(n * dim);
  for (auto& f : ds.features) f = r.f32();
  ds.labels.resize(n);
  std::int32_t max_label = -1;
  for (auto& l : ds.labels) {
    l = static_cast<std::int32_t>(r.u32());
    if (l < 0) throw FormatError("TKDS labels must be non-negative");
    max_label = std::max(max_label, l);
  }
  ds.class_count = static_cast<std::size_t>(max_label + 1);
  ds.provenance = std::move(provenance);
  return ds;
}

inline void save_raw_dataset(const Dataset& ds, const std::filesystem::path& path) {
  write_file_atomic(path, encode_tkds(ds));
}

inline Dataset load_raw_dataset(const std::filesystem::path& path) {
  return decode_tkds(read_file(path), path.string());
}

/// Seeded train/test split of sample indices (train first).
struct Split {
  std::vector<std::uint32_t> train;
  std::vector<std::uint32_t> test;
};

inline Split train_test_split(std::size_t n, double train_fraction, std::uint64_t seed) {
  Rng rng(seed);
  auto order = random_permutation(n, rng);
  const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n) + 0.5));
  Split s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

}  // namespace tkc
