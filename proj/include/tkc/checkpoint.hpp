// SPDX-License-Identifier: Apache-2.0
#pragma once

// TKCK container: "TKCK", u32 version, u32 section count, then per section a
// u32-length-prefixed name and a u64-length-prefixed payload. Little-endian.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tkc/binary_io.hpp"
#include "tkc/errors.hpp"
#include "tkc/eval.hpp"
#include "tkc/networks.hpp"

namespace tkc {

inline constexpr std::uint32_t kTkckVersion = 1;

struct Section {
  std::string name;
  std::string payload;
};

inline std::string encode_tkck(const std::vector<Section>& sections) {
  ByteWriter w;
  w.raw("TKCK");
  w.u32(kTkckVersion);
  w.u32(static_cast<std::uint32_t>(sections.size()));
  for (const auto& s : sections) {
    w.str(s.name);
    w.u64(s.payload.size());
    w.raw(s.payload);
  }
  return w.take();
}

/// Sections by name. Duplicate names and trailing bytes are format errors.
inline std::map<std::string, std::string> decode_tkck(std::string_view bytes) {
  if (bytes.size() < 12) throw TruncatedPayload("TKCK header needs 12 bytes");
  ByteReader r(bytes);
  if (r.raw(4) != "TKCK") throw FormatError("not a TKCK checkpoint (bad magic)");
  if (const auto v = r.u32(); v != kTkckVersion) throw FormatError("unsupported TKCK version " + std::to_string(v));
  const auto n = r.u32();
  std::map<std::string, std::string> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    auto name = r.str();
    const auto len = r.u64();
    if (len > r.remaining()) throw TruncatedPayload("section '" + name + "' overruns the file");
    auto payload = std::string(r.raw(static_cast<std::size_t>(len)));
    if (!out.emplace(name, std::move(payload)).second) throw FormatError("duplicate section '" + name + "'");
  }
  if (!r.done()) throw FormatError("TKCK file has trailing bytes");
  return out;
}

inline const std::string& require_section(const std::map<std::string, std::string>& sections, const std::string& name) {
  auto it = sections.find(name);
  if (it == sections.end()) throw FormatError("checkpoint has no '" + name + "' section");
  return it->second;
}

inline void save_mlp(ByteWriter& w, const Mlp& m) {
  w.u64(m.layer_dims().size());
  for (auto d : m.layer_dims()) w.u64(d);
  for (const auto& l : m.layers()) {
    w.tensor(l.weight);
    w.tensor(l.bias);
  }
}

inline Mlp load_mlp(ByteReader& r) {
  const auto n = r.u64();
  if (n < 2 || n > 64) throw FormatError("implausible layer count in network section");
  std::vector<std::size_t> dims(n);
  for (auto& d : dims) d = r.u64();
  Mlp m = Mlp::zeros(dims);
  for (auto& l : m.layers()) {
    Tensor w = r.tensor();
    Tensor b = r.tensor();
    if (w.shape() != l.weight.shape() || b.size() != l.bias.size()) throw FormatError("network layer shape mismatch");
    l.weight = std::move(w);
    l.bias = Tensor(l.bias.shape(), std::move(b.buffer()));
  }
  return m;
}

inline std::string encode_mlp(const Mlp& m) {
  ByteWriter w;
  save_mlp(w, m);
  return w.take();
}

inline Mlp decode_mlp(std::string_view bytes) {
  ByteReader r(bytes);
  Mlp m = load_mlp(r);
  if (!r.done()) throw FormatError("trailing bytes in network section");
  return m;
}

inline void save_metrics(ByteWriter& w, const std::vector<MetricRecord>& records) {
  w.u64(records.size());
  for (const auto& m : records) {
    w.u64(m.epoch);
    w.f64(m.loss.total);
    w.f64(m.loss.current);
    w.f64s(m.loss.temporal);
    w.f64(m.knn_top1);
    w.u8(m.linear_top1.has_value());
    w.f64(m.linear_top1.value_or(0.0));
    w.f64(m.mean_stability);
    w.f64(m.lr);
  }
}

inline std::vector<MetricRecord> load_metrics(ByteReader& r) {
  const auto n = r.u64();
  if (n > r.remaining()) throw TruncatedPayload("metrics section truncated");
  std::vector<MetricRecord> out(n);
  for (auto& m : out) {
    m.epoch = r.u64();
    m.loss.total = r.f64();
    m.loss.current = r.f64();
    m.loss.temporal = r.f64s();
    m.knn_top1 = r.f64();
    const bool has_linear = r.u8() != 0;
    const double linear = r.f64();
    if (has_linear) m.linear_top1 = linear;
    m.mean_stability = r.f64();
    m.lr = r.f64();
  }
  return out;
}

}  // namespace tkc
