// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "tkc/binary_io.hpp"
#include "tkc/data.hpp"
#include "tkc/errors.hpp"
#include "tkc/eval.hpp"
#include "tkc/networks.hpp"

namespace tkc {

enum class LossVariant { infonce, l2 };

inline std::string_view to_string(LossVariant v) { return v == LossVariant::infonce ? "infonce" : "l2"; }

/// Every knob of a training run. Defaults are the desk-scale setup: an 8-class
/// Gaussian mixture, a 32 -> 256 -> 128 -> 16 encoder and two temporal teachers.
struct TrainConfig {
  std::uint64_t seed = 1;
  std::size_t h = 2;  // temporal teachers; 0 disables all temporal machinery
  double alpha = 0.999;
  double tau = 0.2;
  std::size_t k = 1024;           // queue negatives for the current-teacher term
  std::size_t k_temporal = 0;     // negatives per temporal term; 0 means "same as K"
  std::size_t batch_size = 64;
  std::size_t epochs = 40;
  double lr_base = 0.03;
  std::size_t warmup_epochs = 2;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  LossVariant loss = LossVariant::infonce;
  KtStructure kt_structure = KtStructure::two_layer;
  std::size_t kt_hidden = 32;
  bool predictor = true;  // L2 variant only
  std::vector<std::size_t> encoder_hidden{256, 128};
  std::size_t embed_dim = 16;
  double aug_sigma = 0.5;
  double aug_mask = 0.25;
  std::size_t knn_k = 5;
  double eval_train_fraction = 0.8;
  std::string data_path;  // empty: synthetic mixture below
  MixtureSpec data{};

  AugmentSpec augment_spec() const { return {aug_sigma, aug_mask}; }
  bool temporal_enabled() const { return h > 0; }
  std::size_t temporal_negatives() const { return k_temporal ? k_temporal : k; }
  bool uses_predictor() const { return loss == LossVariant::l2 && predictor; }

  std::vector<std::size_t> encoder_dims(std::size_t in_dim) const {
    std::vector<std::size_t> dims{in_dim};
    dims.insert(dims.end(), encoder_hidden.begin(), encoder_hidden.end());
    dims.push_back(embed_dim);
    return dims;
  }

  /// Applies one `key=value` assignment; throws ConfigError naming the key.
  void set(std::string_view key, std::string_view value);

  /// Every key with its resolved value, one `key=value` per line, fixed order.
  std::string to_text() const;

  void validate() const;
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::uint64_t parse_uint(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ConfigError("key '" + std::string(key) + "': expected a non-negative integer, got '" + std::string(v) + "'");
  return out;
}

inline double parse_double(std::string_view key, std::string_view v) {
  const std::string s(v);
  try {
    std::size_t used = 0;
    const double d = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + std::string(key) + "': expected a number, got '" + s + "'");
  }
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + std::string(key) + "': expected true/false, got '" + std::string(v) + "'");
}

inline std::vector<std::size_t> parse_dims(std::string_view key, std::string_view v) {
  std::vector<std::size_t> out;
  if (trim(v).empty()) return out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const auto comma = v.find(',', start);
    const auto piece = trim(v.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    out.push_back(parse_uint(key, piece));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

struct Field {
  std::string_view name;
  std::function<void(TrainConfig&, std::string_view key, std::string_view value)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename T>
Field uint_field(std::string_view name, T TrainConfig::*member) {
  return {name, [member](TrainConfig& c, std::string_view k, std::string_view v) {
            c.*member = static_cast<T>(parse_uint(k, v));
          },
          [member](const TrainConfig& c) { return std::to_string(c.*member); }};
}

inline Field double_field(std::string_view name, double TrainConfig::*member) {
  return {name, [member](TrainConfig& c, std::string_view k, std::string_view v) { c.*member = parse_double(k, v); },
          [member](const TrainConfig& c) { return format_double(c.*member); }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      uint_field("seed", &TrainConfig::seed),
      uint_field("h", &TrainConfig::h),
      double_field("alpha", &TrainConfig::alpha),
      double_field("tau", &TrainConfig::tau),
      uint_field("K", &TrainConfig::k),
      uint_field("K_temporal", &TrainConfig::k_temporal),
      uint_field("batch_size", &TrainConfig::batch_size),
      uint_field("epochs", &TrainConfig::epochs),
      double_field("lr_base", &TrainConfig::lr_base),
      uint_field("warmup_epochs", &TrainConfig::warmup_epochs),
      double_field("weight_decay", &TrainConfig::weight_decay),
      double_field("momentum", &TrainConfig::momentum),
      {"loss",
       [](TrainConfig& c, std::string_view k, std::string_view v) {
         if (v == "infonce")
           c.loss = LossVariant::infonce;
         else if (v == "l2")
           c.loss = LossVariant::l2;
         else
           throw ConfigError("key '" + std::string(k) + "': expected infonce or l2, got '" + std::string(v) + "'");
       },
       [](const TrainConfig& c) { return std::string(to_string(c.loss)); }},
      {"kt_structure",
       [](TrainConfig& c, std::string_view k, std::string_view v) {
         try {
           c.kt_structure = parse_kt_structure(v);
         } catch (const ConfigError&) {
           throw ConfigError("key '" + std::string(k) + "': expected two_layer, four_layer or bottleneck, got '" +
                             std::string(v) + "'");
         }
       },
       [](const TrainConfig& c) { return std::string(to_string(c.kt_structure)); }},
      uint_field("kt_hidden", &TrainConfig::kt_hidden),
      {"predictor", [](TrainConfig& c, std::string_view k, std::string_view v) { c.predictor = parse_bool(k, v); },
       [](const TrainConfig& c) { return std::string(c.predictor ? "true" : "false"); }},
      {"encoder_hidden",
       [](TrainConfig& c, std::string_view k, std::string_view v) { c.encoder_hidden = parse_dims(k, v); },
       [](const TrainConfig& c) {
         std::string s;
         for (std::size_t i = 0; i < c.encoder_hidden.size(); ++i) s += (i ? "," : "") + std::to_string(c.encoder_hidden[i]);
         return s;
       }},
      uint_field("embed_dim", &TrainConfig::embed_dim),
      double_field("aug_sigma", &TrainConfig::aug_sigma),
      double_field("aug_mask", &TrainConfig::aug_mask),
      uint_field("knn_k", &TrainConfig::knn_k),
      double_field("eval_train_fraction", &TrainConfig::eval_train_fraction),
      {"data_path", [](TrainConfig& c, std::string_view, std::string_view v) { c.data_path = std::string(v); },
       [](const TrainConfig& c) { return c.data_path; }},
      {"data_classes",
       [](TrainConfig& c, std::string_view k, std::string_view v) { c.data.classes = parse_uint(k, v); },
       [](const TrainConfig& c) { return std::to_string(c.data.classes); }},
      {"data_per_class",
       [](TrainConfig& c, std::string_view k, std::string_view v) { c.data.per_class = parse_uint(k, v); },
       [](const TrainConfig& c) { return std::to_string(c.data.per_class); }},
      {"data_dim", [](TrainConfig& c, std::string_view k, std::string_view v) { c.data.dim = parse_uint(k, v); },
       [](const TrainConfig& c) { return std::to_string(c.data.dim); }},
      {"data_spread",
       [](TrainConfig& c, std::string_view k, std::string_view v) { c.data.spread = parse_double(k, v); },
       [](const TrainConfig& c) { return format_double(c.data.spread); }},
      {"data_seed", [](TrainConfig& c, std::string_view k, std::string_view v) { c.data.seed = parse_uint(k, v); },
       [](const TrainConfig& c) { return std::to_string(c.data.seed); }},
  };
  return table;
}

}  // namespace config_detail

inline void TrainConfig::set(std::string_view key, std::string_view value) {
  const std::string k = config_detail::trim(key);
  const std::string v = config_detail::trim(value);
  for (const auto& f : config_detail::fields()) {
    if (f.name == k) {
      f.set(*this, k, v);
      return;
    }
  }
  throw ConfigError("unknown config key '" + k + "'");
}

inline std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& f : config_detail::fields()) out += std::string(f.name) + "=" + f.get(*this) + "\n";
  return out;
}

inline void TrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError("key '" + key + "': " + why); };
  if (!(alpha >= 0.0 && alpha <= 1.0)) fail("alpha", "must lie in [0, 1]");
  if (!(tau > 0.0)) fail("tau", "must be positive");
  if (k == 0) fail("K", "must be positive");
  if (batch_size == 0) fail("batch_size", "must be positive");
  if (epochs > 0 && warmup_epochs >= epochs) fail("warmup_epochs", "must be smaller than epochs");
  if (!(lr_base >= 0.0)) fail("lr_base", "must be non-negative");
  if (!(weight_decay >= 0.0)) fail("weight_decay", "must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum", "must lie in [0, 1)");
  if (kt_hidden == 0) fail("kt_hidden", "must be positive");
  if (embed_dim == 0) fail("embed_dim", "must be positive");
  for (auto e : encoder_hidden)
    if (e == 0) fail("encoder_hidden", "extents must be positive");
  if (!(aug_sigma >= 0.0)) fail("aug_sigma", "must be non-negative");
  if (!(aug_mask >= 0.0 && aug_mask < 1.0)) fail("aug_mask", "must lie in [0, 1)");
  if (knn_k == 0 || knn_k % 2 == 0) fail("knn_k", "must be odd");
  if (!(eval_train_fraction > 0.0 && eval_train_fraction < 1.0)) fail("eval_train_fraction", "must lie in (0, 1)");
  if (data_path.empty()) {
    if (data.classes < 2) fail("data_classes", "must be at least 2");
    if (data.per_class == 0) fail("data_per_class", "must be positive");
    if (data.dim == 0) fail("data_dim", "must be positive");
    if (!(data.spread >= 0.0)) fail("data_spread", "must be non-negative");
  }
}

/// Parses `key = value` lines; `#` starts a comment.
inline void apply_config_text(TrainConfig& cfg, std::string_view text) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    if (config_detail::trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key=value, got '" + config_detail::trim(line) +
                        "'");
    cfg.set(line.substr(0, eq), line.substr(eq + 1));
  }
}

inline TrainConfig parse_config(std::string_view text) {
  TrainConfig cfg;
  apply_config_text(cfg, text);
  return cfg;
}

inline TrainConfig load_config(const std::filesystem::path& path) { return parse_config(read_file(path)); }

/// `key=value` override as given on the command line.
inline void apply_override(TrainConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos)
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
  cfg.set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

inline Dataset load_dataset(const TrainConfig& cfg) {
  return cfg.data_path.empty() ? make_gaussian_mixture(cfg.data) : load_raw_dataset(cfg.data_path);
}

}  // namespace tkc
