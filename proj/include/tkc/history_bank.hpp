// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tkc/binary_io.hpp"
#include "tkc/errors.hpp"
#include "tkc/networks.hpp"
#include "tkc/rng.hpp"
#include "tkc/tensor.hpp"

namespace tkc {

/// Per-sample store of teacher embeddings from the previous h epochs.
///
/// Storage is |D| x h x d. A row holds one sample's features from h different
/// epochs; a physical column holds one epoch's features for every sample.
/// Epoch e writes into column `cursor() == e % h`, overwriting the features of
/// epoch e - h cell by cell. Since every sample is visited once per epoch and
/// its row is fetched before it is written, a fetch during epoch e >= h always
/// sees epochs e-h .. e-1.
///
/// Temporal index k in [0, h) names the k-th oldest retained epoch
/// (k = 0 is T_{n-h}, k = h-1 is T_{n-1}).
class HistoryBank {
 public:
  HistoryBank() = default;

  HistoryBank(std::size_t n_samples, std::size_t n_columns, std::size_t dim, std::uint64_t rng_seed)
      : n_(n_samples), h_(n_columns), d_(dim), rng_(rng_seed) {
    if (n_ == 0 || h_ == 0 || d_ == 0) throw ShapeError("history bank extents must be positive");
    storage_.assign(n_ * h_ * d_, 0.0);
    stamps_.assign(n_ * h_, -1);
    column_epoch_.assign(h_, -1);
    written_.assign(n_, 0);
  }

  std::size_t samples() const { return n_; }
  std::size_t columns() const { return h_; }
  std::size_t dim() const { return d_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t cursor() const { return epoch_ % h_; }
  std::size_t footprint() const { return storage_.size(); }

  /// Physical column holds a complete epoch of features.
  bool column_valid(std::size_t c) const { return column_epoch_.at(c) >= 0; }
  /// Epoch whose complete set of features column c received, or -1.
  std::int64_t column_epoch(std::size_t c) const { return column_epoch_.at(c); }
  /// Epoch that wrote cell (i, c), or -1.
  std::int64_t stamp(std::size_t i, std::size_t c) const { return stamps_.at(i * h_ + c); }

  std::span<const double> cell(std::size_t i, std::size_t c) const {
    check_index(i);
    if (c >= h_) throw ShapeError("bank column out of range");
    return std::span<const double>(storage_).subspan((i * h_ + c) * d_, d_);
  }

  /// Stores `feature` for sample i in the current epoch's column.
  void write(std::size_t i, std::span<const double> feature) {
    check_index(i);
    if (feature.size() != d_) throw ShapeError("bank write: feature has dimension " + std::to_string(feature.size()));
    const std::size_t c = cursor();
    std::copy(feature.begin(), feature.end(), storage_.begin() + static_cast<std::ptrdiff_t>((i * h_ + c) * d_));
    stamps_[i * h_ + c] = static_cast<std::int64_t>(epoch_);
    if (!written_[i]) {
      written_[i] = 1;
      if (++written_count_ == n_) column_epoch_[c] = static_cast<std::int64_t>(epoch_);
    }
  }

  /// Physical column of temporal index k, valid only once epoch() >= h.
  std::size_t physical_column(std::size_t k) const { return (cursor() + k) % h_; }

  /// Features of sample i from epochs e-h .. e-1, oldest first, as [h x d].
  Tensor fetch_row(std::size_t i) const {
    check_index(i);
    if (epoch_ < h_)
      throw WarmupIncomplete("history bank holds " + std::to_string(epoch_) + " of " + std::to_string(h_) +
                             " epochs");
    Tensor out({h_, d_});
    for (std::size_t k = 0; k < h_; ++k) {
      const std::size_t c = physical_column(k);
      const auto expect = static_cast<std::int64_t>(epoch_ - h_ + k);
      if (stamps_[i * h_ + c] != expect)
        throw WarmupIncomplete("sample " + std::to_string(i) + " has no feature from epoch " + std::to_string(expect));
      std::copy_n(cell(i, c).begin(), d_, out.row(k).begin());
    }
    return out;
  }

  /// Feature of sample i from the previous epoch, if present.
  std::optional<std::span<const double>> previous(std::size_t i) const {
    check_index(i);
    if (epoch_ == 0) return std::nullopt;
    const std::size_t c = (epoch_ - 1) % h_;
    if (stamps_[i * h_ + c] != static_cast<std::int64_t>(epoch_ - 1)) return std::nullopt;
    return cell(i, c);
  }

  /// `count` distinct sample indices != exclude, for negatives of temporal
  /// index k. Draw order follows the bank's seeded stream.
  std::vector<std::uint32_t> sample_negative_indices(std::size_t k, std::size_t exclude, std::size_t count) {
    if (k >= h_) throw ShapeError("temporal index out of range");
    if (!column_valid(physical_column(k)))
      throw WarmupIncomplete("column " + std::to_string(physical_column(k)) + " is not filled yet");
    if (count >= n_) throw ValueError("negative count must be below the number of samples");
    check_index(exclude);
    // Partial Fisher-Yates over the pool [0, n) \ {exclude}, held as an
    // identity permutation of n - 1 slots and restored afterwards.
    const std::size_t pool = n_ - 1;
    if (scratch_.size() != pool) {
      scratch_.resize(pool);
      for (std::size_t i = 0; i < pool; ++i) scratch_[i] = static_cast<std::uint32_t>(i);
    }
    std::vector<std::uint32_t> out(count);
    std::vector<std::size_t> swaps(count);
    for (std::size_t i = 0; i < count; ++i) {
      const auto j = i + rng_.below(pool - i);
      std::swap(scratch_[i], scratch_[j]);
      swaps[i] = j;
      const std::uint32_t v = scratch_[i];
      out[i] = v < exclude ? v : v + 1;
    }
    for (std::size_t i = count; i-- > 0;) std::swap(scratch_[i], scratch_[swaps[i]]);
    return out;
  }

  /// Negative features [count x d] drawn from temporal index k's column.
  Tensor sample_negatives(std::size_t k, std::size_t exclude, std::size_t count) {
    const auto idx = sample_negative_indices(k, exclude, count);
    Tensor out({std::max<std::size_t>(count, 1), d_});
    const std::size_t c = physical_column(k);
    for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(cell(idx[r], c).begin(), d_, out.row(r).begin());
    return out;
  }

  /// Closes the current epoch; the cursor moves to the oldest column.
  void advance_epoch() {
    ++epoch_;
    std::fill(written_.begin(), written_.end(), 0);
    written_count_ = 0;
  }

  Rng& rng() { return rng_; }

  void save(ByteWriter& w) const {
    w.u64(n_);
    w.u64(h_);
    w.u64(d_);
    w.u64(epoch_);
    w.u64(written_count_);
    w.f64s(storage_);
    w.i64s(stamps_);
    w.i64s(column_epoch_);
    std::vector<std::uint32_t> written(written_.begin(), written_.end());
    w.u32s(written);
    w.str(rng_.state());
  }

  static HistoryBank load(ByteReader& r) {
    HistoryBank b;
    b.n_ = r.u64();
    b.h_ = r.u64();
    b.d_ = r.u64();
    b.epoch_ = r.u64();
    b.written_count_ = r.u64();
    b.storage_ = r.f64s();
    b.stamps_ = r.i64s();
    b.column_epoch_ = r.i64s();
    const auto written = r.u32s();
    b.written_.assign(written.begin(), written.end());
    b.rng_.set_state(r.str());
    if (b.n_ == 0 || b.h_ == 0 || b.d_ == 0 || b.storage_.size() != b.n_ * b.h_ * b.d_ ||
        b.stamps_.size() != b.n_ * b.h_ || b.column_epoch_.size() != b.h_ || b.written_.size() != b.n_)
      throw FormatError("history bank section is inconsistent");
    return b;
  }

 private:
  void check_index(std::size_t i) const {
    if (i >= n_) throw ShapeError("sample index " + std::to_string(i) + " out of range");
  }

  std::size_t n_ = 0, h_ = 0, d_ = 0;
  std::size_t epoch_ = 0;
  std::vector<double> storage_;
  std::vector<std::int64_t> stamps_;
  std::vector<std::int64_t> column_epoch_;
  std::vector<std::uint8_t> written_;
  std::size_t written_count_ = 0;
  Rng rng_;
  std::vector<std::uint32_t> scratch_;
};

/// Keeps full copies of the teacher from the last h epoch boundaries. This is
/// what the history bank approximates; it exists to check the bank against.
class TeacherSnapshots {
 public:
  explicit TeacherSnapshots(std::size_t h) : h_(h) {}

  void push(const EncoderParams& teacher) {
    snapshots_.push_back(teacher);
    if (snapshots_.size() > h_) snapshots_.pop_front();
  }

  bool ready() const { return snapshots_.size() == h_; }
  std::size_t size() const { return snapshots_.size(); }
  const EncoderParams& at(std::size_t k) const { return snapshots_.at(k); }

  /// z_k = T_k(x) for every retained teacher, oldest first.
  std::vector<Tensor> targets(const Tensor& x) const {
    std::vector<Tensor> out;
    for (const auto& t : snapshots_) out.push_back(t.forward(x));
    return out;
  }

 private:
  std::size_t h_;
  std::deque<EncoderParams> snapshots_;
};

}  // namespace tkc
