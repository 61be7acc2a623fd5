// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tkc/autodiff.hpp"
#include "tkc/binary_io.hpp"
#include "tkc/errors.hpp"
#include "tkc/kernels.hpp"
#include "tkc/tensor.hpp"

namespace tkc {

/// Loss value split into the current-teacher term and one term per temporal
/// teacher (oldest first).
struct LossBreakdown {
  double total = 0.0;
  double current = 0.0;
  std::vector<double> temporal;
};

/// Single-sample InfoNCE against one positive and K negatives (flattened
/// [K x d]; empty for K = 0).
inline double nce_term(std::span<const double> r0, std::span<const double> pos, std::span<const double> negs,
                       double tau) {
  if (!(tau > 0.0)) throw ValueError("temperature must be positive");
  const std::size_t d = r0.size();
  if (pos.size() != d || d == 0 || negs.size() % d != 0) throw ShapeError("nce_term: dimension mismatch");
  const std::size_t k = negs.size() / d;
  return kernel::nce_row(r0.data(), pos.data(), [&](std::size_t j) { return negs.data() + j * d; }, k, d, tau);
}

struct TemporalTerm {
  Var positives;                        // K_j(z_j) for the batch, [B x d]
  Var negatives;                        // transformed negative pool
  std::vector<std::uint32_t> neg_index; // [B x k] rows of `negatives`
  std::size_t k = 0;
};

struct TemporalLoss {
  Var total;
  LossBreakdown breakdown;
};

/// Sum of h + 1 InfoNCE terms: the current EMA target against the shared
/// queue, then each temporal target against negatives from its own teacher.
/// Terms are added in that fixed order.
inline TemporalLoss temporal_nce(const Var& anchors, const Var& current_pos, const Var& queue, std::size_t queue_k,
                                 std::vector<TemporalTerm> temporal, double tau) {
  TemporalLoss out;
  Var total = ag::info_nce(anchors, current_pos, queue, {}, queue_k, tau);
  out.breakdown.current = total.value().item();
  for (auto& term : temporal) {
    Var t = ag::info_nce(anchors, term.positives, term.negatives, std::move(term.neg_index), term.k, tau);
    out.breakdown.temporal.push_back(t.value().item());
    total = ag::add(total, t);
  }
  out.total = total;
  out.breakdown.total = total.value().item();
  return out;
}

/// Sum over targets of the batch-mean ||pred - target||^2. For unit vectors
/// each term equals 2 - 2 cos.
inline TemporalLoss temporal_l2(const Var& pred, const Var& current_target, const std::vector<Var>& temporal) {
  TemporalLoss out;
  Var total = ag::squared_distance(pred, current_target);
  out.breakdown.current = total.value().item();
  for (const auto& target : temporal) {
    Var t = ag::squared_distance(pred, target);
    out.breakdown.temporal.push_back(t.value().item());
    total = ag::add(total, t);
  }
  out.total = total;
  out.breakdown.total = total.value().item();
  return out;
}

/// FIFO of detached teacher embeddings supplying negatives for the
/// current-teacher term.
class NegativeQueue {
 public:
  NegativeQueue() = default;
  NegativeQueue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim), rows_(capacity * dim, 0.0) {
    if (capacity == 0 || dim == 0) throw ShapeError("queue capacity and dimension must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return size_; }
  bool full() const { return size_ == capacity_; }

  void push(std::span<const double> row) {
    if (row.size() != dim_) throw ShapeError("queue row dimension mismatch");
    const std::size_t slot = (head_ + size_) % capacity_;
    std::copy(row.begin(), row.end(), rows_.begin() + static_cast<std::ptrdiff_t>(slot * dim_));
    if (size_ < capacity_) {
      ++size_;
    } else {
      head_ = (head_ + 1) % capacity_;
    }
  }

  void push_rows(const Tensor& batch) {
    for (std::size_t r = 0; r < batch.rows(); ++r) push(batch.row(r));
  }

  /// Current contents, oldest first, as [size x d]. Never requires gradients.
  Tensor view() const {
    if (size_ == 0) throw ValueError("negative queue is empty");
    Tensor out({size_, dim_});
    for (std::size_t r = 0; r < size_; ++r) {
      const std::size_t slot = (head_ + r) % capacity_;
      std::copy_n(rows_.begin() + static_cast<std::ptrdiff_t>(slot * dim_), dim_, out.row(r).begin());
    }
    return out;
  }

  void save(ByteWriter& w) const {
    w.u64(capacity_);
    w.u64(dim_);
    w.u64(head_);
    w.u64(size_);
    w.f64s(rows_);
  }

  static NegativeQueue load(ByteReader& r) {
    NegativeQueue q;
    q.capacity_ = r.u64();
    q.dim_ = r.u64();
    q.head_ = r.u64();
    q.size_ = r.u64();
    q.rows_ = r.f64s();
    if (q.capacity_ == 0 || q.rows_.size() != q.capacity_ * q.dim_ || q.size_ > q.capacity_ || q.head_ >= q.capacity_)
      throw FormatError("negative queue section is inconsistent");
    return q;
  }

 private:
  std::size_t capacity_ = 0, dim_ = 0;
  std::size_t head_ = 0, size_ = 0;
  std::vector<double> rows_;
};

}  // namespace tkc
