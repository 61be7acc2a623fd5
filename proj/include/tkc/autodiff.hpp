// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "tkc/errors.hpp"
#include "tkc/kernels.hpp"
#include "tkc/tensor.hpp"

namespace tkc {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// tape is alive and not reset.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Records are appended in execution order, so every
/// record's inputs precede it and backward is a single reverse sweep.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::span<const double> out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that aliases an external tensor. If `t.requires_grad()`, backward
  /// accumulates dLoss/dt into `t`'s gradient buffer. `t` must outlive the
  /// tape's use.
  Var param(Tensor& t) {
    Node n;
    n.ref = &t;
    n.sink = t.requires_grad() ? &t : nullptr;
    n.needs_grad = t.requires_grad();
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Leaf holding its own copy; never receives gradients.
  Var constant(Tensor t) {
    Node n;
    n.own = std::move(t);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Appends an op record. The backward rule is kept only when some input
  /// needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    Node n;
    n.own = std::move(value);
    for (const Var& v : inputs) {
      if (v.tape_ != this) throw AutodiffError("op mixes values from different tapes");
      n.needs_grad = n.needs_grad || nodes_[v.id_].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.ref ? *n.ref : n.own;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }

  /// Gradient buffer of a record (empty if nothing flowed into it).
  std::span<const double> grad(const Var& v) const { return nodes_.at(v.id_).grad; }

  /// Zero-initialised gradient buffer for record `id`, for use inside
  /// backward rules. Returns an empty span for records that need no gradient.
  std::span<double> grad_sink(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return {};
    if (n.grad.empty()) n.grad.assign(value(id).size(), 0.0);
    return n.grad;
  }

  void backward(const Var& loss) {
    if (loss.tape_ != this) throw AutodiffError("loss was recorded on another tape");
    if (backward_done_) throw AutodiffError("backward already ran on this tape; reset() first");
    if (!value(loss.id_).is_scalar())
      throw AutodiffError("backward needs a scalar loss, got shape " + shape_str(value(loss.id_).shape()));
    if (!nodes_[loss.id_].needs_grad) throw AutodiffError("loss is detached from every trainable leaf");
    backward_done_ = true;
    nodes_[loss.id_].grad.assign(1, 1.0);
    for (std::size_t id = loss.id_ + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) {
        // Copy so the rule may safely touch other records' buffers.
        const std::vector<double> g = n.grad;
        n.backward(*this, g);
      }
    }
    for (Node& n : nodes_)
      if (n.sink && !n.grad.empty()) n.sink->accumulate_grad(n.grad);
  }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor own;
    const Tensor* ref = nullptr;
    Tensor* sink = nullptr;
    bool needs_grad = false;
    BackwardFn backward;
    std::vector<double> grad;
  };

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace ag {

namespace detail {

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}

}  // namespace detail

/// a[m x k] * b[k x n].
inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_matrix(av, "matmul");
  detail::require_matrix(bv, "matmul");
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  if (bv.shape()[0] != k)
    throw ShapeError("matmul inner extents differ: " + shape_str(av.shape()) + " * " + shape_str(bv.shape()));
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) kernel::axpy(av.at(i, p), bv.row(p).data(), out.row(i).data(), n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](Tape& t, std::span<const double> g) {
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    if (auto ga = t.grad_sink(ia); !ga.empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += kernel::dot(g.data() + i * n, B.row(p).data(), n);
    }
    if (auto gb = t.grad_sink(ib); !gb.empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) kernel::axpy(A.at(i, p), g.data() + i * n, gb.data() + p * n, n);
    }
  });
}

/// x[rows x in] * w[out x in]^T + b[out].
inline Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  detail::require_matrix(xv, "linear");
  detail::require_matrix(wv, "linear");
  const std::size_t rows = xv.shape()[0], in = xv.shape()[1], out = wv.shape()[0];
  if (wv.shape()[1] != in || bv.size() != out)
    throw ShapeError("linear: input " + shape_str(xv.shape()) + ", weight " + shape_str(wv.shape()) + ", bias " +
                     shape_str(bv.shape()));
  Tensor y({rows, out});
  kernel::linear_forward(xv.data().data(), wv.data().data(), bv.data().data(), y.data().data(), rows, in, out);
  const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
  return x.tape().record(std::move(y), {x, w, b}, [=](Tape& t, std::span<const double> g) {
    const Tensor& X = t.value(ix);
    const Tensor& W = t.value(iw);
    if (auto gx = t.grad_sink(ix); !gx.empty()) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out; ++o) kernel::axpy(g[r * out + o], W.row(o).data(), gx.data() + r * in, in);
    }
    if (auto gw = t.grad_sink(iw); !gw.empty()) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out; ++o) kernel::axpy(g[r * out + o], X.row(r).data(), gw.data() + o * in, in);
    }
    if (auto gb = t.grad_sink(ib); !gb.empty()) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out; ++o) gb[o] += g[r * out + o];
    }
  });
}

inline Var relu(const Var& x) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(y), {x}, [=](Tape& t, std::span<const double> g) {
    const Tensor& X = t.value(ix);
    auto gx = t.grad_sink(ix);
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (X[i] > 0.0) gx[i] += g[i];
  });
}

/// Row-wise x / max(||x||, 1e-12).
inline Var l2_normalize(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor y(xv.shape());
  std::vector<double> norms(rows);
  kernel::normalize_rows(xv.data().data(), y.data().data(), norms.data(), rows, cols);
  const std::size_t ix = x.id();
  std::vector<double> unit = y.buffer();
  return x.tape().record(std::move(y), {x},
                         [=, norms = std::move(norms), unit = std::move(unit)](Tape& t, std::span<const double> g) {
                           auto gx = t.grad_sink(ix);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* yr = unit.data() + r * cols;
                             const double* gr = g.data() + r * cols;
                             double* out_r = gx.data() + r * cols;
                             if (norms[r] > kernel::kNormEpsilon) {
                               const double proj = kernel::dot(yr, gr, cols);
                               for (std::size_t c = 0; c < cols; ++c) out_r[c] += (gr[c] - yr[c] * proj) / norms[r];
                             } else {
                               for (std::size_t c = 0; c < cols; ++c) out_r[c] += gr[c] / kernel::kNormEpsilon;
                             }
                           }
                         });
}

inline Var add(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) throw ShapeError("add: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor y(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) y[i] = av[i] + bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(y), {a, b}, [=](Tape& t, std::span<const double> g) {
    for (std::size_t id : {ia, ib}) {
      auto gs = t.grad_sink(id);
      for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += g[i];
    }
  });
}

inline Var scale(const Var& a, double c) {
  const Tensor& av = a.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) y[i] = av[i] * c;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(y), {a}, [=](Tape& t, std::span<const double> g) {
    auto gs = t.grad_sink(ia);
    for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += g[i] * c;
  });
}

/// Sum of all entries, as a scalar.
inline Var sum(const Var& a) {
  const Tensor& av = a.value();
  double acc = 0.0;
  for (double v : av.data()) acc += v;
  const std::size_t ia = a.id();
  return a.tape().record(Tensor::scalar(acc), {a}, [=](Tape& t, std::span<const double> g) {
    auto gs = t.grad_sink(ia);
    for (double& v : gs) v += g[0];
  });
}

/// Rows of x selected by `index` (repeats allowed).
inline Var gather_rows(const Var& x, std::vector<std::uint32_t> index) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "gather_rows");
  const std::size_t cols = xv.cols();
  if (index.empty()) throw ShapeError("gather_rows with no indices");
  Tensor y({index.size(), cols});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= xv.rows()) throw ShapeError("gather_rows index out of range");
    std::copy_n(xv.row(index[r]).data(), cols, y.row(r).data());
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(y), {x}, [=, index = std::move(index)](Tape& t, std::span<const double> g) {
    auto gx = t.grad_sink(ix);
    for (std::size_t r = 0; r < index.size(); ++r)
      for (std::size_t c = 0; c < cols; ++c) gx[index[r] * cols + c] += g[r * cols + c];
  });
}

/// Batch-mean InfoNCE.
///
/// Row b contrasts anchors[b] against positives[b] and K negatives. With an
/// empty `neg_index` every row uses all rows of `negatives` (a shared queue);
/// otherwise `neg_index` is row-major [rows x K] into `negatives`.
inline Var info_nce(const Var& anchors, const Var& positives, const Var& negatives,
                    std::vector<std::uint32_t> neg_index, std::size_t k, double tau) {
  if (!(tau > 0.0)) throw ValueError("temperature must be positive");
  const Tensor& av = anchors.value();
  const Tensor& pv = positives.value();
  const Tensor& nv = negatives.value();
  const std::size_t rows = av.rows(), dim = av.cols();
  if (pv.rows() != rows || pv.cols() != dim) throw ShapeError("info_nce: positives do not match anchors");
  if (k > 0 && nv.cols() != dim) throw ShapeError("info_nce: negative dimension differs from anchors");
  const bool shared = neg_index.empty();
  if (shared && k > 0 && k != nv.rows()) throw ShapeError("info_nce: shared negatives need k == rows(negatives)");
  if (!shared) {
    if (neg_index.size() != rows * k) throw ShapeError("info_nce: neg_index must be rows x k");
    for (auto i : neg_index)
      if (i >= nv.rows()) throw ShapeError("info_nce: negative index out of range");
  }
  std::vector<double> probs(rows * (k + 1));
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    auto neg_row = [&](std::size_t j) {
      return nv.row(shared ? j : neg_index[r * k + j]).data();
    };
    total += kernel::nce_row(av.row(r).data(), pv.row(r).data(), neg_row, k, dim, tau, probs.data() + r * (k + 1));
  }
  total /= static_cast<double>(rows);
  const std::size_t ia = anchors.id(), ip = positives.id(), in = negatives.id();
  return anchors.tape().record(
      Tensor::scalar(total), {anchors, positives, negatives},
      [=, neg_index = std::move(neg_index), probs = std::move(probs)](Tape& t, std::span<const double> g) {
        const Tensor& A = t.value(ia);
        const Tensor& P = t.value(ip);
        const Tensor& N = t.value(in);
        auto ga = t.grad_sink(ia);
        auto gp = t.grad_sink(ip);
        auto gn = t.grad_sink(in);
        const double w = g[0] / (static_cast<double>(rows) * tau);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* pr = probs.data() + r * (k + 1);
          const double* a = A.row(r).data();
          const double coef_pos = (pr[0] - 1.0) * w;
          if (!ga.empty()) kernel::axpy(coef_pos, P.row(r).data(), ga.data() + r * dim, dim);
          if (!gp.empty()) kernel::axpy(coef_pos, a, gp.data() + r * dim, dim);
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t nr = shared ? j : neg_index[r * k + j];
            const double coef = pr[j + 1] * w;
            if (!ga.empty()) kernel::axpy(coef, N.row(nr).data(), ga.data() + r * dim, dim);
            if (!gn.empty()) kernel::axpy(coef, a, gn.data() + nr * dim, dim);
          }
        }
      });
}

/// Batch mean of ||pred_b - target_b||^2.
inline Var squared_distance(const Var& pred, const Var& target) {
  const Tensor& pv = pred.value();
  const Tensor& tv = target.value();
  if (pv.shape() != tv.shape())
    throw ShapeError("squared_distance: " + shape_str(pv.shape()) + " vs " + shape_str(tv.shape()));
  const std::size_t rows = pv.rows(), dim = pv.cols();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
      const double d = pv.at(r, c) - tv.at(r, c);
      acc += d * d;
    }
    total += acc;
  }
  total /= static_cast<double>(rows);
  const std::size_t ip = pred.id(), it = target.id();
  return pred.tape().record(Tensor::scalar(total), {pred, target}, [=](Tape& t, std::span<const double> g) {
    const Tensor& P = t.value(ip);
    const Tensor& T = t.value(it);
    auto gp = t.grad_sink(ip);
    auto gt = t.grad_sink(it);
    const double w = 2.0 * g[0] / static_cast<double>(rows);
    for (std::size_t i = 0; i < P.size(); ++i) {
      const double d = (P[i] - T[i]) * w;
      if (!gp.empty()) gp[i] += d;
      if (!gt.empty()) gt[i] -= d;
    }
  });
}

}  // namespace ag
}  // namespace tkc

namespace tkc::ag {

/// Batch-mean softmax cross-entropy of logits [B x C] against class labels.
inline Var softmax_cross_entropy(const Var& logits, std::vector<std::int32_t> labels) {
  const Tensor& lv = logits.value();
  detail::require_matrix(lv, "softmax_cross_entropy");
  const std::size_t rows = lv.rows(), classes = lv.cols();
  if (labels.size() != rows) throw ShapeError("softmax_cross_entropy: one label per row required");
  std::vector<double> probs(rows * classes);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw ShapeError("softmax_cross_entropy: label out of range");
    const double* l = lv.row(r).data();
    double m = l[0];
    for (std::size_t c = 1; c < classes; ++c) m = std::max(m, l[c]);
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += std::exp(l[c] - m);
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] = std::exp(l[c] - m) / s;
    total += std::log(s) + (m - l[y]);
  }
  total /= static_cast<double>(rows);
  const std::size_t il = logits.id();
  return logits.tape().record(
      Tensor::scalar(total), {logits},
      [=, labels = std::move(labels), probs = std::move(probs)](Tape& t, std::span<const double> g) {
        auto gl = t.grad_sink(il);
        const double w = g[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < classes; ++c)
            gl[r * classes + c] += w * (probs[r * classes + c] - (static_cast<std::int32_t>(c) == labels[r] ? 1.0 : 0.0));
      });
}

}  // namespace tkc::ag
