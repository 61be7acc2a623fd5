// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tkc/autodiff.hpp"
#include "tkc/binary_io.hpp"
#include "tkc/checkpoint.hpp"
#include "tkc/config.hpp"
#include "tkc/data.hpp"
#include "tkc/ema.hpp"
#include "tkc/errors.hpp"
#include "tkc/eval.hpp"
#include "tkc/history_bank.hpp"
#include "tkc/losses.hpp"
#include "tkc/networks.hpp"
#include "tkc/optim.hpp"
#include "tkc/rng.hpp"

namespace tkc {

/// Seed streams derived from the run seed.
namespace stream {
inline constexpr std::uint64_t student_init = 0;
inline constexpr std::uint64_t kt_init = 1;
inline constexpr std::uint64_t augment = 2;
inline constexpr std::uint64_t permutation = 3;
inline constexpr std::uint64_t bank = 4;
inline constexpr std::uint64_t queue_prefill = 5;
inline constexpr std::uint64_t eval_split = 6;
inline constexpr std::uint64_t predictor_init = 7;
}  // namespace stream

/// Called once per optimizer step with the global step index and its loss.
using StepObserver = std::function<void(std::size_t step, const LossBreakdown&)>;
/// Called once per finished epoch.
using EpochObserver = std::function<void(const MetricRecord&)>;

class Trainer {
 public:
  Trainer(TrainConfig cfg, Dataset data) : cfg_(std::move(cfg)), data_(std::move(data)) {
    cfg_.validate();
    if (data_.n_samples < 2) throw ValueError("training needs at least two samples");
    if (cfg_.temporal_enabled() && cfg_.temporal_negatives() >= data_.n_samples)
      throw ConfigError("key 'K_temporal': must be below the number of samples");
    const auto dims = cfg_.encoder_dims(data_.in_dim);
    student_ = Mlp(dims, Rng::derive(cfg_.seed, stream::student_init));
    student_.set_trainable(true);
    ema_ = EmaState{student_, cfg_.alpha, 0};
    ema_.teacher.set_trainable(false);
    for (std::size_t j = 0; j < cfg_.h; ++j) {
      kts_.emplace_back(cfg_.kt_structure, cfg_.embed_dim, cfg_.kt_hidden,
                        Rng::derive(Rng::derive(cfg_.seed, stream::kt_init), j));
      kts_.back().net().set_trainable(true);
    }
    if (cfg_.uses_predictor()) {
      predictor_ = Predictor(cfg_.kt_structure, cfg_.embed_dim, cfg_.kt_hidden,
                             Rng::derive(cfg_.seed, stream::predictor_init));
      predictor_->net().set_trainable(true);
    }
    opt_ = SgdMomentum(cfg_.momentum, cfg_.weight_decay);
    bank_ = HistoryBank(data_.n_samples, std::max<std::size_t>(cfg_.h, 1), cfg_.embed_dim,
                        Rng::derive(cfg_.seed, stream::bank));
    augment_rng_ = Rng(Rng::derive(cfg_.seed, stream::augment));
    perm_rng_ = Rng(Rng::derive(cfg_.seed, stream::permutation));
    prefill_queue();
  }

  const TrainConfig& config() const { return cfg_; }
  const Dataset& dataset() const { return data_; }
  const EncoderParams& student() const { return student_; }
  const EncoderParams& teacher() const { return ema_.teacher; }
  const EmaState& ema() const { return ema_; }
  const std::vector<KnowledgeTransformer>& knowledge_transformers() const { return kts_; }
  const std::optional<Predictor>& predictor() const { return predictor_; }
  const HistoryBank& bank() const { return bank_; }
  const NegativeQueue& queue() const { return queue_; }
  const SgdMomentum& optimizer() const { return opt_; }
  const std::vector<MetricRecord>& metrics() const { return metrics_; }
  /// Per-sample stability for each epoch >= 1 (row e-1 holds epoch e).
  const std::vector<std::vector<double>>& stability_history() const { return stability_; }
  std::size_t epoch() const { return bank_.epoch(); }
  std::size_t global_step() const { return global_step_; }
  bool finished() const { return epoch() >= cfg_.epochs; }

  std::size_t steps_per_epoch() const { return (data_.n_samples + cfg_.batch_size - 1) / cfg_.batch_size; }
  std::size_t total_steps() const { return steps_per_epoch() * cfg_.epochs; }
  double current_lr() const {
    return lr_schedule(global_step_, total_steps(), cfg_.warmup_epochs * steps_per_epoch(), cfg_.lr_base);
  }

  /// One optimizer step on the samples `batch` (indices into the dataset).
  LossBreakdown train_step(std::span<const std::uint32_t> batch) {
    const std::size_t b = batch.size();
    if (b == 0) throw ValueError("empty batch");
    const double lr = current_lr();
    const AugmentSpec aug = cfg_.augment_spec();
    const Tensor raw = data_.gather(batch);
    Tensor x0 = augment(raw, aug, augment_rng_);
    Tensor xn = augment(raw, aug, augment_rng_);

    Tape tape;
    Var r0 = student_.forward(tape, tape.constant(std::move(x0)));
    const Tensor rn = ema_.teacher.forward(xn);

    const bool temporal = cfg_.temporal_enabled() && bank_.epoch() >= cfg_.h;
    TemporalLoss loss;
    if (cfg_.loss == LossVariant::infonce) {
      std::vector<TemporalTerm> terms;
      if (temporal) terms = temporal_terms(tape, batch);
      loss = temporal_nce(r0, tape.constant(rn), tape.constant(queue_.view()), queue_.size(), std::move(terms),
                          cfg_.tau);
    } else {
      std::vector<Var> targets;
      if (temporal) {
        const auto z = fetch_targets(batch);
        for (std::size_t j = 0; j < cfg_.h; ++j) targets.push_back(kts_[j].forward(tape, tape.constant(z[j])));
      }
      Var pred = predictor_ ? predictor_->forward(tape, r0) : r0;
      loss = temporal_l2(pred, tape.constant(rn), targets);
    }
    if (!std::isfinite(loss.breakdown.total))
      throw NumericDivergence("loss became non-finite at step " + std::to_string(global_step_));

    auto params = trainable();
    for (Tensor* p : params) p->zero_grad();
    tape.backward(loss.total);
    opt_.step(params, lr);
    ema_update(ema_, student_);
    queue_.push_rows(rn);
    for (std::size_t r = 0; r < b; ++r) {
      if (auto prev = bank_.previous(batch[r])) epoch_stability_[batch[r]] = cosine(rn.row(r), *prev);
      bank_.write(batch[r], rn.row(r));
    }
    ++global_step_;
    return loss.breakdown;
  }

  /// Trains one epoch over a fresh permutation, then evaluates.
  const MetricRecord& run_epoch(const StepObserver& on_step = {}) {
    if (finished()) throw ValueError("training already finished");
    const auto order = random_permutation(data_.n_samples, perm_rng_);
    epoch_stability_.assign(data_.n_samples, std::numeric_limits<double>::quiet_NaN());
    const double lr_at_start = current_lr();
    LossBreakdown mean;
    mean.temporal.assign(cfg_.h, 0.0);
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
      const std::span<const std::uint32_t> batch(order.data() + start, end - start);
      const std::size_t step = global_step_;
      const LossBreakdown l = train_step(batch);
      if (on_step) on_step(step, l);
      mean.total += l.total;
      mean.current += l.current;
      for (std::size_t j = 0; j < l.temporal.size(); ++j) mean.temporal[j] += l.temporal[j];
      ++steps;
    }
    const double inv = 1.0 / static_cast<double>(steps);
    mean.total *= inv;
    mean.current *= inv;
    for (double& t : mean.temporal) t *= inv;

    MetricRecord rec;
    rec.epoch = bank_.epoch();
    rec.loss = mean;
    rec.lr = lr_at_start;
    if (bank_.epoch() > 0) {
      double sum = 0.0;
      std::size_t count = 0;
      for (double s : epoch_stability_)
        if (!std::isnan(s)) {
          sum += s;
          ++count;
        }
      if (count > 0) rec.mean_stability = sum / static_cast<double>(count);
      stability_.push_back(epoch_stability_);
    }
    bank_.advance_epoch();
    rec.knn_top1 = knn_accuracy();
    metrics_.push_back(rec);
    return metrics_.back();
  }

  /// Runs until `epochs` are done or `stop_after` epochs have completed.
  void run(const EpochObserver& on_epoch = {}, std::optional<std::size_t> stop_after = std::nullopt,
           const StepObserver& on_step = {}) {
    while (!finished() && (!stop_after || epoch() < *stop_after)) {
      const MetricRecord& rec = run_epoch(on_step);
      if (on_epoch) on_epoch(rec);
    }
  }

  /// Unaugmented student embeddings of every sample.
  Tensor embed_all() const { return student_.forward(data_.all_features()); }

  /// kNN top-1 on the seeded train/test split of student embeddings.
  double knn_accuracy() const {
    const Tensor emb = embed_all();
    const Split split = train_test_split(data_.n_samples, cfg_.eval_train_fraction,
                                         Rng::derive(cfg_.seed, stream::eval_split));
    auto take = [&](const std::vector<std::uint32_t>& idx, Tensor& rows, std::vector<std::int32_t>& labels) {
      rows = Tensor({idx.size(), emb.cols()});
      for (std::size_t r = 0; r < idx.size(); ++r) {
        std::copy_n(emb.row(idx[r]).begin(), emb.cols(), rows.row(r).begin());
        labels.push_back(data_.labels[idx[r]]);
      }
    };
    Tensor tr, te;
    std::vector<std::int32_t> ltr, lte;
    take(split.train, tr, ltr);
    take(split.test, te, lte);
    return knn_eval(tr, ltr, te, lte, cfg_.knn_k);
  }

  std::string metrics_csv_text() const { return metrics_csv(metrics_, cfg_.h); }

  /// Full resumable state as a TKCK container.
  std::string save_checkpoint() const {
    std::vector<Section> s;
    s.push_back({"config", cfg_.to_text()});
    {
      ByteWriter w;
      w.u64(global_step_);
      w.u64(ema_.step);
      w.u64(data_.n_samples);
      w.u64(data_.in_dim);
      s.push_back({"progress", w.take()});
    }
    s.push_back({"student", encode_mlp(student_)});
    s.push_back({"teacher", encode_mlp(ema_.teacher)});
    for (std::size_t j = 0; j < kts_.size(); ++j) s.push_back({"kt/" + std::to_string(j), encode_mlp(kts_[j].net())});
    if (predictor_) s.push_back({"predictor", encode_mlp(predictor_->net())});
    s.push_back({"optimizer", serialize([&](ByteWriter& w) { opt_.save(w); })});
    s.push_back({"bank", serialize([&](ByteWriter& w) { bank_.save(w); })});
    s.push_back({"queue", serialize([&](ByteWriter& w) { queue_.save(w); })});
    s.push_back({"rng/augment", augment_rng_.state()});
    s.push_back({"rng/permutation", perm_rng_.state()});
    s.push_back({"metrics", serialize([&](ByteWriter& w) { save_metrics(w, metrics_); })});
    s.push_back({"stability", serialize([&](ByteWriter& w) {
                   w.u64(stability_.size());
                   for (const auto& row : stability_) w.f64s(row);
                 })});
    return encode_tkck(s);
  }

  /// Restores a trainer saved at an epoch boundary. The dataset must be the
  /// one the checkpoint was trained on.
  static Trainer from_checkpoint(std::string_view bytes, Dataset data) {
    const auto sec = decode_tkck(bytes);
    TrainConfig cfg = parse_config(require_section(sec, "config"));
    Trainer t(cfg, std::move(data));
    {
      ByteReader r(require_section(sec, "progress"));
      t.global_step_ = r.u64();
      t.ema_.step = r.u64();
      const auto n = r.u64();
      const auto dim = r.u64();
      if (n != t.data_.n_samples || dim != t.data_.in_dim)
        throw FormatError("checkpoint was trained on a " + std::to_string(n) + "x" + std::to_string(dim) +
                          " dataset");
      expect_done(r, "progress");
    }
    auto restore_net = [&](const std::string& name, Mlp& into, bool trainable) {
      Mlp m = decode_mlp(require_section(sec, name));
      if (!m.same_architecture(into)) throw FormatError("section '" + name + "' has the wrong architecture");
      into = std::move(m);
      into.set_trainable(trainable);
    };
    restore_net("student", t.student_, true);
    restore_net("teacher", t.ema_.teacher, false);
    for (std::size_t j = 0; j < t.kts_.size(); ++j) restore_net("kt/" + std::to_string(j), t.kts_[j].net(), true);
    if (t.predictor_) restore_net("predictor", t.predictor_->net(), true);
    {
      ByteReader r(require_section(sec, "optimizer"));
      t.opt_ = SgdMomentum::load(r);
      expect_done(r, "optimizer");
    }
    {
      ByteReader r(require_section(sec, "bank"));
      t.bank_ = HistoryBank::load(r);
      expect_done(r, "bank");
      if (t.bank_.samples() != t.data_.n_samples || t.bank_.dim() != cfg.embed_dim)
        throw FormatError("bank section does not match the run");
    }
    {
      ByteReader r(require_section(sec, "queue"));
      t.queue_ = NegativeQueue::load(r);
      expect_done(r, "queue");
    }
    t.augment_rng_.set_state(require_section(sec, "rng/augment"));
    t.perm_rng_.set_state(require_section(sec, "rng/permutation"));
    {
      ByteReader r(require_section(sec, "metrics"));
      t.metrics_ = load_metrics(r);
      expect_done(r, "metrics");
    }
    {
      ByteReader r(require_section(sec, "stability"));
      const auto n = r.u64();
      if (n > r.remaining()) throw TruncatedPayload("stability section truncated");
      t.stability_.clear();
      for (std::uint64_t e = 0; e < n; ++e) t.stability_.push_back(r.f64s());
      expect_done(r, "stability");
    }
    if (t.metrics_.size() != t.bank_.epoch()) throw FormatError("checkpoint metrics and bank disagree on the epoch");
    return t;
  }

 private:
  template <typename F>
  static std::string serialize(F&& f) {
    ByteWriter w;
    f(w);
    return w.take();
  }

  static void expect_done(const ByteReader& r, const std::string& name) {
    if (!r.done()) throw FormatError("trailing bytes in section '" + name + "'");
  }

  std::vector<Tensor*> trainable() {
    std::vector<Tensor*> out = student_.parameters();
    for (auto& kt : kts_)
      for (Tensor* p : kt.net().parameters()) out.push_back(p);
    if (predictor_)
      for (Tensor* p : predictor_->net().parameters()) out.push_back(p);
    return out;
  }

  /// Queue starts full with initial-teacher embeddings of augmented samples.
  void prefill_queue() {
    queue_ = NegativeQueue(cfg_.k, cfg_.embed_dim);
    Rng rng(Rng::derive(cfg_.seed, stream::queue_prefill));
    std::vector<std::uint32_t> idx(cfg_.k);
    for (auto& i : idx) i = static_cast<std::uint32_t>(rng.below(data_.n_samples));
    const Tensor x = augment(data_.gather(idx), cfg_.augment_spec(), rng);
    queue_.push_rows(ema_.teacher.forward(x));
  }

  /// z_j for the batch, one [B x d] tensor per temporal index, oldest first.
  std::vector<Tensor> fetch_targets(std::span<const std::uint32_t> batch) const {
    std::vector<Tensor> z(cfg_.h, Tensor({batch.size(), cfg_.embed_dim}));
    for (std::size_t r = 0; r < batch.size(); ++r) {
      const Tensor row = bank_.fetch_row(batch[r]);
      for (std::size_t j = 0; j < cfg_.h; ++j) std::copy_n(row.row(j).begin(), cfg_.embed_dim, z[j].row(r).begin());
    }
    return z;
  }

  /// Positives K_j(z_j) and per-sample negatives K_j(bank column j) for every
  /// temporal teacher. Each distinct negative row is transformed once.
  std::vector<TemporalTerm> temporal_terms(Tape& tape, std::span<const std::uint32_t> batch) {
    const auto z = fetch_targets(batch);
    const std::size_t kneg = cfg_.temporal_negatives();
    std::vector<TemporalTerm> terms;
    for (std::size_t j = 0; j < cfg_.h; ++j) {
      TemporalTerm term;
      term.k = kneg;
      term.positives = kts_[j].forward(tape, tape.constant(z[j]));
      std::vector<std::uint32_t> pool;
      std::vector<std::int64_t> slot(data_.n_samples, -1);
      term.neg_index.reserve(batch.size() * kneg);
      for (std::size_t r = 0; r < batch.size(); ++r) {
        for (auto i : bank_.sample_negative_indices(j, batch[r], kneg)) {
          if (slot[i] < 0) {
            slot[i] = static_cast<std::int64_t>(pool.size());
            pool.push_back(i);
          }
          term.neg_index.push_back(static_cast<std::uint32_t>(slot[i]));
        }
      }
      if (pool.empty()) pool.push_back(batch[0]);
      const std::size_t c = bank_.physical_column(j);
      Tensor feats({pool.size(), cfg_.embed_dim});
      for (std::size_t p = 0; p < pool.size(); ++p)
        std::copy_n(bank_.cell(pool[p], c).begin(), cfg_.embed_dim, feats.row(p).begin());
      term.negatives = kts_[j].forward(tape, tape.constant(std::move(feats)));
      terms.push_back(std::move(term));
    }
    return terms;
  }

  TrainConfig cfg_;
  Dataset data_;
  EncoderParams student_;
  EmaState ema_;
  std::vector<KnowledgeTransformer> kts_;
  std::optional<Predictor> predictor_;
  SgdMomentum opt_;
  HistoryBank bank_;
  NegativeQueue queue_;
  Rng augment_rng_;
  Rng perm_rng_;
  std::size_t global_step_ = 0;
  std::vector<MetricRecord> metrics_;
  std::vector<std::vector<double>> stability_;
  std::vector<double> epoch_stability_;
};

/// Trains from scratch and returns the trainer holding the student and all
/// run artifacts.
inline Trainer run_training(const TrainConfig& cfg, Dataset data, const EpochObserver& on_epoch = {},
                            std::optional<std::size_t> stop_after = std::nullopt) {
  Trainer t(cfg, std::move(data));
  t.run(on_epoch, stop_after);
  return t;
}

}  // namespace tkc
