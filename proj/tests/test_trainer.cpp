// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "support/reference_baseline.hpp"
#include "tkc/trainer.hpp"

using namespace tkc;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.data.classes = 4;
  c.data.per_class = 32;
  c.data.dim = 8;
  c.batch_size = 16;
  c.k = 32;
  c.epochs = 5;
  c.warmup_epochs = 1;
  c.encoder_hidden = {32};
  c.embed_dim = 8;
  c.kt_hidden = 16;
  c.alpha = 0.99;
  return c;
}

std::vector<LossBreakdown> record_steps(Trainer& t, std::optional<std::size_t> stop_after = std::nullopt) {
  std::vector<LossBreakdown> out;
  t.run({}, stop_after, [&](std::size_t, const LossBreakdown& l) { out.push_back(l); });
  return out;
}

bool same_breakdowns(const std::vector<LossBreakdown>& a, const std::vector<LossBreakdown>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].total != b[i].total || a[i].current != b[i].current || a[i].temporal != b[i].temporal) return false;
  return true;
}

bool all_finite(const Mlp& m) {
  for (const Tensor* p : m.parameters())
    if (!p->all_finite()) return false;
  return true;
}

}  // namespace

TEST(LrSchedule, WarmupAndCosineEndpoints) {
  const double base = 0.03;
  const std::size_t total = 2560, warm = 128;
  EXPECT_EQ(lr_schedule(0, total, warm, base), base / 10.0);
  EXPECT_EQ(lr_schedule(warm, total, warm, base), base);
  EXPECT_LT(lr_schedule(total - 1, total, warm, base), 1e-6 * base);
  EXPECT_GT(lr_schedule(total - 1, total, warm, base), 0.0);
  EXPECT_THROW(lr_schedule(total, total, warm, base), ValueError);
}

TEST(LrSchedule, MatchesClosedForm) {
  const double base = 0.5;
  const std::size_t total = 100, warm = 10;
  for (std::size_t s = 0; s < total; ++s) {
    double expect;
    if (s < warm)
      expect = 0.05 + 0.45 * static_cast<double>(s) / 10.0;
    else
      expect = 0.25 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(s - 10) / 90.0));
    EXPECT_NEAR(lr_schedule(s, total, warm, base), expect, 1e-15) << s;
  }
  for (std::size_t s = 0; s + 1 < warm; ++s) EXPECT_LT(lr_schedule(s, total, warm, base), lr_schedule(s + 1, total, warm, base));
  for (std::size_t s = warm; s + 1 < total; ++s)
    EXPECT_GT(lr_schedule(s, total, warm, base), lr_schedule(s + 1, total, warm, base));
}

TEST(Trainer, SameSeedIsBitIdentical) {
  const auto cfg = small_config();
  const Dataset ds = load_dataset(cfg);
  Trainer a(cfg, ds), b(cfg, ds);
  EXPECT_TRUE(same_breakdowns(record_steps(a), record_steps(b)));
  EXPECT_EQ(a.save_checkpoint(), b.save_checkpoint());
  EXPECT_EQ(a.metrics_csv_text(), b.metrics_csv_text());
}

TEST(Trainer, DifferentSeedsDiffer) {
  auto cfg = small_config();
  cfg.epochs = 2;
  const Dataset ds = load_dataset(cfg);
  Trainer a(cfg, ds);
  cfg.seed = 2;
  Trainer b(cfg, ds);
  EXPECT_FALSE(same_breakdowns(record_steps(a), record_steps(b)));
}

TEST(Trainer, ZeroLearningRateLeavesOnlyEmaDrift) {
  auto cfg = small_config();
  cfg.lr_base = 0.0;
  cfg.epochs = 4;
  Trainer t(cfg, load_dataset(cfg));
  const Mlp student0 = t.student(), teacher0 = t.teacher();
  const auto kts0 = t.knowledge_transformers();
  t.run();
  EXPECT_TRUE(t.student().same_values(student0));
  EmaState drift{teacher0, cfg.alpha, 0};
  for (std::size_t s = 0; s < t.global_step(); ++s) ema_update(drift, student0);
  EXPECT_TRUE(t.teacher().same_values(drift.teacher));
  for (std::size_t j = 0; j < kts0.size(); ++j)
    EXPECT_TRUE(t.knowledge_transformers()[j].net().same_values(kts0[j].net()));
}

TEST(Trainer, WarmupEpochsMatchTheBaselineExactly) {
  auto cfg = small_config();
  const Dataset ds = load_dataset(cfg);
  Trainer tkc_run(cfg, ds);
  cfg.h = 0;
  Trainer base(cfg, ds);
  const auto a = record_steps(tkc_run, 2);
  const auto b = record_steps(base, 2);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].total, b[i].total) << i;
    EXPECT_TRUE(a[i].temporal.empty());
  }
  EXPECT_TRUE(tkc_run.student().same_values(base.student()));
  const auto c = record_steps(tkc_run, 3);
  ASSERT_FALSE(c.empty());
  EXPECT_EQ(c.front().temporal.size(), 2u);
}

TEST(Trainer, BaselineMatchesIndependentReference) {
  auto cfg = small_config();
  cfg.h = 0;
  const Dataset ds = load_dataset(cfg);
  Trainer t(cfg, ds);
  const auto lib = record_steps(t, 2);
  tkc::testing::ReferenceBaseline ref(cfg, ds);
  const auto oracle = ref.run(2);
  ASSERT_EQ(lib.size(), oracle.size());
  for (std::size_t i = 0; i < lib.size(); ++i) {
    EXPECT_EQ(lib[i].total, oracle[i]) << "step " << i;
    EXPECT_EQ(lib[i].current, oracle[i]);
  }
  EXPECT_TRUE(t.student().same_values(ref.student()));
  EXPECT_TRUE(t.teacher().same_values(ref.teacher()));
}

TEST(Trainer, ZeroEpochsReturnsInitialisedStudent) {
  auto cfg = small_config();
  cfg.epochs = 0;
  cfg.warmup_epochs = 0;
  const Dataset ds = load_dataset(cfg);
  const Trainer t = run_training(cfg, ds);
  EXPECT_TRUE(t.student().same_values(Mlp(cfg.encoder_dims(ds.in_dim), Rng::derive(cfg.seed, stream::student_init))));
  EXPECT_TRUE(t.metrics().empty());
  EXPECT_EQ(t.metrics_csv_text(), metrics_csv({}, cfg.h));
}

TEST(Trainer, OneMetricsRowPerEpoch) {
  const auto cfg = small_config();
  const Trainer t = run_training(cfg, load_dataset(cfg));
  const std::string csv = t.metrics_csv_text();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(cfg.epochs + 1));
  ASSERT_EQ(t.metrics().size(), cfg.epochs);
  EXPECT_TRUE(std::isnan(t.metrics()[0].mean_stability));
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    EXPECT_EQ(t.metrics()[e].epoch, e);
    EXPECT_GE(t.metrics()[e].knn_top1, 0.0);
    EXPECT_LE(t.metrics()[e].knn_top1, 1.0);
  }
  EXPECT_EQ(t.global_step(), cfg.epochs * t.steps_per_epoch());
}

TEST(Trainer, LabelsNeverReachTheLoss) {
  const auto cfg = small_config();
  Dataset ds = load_dataset(cfg);
  Trainer a(cfg, ds);
  std::reverse(ds.labels.begin(), ds.labels.end());
  Trainer b(cfg, ds);
  EXPECT_TRUE(same_breakdowns(record_steps(a), record_steps(b)));
  EXPECT_TRUE(a.student().same_values(b.student()));
}

TEST(Trainer, TeacherFollowsEmaOfStudentExactly) {
  const auto cfg = small_config();
  Trainer t(cfg, load_dataset(cfg));
  EmaState predicted{t.teacher(), cfg.alpha, 0};
  bool ok = true;
  t.run({}, std::nullopt, [&](std::size_t, const LossBreakdown&) {
    ema_update(predicted, t.student());
    ok = ok && predicted.teacher.same_values(t.teacher());
    for (const Tensor* p : t.teacher().parameters()) ok = ok && !p->has_grad();
  });
  EXPECT_TRUE(ok);
  EXPECT_EQ(t.ema().step, t.global_step());
}

TEST(Trainer, BankCellsEqualSnapshotForwardUnderFrozenTeacher) {
  auto cfg = small_config();
  cfg.alpha = 1.0;
  cfg.aug_sigma = 0.0;
  cfg.aug_mask = 0.0;
  cfg.epochs = 4;
  const Dataset ds = load_dataset(cfg);
  Trainer t(cfg, ds);
  TeacherSnapshots snaps(cfg.h);
  for (std::size_t e = 0; e < 3; ++e) {
    snaps.push(t.teacher());
    t.run_epoch();
    const Tensor z = snaps.at(snaps.size() - 1).forward(ds.all_features());
    const std::size_t col = e % cfg.h;
    for (std::size_t i = 0; i < ds.n_samples; ++i) {
      const auto cell = t.bank().cell(i, col);
      ASSERT_TRUE(std::equal(cell.begin(), cell.end(), z.row(i).begin())) << "epoch " << e << " sample " << i;
    }
  }
}

TEST(Trainer, FrozenTeacherStabilityIsExactlyOne) {
  auto cfg = small_config();
  cfg.alpha = 1.0;
  cfg.aug_sigma = 0.0;
  cfg.aug_mask = 0.0;
  const Trainer t = run_training(cfg, load_dataset(cfg));
  ASSERT_EQ(t.stability_history().size(), cfg.epochs - 1);
  for (const auto& row : t.stability_history())
    for (double s : row) EXPECT_EQ(s, 1.0);
  for (std::size_t e = 1; e < cfg.epochs; ++e) EXPECT_EQ(t.metrics()[e].mean_stability, 1.0);
}

TEST(Trainer, StabilityStaysWithinBounds) {
  const auto cfg = small_config();
  const Trainer t = run_training(cfg, load_dataset(cfg));
  for (const auto& row : t.stability_history()) {
    ASSERT_EQ(row.size(), t.dataset().n_samples);
    for (double s : row) {
      EXPECT_GE(s, -1.0);
      EXPECT_LE(s, 1.0);
    }
  }
}

TEST(Trainer, KnowledgeTransformersIdleDuringWarmupThenTrain) {
  const auto cfg = small_config();
  Trainer t(cfg, load_dataset(cfg));
  const auto kts0 = t.knowledge_transformers();
  t.run({}, cfg.h);
  for (std::size_t j = 0; j < cfg.h; ++j) EXPECT_TRUE(t.knowledge_transformers()[j].net().same_values(kts0[j].net()));
  t.run({}, cfg.h + 1);
  for (std::size_t j = 0; j < cfg.h; ++j) EXPECT_FALSE(t.knowledge_transformers()[j].net().same_values(kts0[j].net()));
}

TEST(Trainer, ParametersStayFinite) {
  const auto cfg = small_config();
  const Trainer t = run_training(cfg, load_dataset(cfg));
  EXPECT_TRUE(all_finite(t.student()));
  EXPECT_TRUE(all_finite(t.teacher()));
  for (const auto& kt : t.knowledge_transformers()) EXPECT_TRUE(all_finite(kt.net()));
}

TEST(Trainer, L2VariantTrainsPredictor) {
  auto cfg = small_config();
  cfg.loss = LossVariant::l2;
  Trainer t(cfg, load_dataset(cfg));
  ASSERT_TRUE(t.predictor().has_value());
  const Mlp pred0 = t.predictor()->net();
  const auto steps = record_steps(t);
  for (const auto& l : steps) {
    EXPECT_TRUE(std::isfinite(l.total));
    EXPECT_GE(l.total, 0.0);
  }
  EXPECT_EQ(steps.back().temporal.size(), cfg.h);
  EXPECT_FALSE(t.predictor()->net().same_values(pred0));
  cfg.predictor = false;
  EXPECT_FALSE(Trainer(cfg, load_dataset(cfg)).predictor().has_value());
}

TEST(Trainer, ExplicitTemporalNegativeCount) {
  auto cfg = small_config();
  cfg.k_temporal = 5;
  cfg.epochs = 3;
  const Trainer t = run_training(cfg, load_dataset(cfg));
  EXPECT_TRUE(std::isfinite(t.metrics().back().loss.total));
  cfg.k_temporal = 128;
  EXPECT_THROW(Trainer(cfg, load_dataset(cfg)), ConfigError);
}

TEST(Trainer, HugeLearningRateDiverges) {
  auto cfg = small_config();
  cfg.lr_base = 1e300;
  cfg.weight_decay = 1.0;
  EXPECT_THROW(run_training(cfg, load_dataset(cfg)), NumericDivergence);
}

TEST(Trainer, RejectsEmptyBatchAndFinishedRun) {
  auto cfg = small_config();
  cfg.epochs = 2;
  Trainer t(cfg, load_dataset(cfg));
  EXPECT_THROW(t.train_step({}), ValueError);
  t.run();
  EXPECT_TRUE(t.finished());
  EXPECT_THROW(t.run_epoch(), ValueError);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  auto cfg = small_config();
  cfg.loss = LossVariant::l2;
  const Dataset ds = load_dataset(cfg);
  Trainer t(cfg, ds);
  t.run({}, 3);
  const std::string bytes = t.save_checkpoint();
  const Trainer back = Trainer::from_checkpoint(bytes, ds);
  EXPECT_EQ(back.save_checkpoint(), bytes);
  EXPECT_EQ(back.epoch(), 3u);
}

TEST(Checkpoint, ResumeReproducesUninterruptedRun) {
  for (std::size_t stop : {1u, 2u, 3u}) {
    const auto cfg = small_config();
    const Dataset ds = load_dataset(cfg);
    const Trainer full = run_training(cfg, ds);
    Trainer part(cfg, ds);
    part.run({}, stop);
    Trainer resumed = Trainer::from_checkpoint(part.save_checkpoint(), ds);
    resumed.run();
    EXPECT_EQ(resumed.metrics_csv_text(), full.metrics_csv_text()) << stop;
    EXPECT_EQ(resumed.save_checkpoint(), full.save_checkpoint()) << stop;
  }
}

TEST(Checkpoint, RejectsMismatchedDatasetAndCorruption) {
  const auto cfg = small_config();
  const Dataset ds = load_dataset(cfg);
  Trainer t(cfg, ds);
  t.run({}, 1);
  const std::string bytes = t.save_checkpoint();
  MixtureSpec other = cfg.data;
  other.per_class = 40;
  EXPECT_THROW(Trainer::from_checkpoint(bytes, make_gaussian_mixture(other)), FormatError);
  EXPECT_THROW(Trainer::from_checkpoint(bytes.substr(0, bytes.size() / 2), ds), FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(Trainer::from_checkpoint(bad, ds), FormatError);
}

TEST(Config, TextRoundTripAndOverrides) {
  TrainConfig c = small_config();
  c.loss = LossVariant::l2;
  c.kt_structure = KtStructure::bottleneck;
  c.tau = 0.123456789;
  const TrainConfig back = parse_config(c.to_text());
  EXPECT_EQ(back.to_text(), c.to_text());
  TrainConfig d;
  apply_override(d, "h=0");
  apply_override(d, " encoder_hidden = 64,32 ");
  EXPECT_EQ(d.h, 0u);
  EXPECT_EQ(d.encoder_hidden, (std::vector<std::size_t>{64, 32}));
  EXPECT_EQ(parse_config("# comment\nK = 16  # trailing\n\n").k, 16u);
}

TEST(Config, ErrorsNameTheKey) {
  TrainConfig c;
  auto message = [&](std::string_view assignment) {
    try {
      TrainConfig tmp;
      apply_override(tmp, assignment);
      tmp.validate();
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message("bogus=1").find("bogus"), std::string::npos);
  EXPECT_NE(message("tau=0").find("tau"), std::string::npos);
  EXPECT_NE(message("tau=abc").find("tau"), std::string::npos);
  EXPECT_NE(message("warmup_epochs=40").find("warmup_epochs"), std::string::npos);
  EXPECT_NE(message("loss=mse").find("loss"), std::string::npos);
  EXPECT_NE(message("knn_k=4").find("knn_k"), std::string::npos);
  EXPECT_NE(message("alpha=1.5").find("alpha"), std::string::npos);
  EXPECT_THROW(apply_override(c, "h"), ConfigError);
  EXPECT_THROW(parse_config("just words\n"), ConfigError);
}
