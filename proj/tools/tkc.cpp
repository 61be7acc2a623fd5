// SPDX-License-Identifier: Apache-2.0
// Command-line driver: train, sweep-h, eval, stability-report, gen-data.

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tkc/checkpoint.hpp"
#include "tkc/config.hpp"
#include "tkc/data.hpp"
#include "tkc/errors.hpp"
#include "tkc/eval.hpp"
#include "tkc/trainer.hpp"

namespace fs = std::filesystem;

namespace {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kIo = 3, kDivergence = 4 };

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> overrides;

  tkc::TrainConfig resolve() const {
    tkc::TrainConfig cfg = config_path.empty() ? tkc::TrainConfig{} : tkc::load_config(config_path);
    for (const auto& o : overrides) tkc::apply_override(cfg, o);
    cfg.validate();
    return cfg;
  }
};

void add_config_options(CLI::App& cmd, ConfigArgs& args) {
  cmd.add_option("--config", args.config_path, "key=value config file");
  cmd.add_option("--set", args.overrides, "override one key, e.g. --set h=0")->take_all();
}

void write_text(const fs::path& path, const std::string& text) { tkc::write_file_atomic(path, text); }

void write_run_artifacts(const tkc::Trainer& t, const fs::path& dir, bool dump_stability) {
  fs::create_directories(dir);
  write_text(dir / "resolved.cfg", t.config().to_text());
  write_text(dir / "checkpoint.tkck", t.save_checkpoint());
  write_text(dir / "metrics.csv", t.metrics_csv_text());
  if (dump_stability) write_text(dir / "stability.csv", tkc::stability_csv(t.stability_history()));
}

void print_epoch(const tkc::MetricRecord& m) {
  std::printf("epoch %3zu  loss %.4f  knn %.4f  stability %s  lr %.5f\n", m.epoch, m.loss.total, m.knn_top1,
              tkc::format_double(m.mean_stability).c_str(), m.lr);
  std::fflush(stdout);
}

tkc::Dataset dataset_for(const tkc::TrainConfig& cfg, const std::string& data_override) {
  return data_override.empty() ? tkc::load_dataset(cfg) : tkc::load_raw_dataset(data_override);
}

tkc::Trainer trainer_from_checkpoint(const std::string& path, const std::string& data_override) {
  const std::string bytes = tkc::read_file(path);
  const auto sections = tkc::decode_tkck(bytes);
  const tkc::TrainConfig cfg = tkc::parse_config(tkc::require_section(sections, "config"));
  return tkc::Trainer::from_checkpoint(bytes, dataset_for(cfg, data_override));
}

struct TrainArgs {
  ConfigArgs config;
  std::string out = "run";
  std::optional<std::size_t> stop_after;
  std::string resume;
  bool dump_stability = false;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  std::optional<tkc::Trainer> t;
  if (a.resume.empty()) {
    const auto cfg = a.config.resolve();
    t.emplace(cfg, tkc::load_dataset(cfg));
  } else {
    t.emplace(trainer_from_checkpoint(a.resume, {}));
  }
  t->run(a.quiet ? tkc::EpochObserver{} : tkc::EpochObserver(print_epoch), a.stop_after);
  write_run_artifacts(*t, a.out, a.dump_stability);
  return kOk;
}

struct SweepArgs {
  ConfigArgs config;
  std::vector<std::size_t> h_values{0, 1, 2, 3};
  std::string out = "sweep";
  std::size_t window = 5;
};

int cmd_sweep(const SweepArgs& a) {
  const auto base = a.config.resolve();
  const tkc::Dataset data = tkc::load_dataset(base);
  std::string table = "h,knn_top1,mean_stability_last" + std::to_string(a.window) + ",loss_total\n";
  std::printf("%4s %10s %16s %12s\n", "h", "knn_top1", "stability", "loss");
  for (auto h : a.h_values) {
    tkc::TrainConfig cfg = base;
    cfg.h = h;
    cfg.validate();
    tkc::Trainer t(cfg, data);
    t.run();
    write_run_artifacts(t, fs::path(a.out) / ("h" + std::to_string(h)), false);
    const auto& last = t.metrics().empty() ? tkc::MetricRecord{} : t.metrics().back();
    const double stab = tkc::trailing_mean_stability(t.metrics(), a.window);
    table += std::to_string(h) + "," + tkc::format_double(last.knn_top1) + "," + tkc::format_double(stab) + "," +
             tkc::format_double(last.loss.total) + "\n";
    std::printf("%4zu %10.4f %16.6f %12.4f\n", h, last.knn_top1, stab, last.loss.total);
    std::fflush(stdout);
  }
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "sweep.csv", table);
  return kOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::size_t probe_epochs = 100;
};

int cmd_eval(const EvalArgs& a) {
  const tkc::Trainer t = trainer_from_checkpoint(a.checkpoint, a.data);
  const tkc::Tensor emb = t.embed_all();
  tkc::ProbeConfig probe;
  probe.epochs = a.probe_epochs;
  probe.train_fraction = t.config().eval_train_fraction;
  probe.seed = tkc::Rng::derive(t.config().seed, tkc::stream::eval_split);
  const auto res = tkc::linear_probe(emb, t.dataset().labels, probe);
  std::printf("epochs_trained=%zu\nknn_top1=%s\nlinear_top1=%s\n", t.epoch(),
              tkc::format_double(t.knn_accuracy()).c_str(), tkc::format_double(res.test_top1).c_str());
  return kOk;
}

struct StabilityArgs {
  std::string checkpoint;
  std::string data;
  std::string out = "stability.csv";
};

int cmd_stability(const StabilityArgs& a) {
  const tkc::Trainer t = trainer_from_checkpoint(a.checkpoint, a.data);
  write_text(a.out, tkc::stability_csv(t.stability_history()));
  std::printf("wrote %zu epochs x %zu samples to %s\n", t.stability_history().size(), t.dataset().n_samples,
              a.out.c_str());
  return kOk;
}

struct GenArgs {
  tkc::MixtureSpec spec;
  std::string out = "data.tkds";
};

int cmd_gen(const GenArgs& a) {
  const tkc::Dataset ds = tkc::make_gaussian_mixture(a.spec);
  tkc::save_raw_dataset(ds, a.out);
  std::printf("wrote %zu samples x %zu features to %s\n", ds.n_samples, ds.in_dim, a.out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Temporal knowledge consistency trainer"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "train one run and write its artifacts");
  add_config_options(*c_train, train.config);
  c_train->add_option("--out", train.out, "artifact directory")->capture_default_str();
  c_train->add_option("--stop-after", train.stop_after, "stop once this many epochs are complete");
  c_train->add_option("--resume", train.resume, "continue from a checkpoint (uses its config)");
  c_train->add_flag("--dump-stability", train.dump_stability, "also write per-sample stability.csv");
  c_train->add_flag("--quiet", train.quiet, "no per-epoch progress lines");

  SweepArgs sweep;
  auto* c_sweep = app.add_subcommand("sweep-h", "one run per temporal-teacher count");
  c_sweep->set_help_flag("--help", "Print this help message and exit");
  add_config_options(*c_sweep, sweep.config);
  c_sweep->add_option("--h", sweep.h_values, "comma-separated h values")->delimiter(',')->capture_default_str();
  c_sweep->add_option("--out", sweep.out, "sweep directory")->capture_default_str();
  c_sweep->add_option("--window", sweep.window, "final epochs averaged for stability")->capture_default_str();

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "kNN and linear-probe accuracy of a checkpoint's student");
  c_eval->add_option("--checkpoint", eval.checkpoint)->required();
  c_eval->add_option("--data", eval.data, "TKDS file (default: the checkpoint's dataset)");
  c_eval->add_option("--probe-epochs", eval.probe_epochs)->capture_default_str();

  StabilityArgs stab;
  auto* c_stab = app.add_subcommand("stability-report", "per-sample, per-epoch stability as CSV");
  c_stab->add_option("--checkpoint", stab.checkpoint)->required();
  c_stab->add_option("--data", stab.data, "TKDS file (default: the checkpoint's dataset)");
  c_stab->add_option("--out", stab.out)->capture_default_str();

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "write a Gaussian-mixture dataset as TKDS");
  c_gen->add_option("--classes", gen.spec.classes)->capture_default_str();
  c_gen->add_option("--per-class", gen.spec.per_class)->capture_default_str();
  c_gen->add_option("--dim", gen.spec.dim)->capture_default_str();
  c_gen->add_option("--spread", gen.spec.spread)->capture_default_str();
  c_gen->add_option("--seed", gen.spec.seed)->capture_default_str();
  c_gen->add_option("--out", gen.out)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*c_train) return cmd_train(train);
    if (*c_sweep) return cmd_sweep(sweep);
    if (*c_eval) return cmd_eval(eval);
    if (*c_stab) return cmd_stability(stab);
    if (*c_gen) return cmd_gen(gen);
  } catch (const tkc::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const tkc::NumericDivergence& e) {
    std::fprintf(stderr, "numeric divergence: %s\n", e.what());
    return kDivergence;
  } catch (const tkc::IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kIo;
  } catch (const tkc::FormatError& e) {
    std::fprintf(stderr, "bad file: %s\n", e.what());
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kFailure;
}
