// dsta: generate synthetic data, train, evaluate, benchmark and gradient-check
// the space-time video transformer.
//
// Option precedence: command line > --config file > built-in defaults. The
// config file is TOML/INI as understood by CLI11; subcommand options live in
// a [generate], [train], ... section. Every command prints its resolved
// configuration first and writes it to <out>/<timestamp>-seed<seed>/config.toml.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numeric error.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "dsta/checkpoint.hpp"
#include "dsta/errors.hpp"
#include "dsta/gradcheck.hpp"
#include "dsta/inference.hpp"
#include "dsta/ops.hpp"
#include "dsta/training.hpp"

namespace fs = std::filesystem;
using namespace dsta;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Options {
  std::uint64_t seed = 0;
  std::string scheme = "divided";
  std::size_t epochs = 15;
  std::size_t threads = 1;
  bool deterministic_crops = false;
  std::string out = "runs";

  ModelConfig model;
  bool no_temporal_emb = false;

  // generate
  SyntheticSpec synth;
  std::size_t count = 1200;
  std::string task = "state-change";
  bool print_format = false;

  // train / eval
  std::string data;
  std::string checkpoint;
  std::string split = "val";
  TrainConfig train;

  // bench
  std::size_t repeats = 3;

  // gradcheck
  double step = 1e-5;
  double tolerance = 1e-4;
  bool corrupt_backward = false;
  bool only_scheme = false;
};

ModelConfig resolved_model(const Options& o) {
  ModelConfig cfg = o.model;
  cfg.scheme = parse_scheme(o.scheme);
  cfg.temporal_pos_emb = !o.no_temporal_emb;
  cfg.validate();
  return cfg;
}

fs::path make_run_dir(const Options& o) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream name;
  name << std::put_time(&tm, "%Y%m%d-%H%M%S") << "-seed" << o.seed;
  fs::path dir = fs::path(o.out) / name.str();
  for (int n = 1; fs::exists(dir); ++n) dir = fs::path(o.out) / (name.str() + "-" + std::to_string(n));
  fs::create_directories(dir);
  return dir;
}

fs::path begin_run(const CLI::App& app, const Options& o) {
  const auto resolved = app.config_to_str(true, false);
  std::cout << "# resolved configuration\n" << resolved << std::flush;
  const auto dir = make_run_dir(o);
  std::ofstream(dir / "config.toml") << resolved;
  std::cout << "# run directory " << dir.string() << '\n';
  return dir;
}

int cmd_generate(const CLI::App& app, Options& o) {
  if (o.print_format) {
    std::cout << dataset_format_description();
    return kOk;
  }
  if (o.count == 0) throw ConfigError("--count must be at least 1");
  SyntheticSpec spec = o.synth;
  spec.seed = o.seed;
  if (o.task == "state-change") {
    spec.task = SyntheticTask::StateChange;
  } else if (o.task == "shuffle-control") {
    spec.task = SyntheticTask::FrameShuffleControl;
  } else {
    throw ConfigError("unknown task '" + o.task + "'");
  }
  spec.validate();
  const auto dir = begin_run(app, o);
  const auto ds = generate(spec, o.count);
  const auto path = dir / "dataset.bin";
  save_dataset(ds, path);
  std::cout << "items=" << ds.items.size() << " train=" << ds.count(Split::Train) << " val=" << ds.count(Split::Val)
            << " test=" << ds.count(Split::Test) << "\n"
            << "dataset=" << path.string() << '\n';
  return kOk;
}

int cmd_train(const CLI::App& app, Options& o) {
  const auto cfg = resolved_model(o);
  TrainConfig tc = o.train;
  tc.seed = o.seed;
  tc.threads = o.threads;
  tc.val_crops = o.deterministic_crops ? CropMode::Deterministic : CropMode::Random;
  tc = tc.truncated(o.epochs);
  tc.validate();
  const auto dir = begin_run(app, o);
  const auto ds = load_dataset(o.data);

  auto model = Model::initialize(cfg, o.seed);
  std::ofstream log_file(dir / "metrics.log", std::ios::app);
  struct Tee : std::streambuf {
    std::streambuf* a;
    std::streambuf* b;
    int overflow(int c) override {
      if (c == EOF) return !EOF;
      return a->sputc(static_cast<char>(c)) == EOF || b->sputc(static_cast<char>(c)) == EOF ? EOF : c;
    }
    int sync() override { return a->pubsync() | b->pubsync(); }
  } tee;
  tee.a = std::cout.rdbuf();
  tee.b = log_file.rdbuf();
  std::ostream log(&tee);

  const auto result = train(model, ds, tc, &log);
  save_checkpoint(result.best, dir / "best.ckpt");
  save_checkpoint(Checkpoint::of(model), dir / "final.ckpt");
  std::cout << "checkpoint=" << (dir / "best.ckpt").string() << '\n';
  return kOk;
}

int cmd_eval(const CLI::App& app, Options& o) {
  const auto dir = begin_run(app, o);
  const auto ckpt = load_checkpoint(o.checkpoint);
  const auto model = ckpt.to_model();
  const auto ds = load_dataset(o.data);
  EvalOptions eo;
  eo.seed = o.seed;
  eo.threads = o.threads;
  eo.crops = o.deterministic_crops ? CropMode::Deterministic : CropMode::Random;
  const auto report = evaluate(ds, parse_split(o.split), model, eo);
  std::ofstream file(dir / "report.txt");
  write_report(report, file);
  write_report(report, std::cout);
  return kOk;
}

int cmd_bench(const CLI::App& app, Options& o) {
  auto base = resolved_model(o);
  const auto dir = begin_run(app, o);
  std::ostringstream table;
  table << "scheme   attn_macs_analytic  attn_macs_counted  match  forward_ms\n";
  for (auto scheme : {AttentionScheme::SpaceOnly, AttentionScheme::JointSpaceTime, AttentionScheme::DividedSpaceTime}) {
    auto cfg = base;
    cfg.scheme = scheme;
    const auto model = Model::initialize(cfg, o.seed);
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> px(cfg.height * cfg.width * cfg.channels * cfg.frames);
    for (auto& v : px) v = unit(rng);
    const auto pixels = Tensor::from({cfg.height, cfg.width, cfg.channels, cfg.frames}, std::move(px));

    MacCounter counter;
    ForwardOptions fo;
    fo.counter = &counter;
    {
      Tape tape(false);
      forward(tape, model, pixels, fo);
    }
    const auto analytic = attention_flops(cfg, scheme) * cfg.depth;
    double best_ms = 0.0;
    for (std::size_t r = 0; r < std::max<std::size_t>(1, o.repeats); ++r) {
      Tape tape(false);
      const auto t0 = std::chrono::steady_clock::now();
      forward(tape, model, pixels);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      best_ms = r == 0 ? ms : std::min(best_ms, ms);
    }
    table << std::left << std::setw(9) << scheme_name(scheme) << std::right << std::setw(18) << analytic
          << std::setw(19) << counter.total() << std::setw(7) << (analytic == counter.total() ? "yes" : "no")
          << std::setw(12) << std::fixed << std::setprecision(3) << best_ms << '\n';
  }
  std::ofstream(dir / "bench.txt") << table.str();
  std::cout << table.str();
  return kOk;
}

ModelConfig gradcheck_config(AttentionScheme scheme) {
  ModelConfig cfg;
  cfg.height = 8;
  cfg.width = 8;
  cfg.patch = 4;
  cfg.frames = 2;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.depth = 2;
  cfg.mlp_dim = 16;
  cfg.num_classes = 3;
  cfg.scheme = scheme;
  return cfg;
}

int cmd_gradcheck(const CLI::App& app, Options& o) {
  const auto dir = begin_run(app, o);
  testing::set_corrupt_backward(o.corrupt_backward);
  std::ostringstream report;
  report << std::scientific << std::setprecision(3);
  double worst = 0.0;
  std::vector<AttentionScheme> schemes = {AttentionScheme::SpaceOnly, AttentionScheme::JointSpaceTime,
                                          AttentionScheme::DividedSpaceTime};
  if (o.only_scheme) schemes = {parse_scheme(o.scheme)};
  for (auto scheme : schemes) {
    const auto cfg = gradcheck_config(scheme);
    const auto model = Model::initialize(cfg, o.seed);
    std::mt19937_64 rng(o.seed + 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> px(cfg.height * cfg.width * cfg.channels * cfg.frames);
    for (auto& v : px) v = unit(rng);
    const auto pixels = Tensor::from({cfg.height, cfg.width, cfg.channels, cfg.frames}, std::move(px));
    const int label = 1;
    auto loss = [&](Tape& tape) {
      return cross_entropy(tape, forward(tape, model, pixels), std::span<const int>(&label, 1));
    };
    const auto result = gradcheck_parameters(loss, model.parameters(), o.step);
    report << "scheme " << scheme_name(scheme) << " max_rel_err " << result.max_error() << '\n';
    for (const auto& p : result.parameters) {
      report << "  " << std::left << std::setw(28) << p.name << std::right << " n=" << std::setw(4) << p.count
             << " worst=" << p.max_error << " at " << p.worst_index << " (analytic " << p.analytic << ", numeric "
             << p.numeric << ")\n";
    }
    worst = std::max(worst, result.max_error());
  }
  testing::set_corrupt_backward(false);
  const bool ok = worst <= o.tolerance;
  report << "max_rel_err " << worst << " tolerance " << o.tolerance << (ok ? " PASS" : " FAIL") << '\n';
  std::ofstream(dir / "gradcheck.txt") << report.str();
  std::cout << report.str();
  return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Space-time attention video transformer: data, training, evaluation and verification"};
  app.set_config("--config", "", "TOML/INI config file; command-line flags take precedence");
  app.require_subcommand(1);
  Options o;

  app.add_option("--seed", o.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--scheme", o.scheme, "Attention scheme")
      ->check(CLI::IsMember({"space", "joint", "divided"}))
      ->capture_default_str();
  app.add_option("--epochs", o.epochs, "Training epochs (later decay points are dropped)")->capture_default_str();
  app.add_option("--threads", o.threads, "Worker thread cap")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_flag("--deterministic-crops", o.deterministic_crops, "Use fixed left/centre/right inference crops");
  app.add_option("--out", o.out, "Parent directory of per-run output directories")->capture_default_str();

  auto model_opts = [&](CLI::App* sub) {
    sub->add_option("--height", o.model.height)->capture_default_str();
    sub->add_option("--width", o.model.width)->capture_default_str();
    sub->add_option("--frames", o.model.frames)->capture_default_str();
    sub->add_option("--patch", o.model.patch)->capture_default_str();
    sub->add_option("--dim", o.model.dim)->capture_default_str();
    sub->add_option("--heads", o.model.heads)->capture_default_str();
    sub->add_option("--depth", o.model.depth)->capture_default_str();
    sub->add_option("--mlp-dim", o.model.mlp_dim)->capture_default_str();
    sub->add_option("--classes", o.model.num_classes)->capture_default_str();
    sub->add_flag("--no-temporal-emb", o.no_temporal_emb, "Drop the learned per-frame embedding");
  };

  auto* gen = app.add_subcommand("generate", "Write a synthetic state-change dataset");
  gen->add_option("--count", o.count, "Number of videos")->capture_default_str();
  gen->add_option("--task", o.task, "state-change or shuffle-control")->capture_default_str();
  gen->add_option("--val-fraction", o.synth.val_fraction)->capture_default_str();
  gen->add_option("--test-fraction", o.synth.test_fraction)->capture_default_str();
  gen->add_option("--video-height", o.synth.height)->capture_default_str();
  gen->add_option("--video-width", o.synth.width)->capture_default_str();
  gen->add_option("--video-frames", o.synth.frames)->capture_default_str();
  gen->add_option("--render-height", o.synth.render_height)->capture_default_str();
  gen->add_option("--render-width", o.synth.render_width)->capture_default_str();
  gen->add_option("--noise", o.synth.noise)->capture_default_str();
  gen->add_flag("--format", o.print_format, "Print the dataset file layout and exit");

  auto* tr = app.add_subcommand("train", "Train a model on a dataset file");
  tr->add_option("--data", o.data, "Dataset file")->required();
  tr->add_option("--lr", o.train.base_lr, "Initial learning rate")->capture_default_str();
  tr->add_option("--batch-size", o.train.batch_size)->capture_default_str();
  tr->add_option("--momentum", o.train.momentum)->capture_default_str();
  tr->add_option("--weight-decay", o.train.weight_decay)->capture_default_str();
  model_opts(tr);

  auto* ev = app.add_subcommand("eval", "Nine-clip ensemble evaluation of a checkpoint");
  ev->add_option("--data", o.data, "Dataset file")->required();
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  ev->add_option("--split", o.split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();

  auto* bench = app.add_subcommand("bench", "Attention cost and forward wall time per scheme");
  bench->add_option("--repeats", o.repeats)->capture_default_str();
  model_opts(bench);

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every parameter gradient");
  gc->add_option("--step", o.step)->capture_default_str();
  gc->add_option("--tolerance", o.tolerance)->capture_default_str();
  gc->add_flag("--only-scheme", o.only_scheme, "Check only --scheme instead of all three");
  gc->add_flag("--corrupt-backward", o.corrupt_backward, "Test hook: perturb the GELU backward rule")
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (gen->parsed()) return cmd_generate(app, o);
    if (tr->parsed()) return cmd_train(app, o);
    if (ev->parsed()) return cmd_eval(app, o);
    if (bench->parsed()) return cmd_bench(app, o);
    if (gc->parsed()) return cmd_gradcheck(app, o);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
