// tdcss command-line interface: gen-data, train, eval, sweep, export-embeddings.
//
// Exit codes: 0 success, 2 config/format error, 3 runtime/numeric error.
// Logs go to stderr; machine-readable results to files or stdout.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tdcss/checkpoint.hpp"
#include "tdcss/config.hpp"
#include "tdcss/data.hpp"
#include "tdcss/eval.hpp"
#include "tdcss/trainer.hpp"

namespace fs = std::filesystem;
using namespace tdcss;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitRuntime = 3;

bool g_quiet = false;

template <class... Args>
void log(const char* fmt, Args... args) {
  if (g_quiet) return;
  std::fprintf(stderr, fmt, args...);
  std::fputc('\n', stderr);
}

/// Options shared by every subcommand that builds a RunConfig.
struct ConfigOptions {
  std::string config_path;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config_path, "key = value config file");
    app->add_option("--set", sets, "override one key, as key=value (repeatable)");
  }

  /// Defaults, then the config file, then TDCSS_* variables, then --set.
  RunConfig build(RunConfig base = {}) const {
    RunConfig c = config_path.empty() ? std::move(base) : load_config_file(config_path, std::move(base));
    apply_env_overrides(c);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      set_config_value(c, detail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
    }
    return c;
  }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw UsageError("cannot write '" + path + "'");
  f << text;
  if (!f) throw UsageError("short write to '" + path + "'");
}

std::string config_header(const RunConfig& c) { return "config_hash = " + c.hash() + "\n" + c.echo(); }

/// Echo stored in checkpoints. The output directory is left out so a resumed
/// run written elsewhere stays byte-identical to an uninterrupted one.
std::string checkpoint_echo(RunConfig c) {
  c.out_dir = RunConfig{}.out_dir;
  return c.echo();
}

/// The run configuration stored in a checkpoint.
RunConfig config_from_checkpoint(const Checkpoint& ck) {
  const RunConfig c = parse_config_string(ck.config_echo);
  if (!ck.config_hash.empty() && c.hash() != ck.config_hash)
    throw FormatError("checkpoint: config echo does not match its hash " + ck.config_hash);
  return c;
}

nlohmann::json metrics_record(const Metrics& m, std::size_t epoch, const std::string& split, const RunConfig& c) {
  nlohmann::json j = metrics_json(m);
  j["epoch"] = epoch;
  j["split"] = split;
  j["seed"] = c.train.seed;
  j["config_hash"] = c.hash();
  return j;
}

std::string metrics_table(const Metrics& m, const DatasetBundle& b) {
  std::ostringstream out;
  out << "class  split   acc    rows\n";
  for (const auto& [c, acc] : m.per_class_acc) {
    char line[96];
    std::snprintf(line, sizeof line, "%5d  %-6s  %5s  %5zu\n", c, b.is_unseen(c) ? "unseen" : "seen",
                  percent(acc).c_str(), m.n_evaluated.count(c) ? m.n_evaluated.at(c) : std::size_t{0});
    out << line;
  }
  out << "u = " << percent(m.u) << "  s = " << percent(m.s) << "  H = " << percent(m.H) << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataCmd {
  ConfigOptions cfg;
  std::string out;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* app) {
    cfg.attach(app);
    app->add_option("-o,--out", out, "bundle path (default: bundle_path from the config)");
    app->add_option("--seed", seed, "generator seed (overrides data_seed)");
  }

  int run() const {
    RunConfig c = cfg.build();
    if (seed) c.synth.seed = *seed;
    const std::string path = out.empty() ? c.bundle_path : out;
    c.bundle_path = path;
    save_bundle(generate_synthetic(c.synth), path);
    write_text(path + ".config", config_header(c));
    log("wrote %s (config %s)", path.c_str(), c.hash().c_str());
    return kExitOk;
  }
};

// ---------------------------------------------------------------------------
// train

struct TrainCmd {
  ConfigOptions cfg;
  std::string bundle;
  std::string out_dir;
  std::string ablate;
  std::optional<std::size_t> shots;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
  std::string resume;
  bool paper_scale = false;

  void attach(CLI::App* app) {
    cfg.attach(app);
    app->add_option("-b,--bundle", bundle, "dataset bundle (default: bundle_path from the config)");
    app->add_option("-o,--out", out_dir, "output directory (default: out_dir from the config)");
    app->add_option("--ablate", ablate, "remove parts: tfd, eps, cps (comma list) or none");
    app->add_option("--fszu-shots", shots, "training rows kept per seen class");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--seed", seed, "training seed");
    app->add_option("--resume", resume, "continue from this checkpoint; its stored config is the base");
    app->add_flag("--paper-scale", paper_scale, "full layer widths and epoch count");
  }

  RunConfig config(const std::optional<Checkpoint>& ck) const {
    RunConfig base;
    if (ck) base = config_from_checkpoint(*ck);
    if (paper_scale) apply_paper_scale(base);
    RunConfig c = cfg.build(base);
    if (!ablate.empty()) set_config_value(c, "ablation", ablate);
    if (shots) c.train.fszu_shots = *shots;
    if (epochs) c.train.epochs = *epochs;
    if (seed) c.train.seed = *seed;
    if (!bundle.empty()) c.bundle_path = bundle;
    if (!out_dir.empty()) c.out_dir = out_dir;
    return c;
  }

  int run() const {
    std::optional<Checkpoint> ck;
    if (!resume.empty()) ck = load_checkpoint(resume);
    const RunConfig c = config(ck);
    c.train.validate();
    const DatasetBundle b = load_bundle(c.bundle_path);
    fs::create_directories(c.out_dir);
    const fs::path dir(c.out_dir);
    write_text((dir / "config.txt").string(), config_header(c));

    const Partition part = run_partition(b, c.train);
    TrainState state;
    if (ck) {
      require_compatible(ck->state.model, b);
      state = std::move(ck->state);
      log("resuming at epoch %zu of %zu", state.epochs_done, c.train.epochs);
    } else {
      state = TrainState::fresh(c.train.dims(b.feature_dim(), b.semantic_dim()), c.train);
    }

    const auto metrics_path = (dir / "metrics.jsonl").string();
    std::ofstream jsonl(metrics_path, ck ? std::ios::app : std::ios::trunc);
    if (!jsonl) throw UsageError("cannot write '" + metrics_path + "'");
    const std::string hash = c.hash();
    const auto report = train(b, c.train, state, part, [&](const EpochRecord& e, const TrainState&) {
      if (e.test) {
        auto j = metrics_record(*e.test, e.epoch + 1, "test", c);
        j["val_score"] = e.val_score;
        j["stage1"] = e.stage1.terms;
        j["stage2"] = e.stage2.terms;
        j["seconds"] = e.seconds;
        jsonl << j.dump() << '\n' << std::flush;
        log("epoch %zu  u %.3f  s %.3f  H %.3f  val %.3f  (%.2fs)", e.epoch + 1, e.test->u, e.test->s, e.test->H,
            e.val_score, e.seconds);
      }
    });

    save_checkpoint((dir / "checkpoint.tdck").string(), state, checkpoint_echo(c), hash);
    if (report.best) save_checkpoint((dir / "best.tdck").string(), *report.best, checkpoint_echo(c), hash);
    const Metrics final_metrics = evaluate_gzsl(state.model, b, part);
    auto j = metrics_record(final_metrics, state.epochs_done, "test", c);
    j["best_epoch"] = state.best_epoch;
    j["wall_seconds"] = report.wall_seconds;
    write_text((dir / "final_metrics.json").string(), j.dump(2) + "\n");
    log("done: u %.3f  s %.3f  H %.3f  in %.1fs -> %s", final_metrics.u, final_metrics.s, final_metrics.H,
        report.wall_seconds, c.out_dir.c_str());
    return kExitOk;
  }
};

// ---------------------------------------------------------------------------
// eval

struct EvalCmd {
  std::string checkpoint;
  std::string bundle;
  std::string out;
  bool json = false;

  void attach(CLI::App* app) {
    app->add_option("-k,--checkpoint", checkpoint, "checkpoint file")->required();
    app->add_option("-b,--bundle", bundle, "dataset bundle (default: bundle_path stored in the checkpoint)");
    app->add_option("-o,--out", out, "also write the metrics JSON here");
    app->add_flag("--json", json, "print one JSON object instead of the table");
  }

  int run() const {
    const Checkpoint ck = load_checkpoint(checkpoint);
    const RunConfig c = config_from_checkpoint(ck);
    const DatasetBundle b = load_bundle(bundle.empty() ? c.bundle_path : bundle);
    require_compatible(ck.state.model, b);
    const Partition part = run_partition(b, c.train);
    const Metrics m = evaluate_gzsl(ck.state.model, b, part);
    const auto j = metrics_record(m, ck.state.epochs_done, "test", c);
    if (!out.empty()) write_text(out, j.dump(2) + "\n");
    if (json)
      std::cout << j.dump() << '\n';
    else
      std::cout << metrics_table(m, b);
    return kExitOk;
  }
};

// ---------------------------------------------------------------------------
// sweep

struct Cell {
  std::string name;
  std::string ablation;
  std::size_t shots;
};

std::vector<Cell> grid_cells(const std::vector<std::string>& ablations, const std::vector<std::string>& shot_list) {
  const bool vary_shots = shot_list != std::vector<std::string>{"all"};
  const bool vary_ablation = ablations != std::vector<std::string>{"full"};
  std::vector<Cell> cells;
  for (const auto& a : ablations) {
    const bool full = a == "full" || a == "none";
    const std::string abl = full ? "none" : a;
    detail::parse_ablation("--ablations", abl);
    std::string abl_name = full ? "full" : "no_" + a;
    std::replace(abl_name.begin(), abl_name.end(), ',', '+');
    for (const auto& s : shot_list) {
      std::size_t shots = 0;
      if (s != "all") {
        shots = detail::parse_unsigned_value<std::size_t>("--shots", s);
        if (shots == 0) throw ConfigError("--shots: use 'all' instead of 0");
      }
      std::string name = abl_name;
      if (vary_shots) name = vary_ablation ? abl_name + "/shots=" + s : "shots=" + s;
      cells.push_back({name, abl, shots});
    }
  }
  return cells;
}

struct SweepCmd {
  ConfigOptions cfg;
  std::string bundle;
  std::string out = "sweep.csv";
  std::vector<std::string> ablations{"full"};
  std::vector<std::string> shots{"all"};
  std::size_t seeds = 3;
  bool regenerate = false;

  void attach(CLI::App* app) {
    cfg.attach(app);
    app->add_option("-b,--bundle", bundle, "dataset bundle shared by every cell");
    app->add_option("-o,--out", out, "CSV path");
    app->add_option("--ablations", ablations, "cells: full, tfd, eps, cps")->delimiter(',');
    app->add_option("--shots", shots, "cells: all or rows per seen class")->delimiter(',');
    app->add_option("--seeds", seeds, "seeds per cell (training seeds seed, seed+1, ...)");
    app->add_flag("--regenerate", regenerate, "generate a fresh synthetic bundle per seed instead of --bundle");
  }

  int run() const {
    const RunConfig base = cfg.build();
    if (seeds == 0) throw ConfigError("--seeds must be >= 1");
    const auto cells = grid_cells(ablations, shots);
    std::vector<std::tuple<std::string, double, double, double>> medians;
    std::optional<DatasetBundle> shared;
    if (!regenerate) shared = load_bundle(bundle.empty() ? base.bundle_path : bundle);

    std::ofstream f(out, std::ios::trunc);
    if (!f) throw UsageError("cannot write '" + out + "'");
    f << "setting,seed,u,s,H,config_hash\n";
    f.precision(17);
    for (const auto& cell : cells) {
      std::vector<double> us, ss, hs;
      for (std::size_t i = 0; i < seeds; ++i) {
        RunConfig c = base;
        set_config_value(c, "ablation", cell.ablation);
        c.train.fszu_shots = cell.shots;
        c.train.seed = base.train.seed + i;
        c.train.eval_every = 0;
        if (regenerate) c.synth.seed = base.synth.seed + i;
        const DatasetBundle b = regenerate ? generate_synthetic(c.synth) : *shared;
        const auto r = train(b, c.train);
        const Metrics m = evaluate_gzsl(r.state.model, b, r.partition);
        us.push_back(m.u), ss.push_back(m.s), hs.push_back(m.H);
        f << cell.name << ',' << c.train.seed << ',' << m.u << ',' << m.s << ',' << m.H << ',' << c.hash() << '\n';
        log("%s seed %llu: u %.3f  s %.3f  H %.3f  (%.1fs)", cell.name.c_str(),
            static_cast<unsigned long long>(c.train.seed), m.u, m.s, m.H, r.report.wall_seconds);
      }
      medians.emplace_back(cell.name, median(us), median(ss), median(hs));
    }
    for (const auto& [name, u, s, H] : medians)
      f << name << ",median," << u << ',' << s << ',' << H << ',' << base.hash() << '\n';
    log("wrote %s", out.c_str());
    return kExitOk;
  }

  static double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }
};

// ---------------------------------------------------------------------------
// export-embeddings

struct ExportCmd {
  std::string checkpoint;
  std::string bundle;
  std::string out = "embeddings.csv";
  std::size_t count = 256;
  std::uint64_t seed = 0;

  void attach(CLI::App* app) {
    app->add_option("-k,--checkpoint", checkpoint, "checkpoint file")->required();
    app->add_option("-b,--bundle", bundle, "dataset bundle (default: bundle_path stored in the checkpoint)");
    app->add_option("-o,--out", out, "CSV path");
    app->add_option("--count", count, "pseudo samples per kind");
    app->add_option("--seed", seed, "sampling seed");
  }

  int run() const {
    const Checkpoint ck = load_checkpoint(checkpoint);
    const RunConfig c = config_from_checkpoint(ck);
    const DatasetBundle b = load_bundle(bundle.empty() ? c.bundle_path : bundle);
    require_compatible(ck.state.model, b);
    const Partition part = run_partition(b, c.train);
    const auto rows = export_embeddings_2d(ck.state.model, b, part, out, c.train.edge_epsilon, seed, count,
                                           "config_hash = " + c.hash());
    log("wrote %zu rows to %s", rows.size(), out.c_str());
    return kExitOk;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Disentangled-feature zero-shot learner on synthetic data"};
  app.require_subcommand(1);
  app.add_flag("-q,--quiet", g_quiet, "suppress progress logs");

  GenDataCmd gen;
  TrainCmd tr;
  EvalCmd ev;
  SweepCmd sw;
  ExportCmd ex;
  auto* gen_app = app.add_subcommand("gen-data", "generate a synthetic dataset bundle");
  auto* tr_app = app.add_subcommand("train", "train a model and write checkpoint and metrics");
  auto* ev_app = app.add_subcommand("eval", "evaluate a checkpoint");
  auto* sw_app = app.add_subcommand("sweep", "train a grid of ablations and/or shot counts over seeds");
  auto* ex_app = app.add_subcommand("export-embeddings", "write a 2-D PCA view of real and pseudo latents");
  gen.attach(gen_app);
  tr.attach(tr_app);
  ev.attach(ev_app);
  sw.attach(sw_app);
  ex.attach(ex_app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    if (gen_app->parsed()) return gen.run();
    if (tr_app->parsed()) return tr.run();
    if (ev_app->parsed()) return ev.run();
    if (sw_app->parsed()) return sw.run();
    if (ex_app->parsed()) return ex.run();
  } catch (const InputError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInput;
  } catch (const RuntimeFailure& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitInput;
}
