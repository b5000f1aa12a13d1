#pragma once

// Flat key=value run configuration. Lines are `key = value`; `#` starts a
// comment. Every key has a default; unknown keys are rejected. An
// environment variable TDCSS_<KEY> (key upper-cased) overrides the file.

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "tdcss/data.hpp"
#include "tdcss/trainer.hpp"

namespace tdcss {

struct RunConfig {
  SynthConfig synth;
  TrainConfig train;
  std::string bundle_path = "data.zslb";
  std::string out_dir = "run";

  bool operator==(const RunConfig& o) const { return echo() == o.echo(); }

  std::string echo() const;
  std::string hash() const;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double_value(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

template <class U>
U parse_unsigned_value(const std::string& key, const std::string& v) {
  U out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return out;
}

inline bool parse_bool_value(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

struct ConfigKey {
  std::string name;
  std::string doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::string ablation_string(const Ablation& a) {
  std::string s;
  auto add = [&](bool on, const char* n) {
    if (!on) return;
    if (!s.empty()) s += ",";
    s += n;
  };
  add(a.no_tfd, "tfd");
  add(a.no_eps, "eps");
  add(a.no_cps, "cps");
  return s.empty() ? "none" : s;
}

inline Ablation parse_ablation(const std::string& key, const std::string& v) {
  Ablation a;
  if (v == "none" || v.empty()) return a;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (part == "tfd") a.no_tfd = true;
    else if (part == "eps") a.no_eps = true;
    else if (part == "cps") a.no_cps = true;
    else throw ConfigError("config key '" + key + "': unknown ablation '" + part + "' (use tfd, eps, cps or none)");
  }
  return a;
}

#define TDCSS_SIZE_KEY(NAME, FIELD, DOC)                                                            \
  ConfigKey {                                                                                       \
    NAME, DOC, [](const RunConfig& c) { return std::to_string(c.FIELD); },                        \
        [](RunConfig& c, const std::string& v) { c.FIELD = parse_unsigned_value<std::size_t>(NAME, v); } \
  }
#define TDCSS_SEED_KEY(NAME, FIELD, DOC)                                                               \
  ConfigKey {                                                                                          \
    NAME, DOC, [](const RunConfig& c) { return std::to_string(c.FIELD); },                           \
        [](RunConfig& c, const std::string& v) { c.FIELD = parse_unsigned_value<std::uint64_t>(NAME, v); } \
  }
#define TDCSS_REAL_KEY(NAME, FIELD, DOC)                                                  \
  ConfigKey {                                                                             \
    NAME, DOC, [](const RunConfig& c) { return fmt_double(c.FIELD); },                  \
        [](RunConfig& c, const std::string& v) { c.FIELD = parse_double_value(NAME, v); } \
  }
#define TDCSS_BOOL_KEY(NAME, FIELD, DOC)                                                              \
  ConfigKey {                                                                                         \
    NAME, DOC, [](const RunConfig& c) { return std::string(c.FIELD ? "true" : "false"); },          \
        [](RunConfig& c, const std::string& v) { c.FIELD = parse_bool_value(NAME, v); }              \
  }

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      // synthetic data
      TDCSS_SIZE_KEY("num_seen", synth.num_seen, "seen classes S"),
      TDCSS_SIZE_KEY("num_unseen", synth.num_unseen, "unseen classes U"),
      TDCSS_SIZE_KEY("semantic_dim", synth.semantic_dim, "semantic vector width"),
      TDCSS_SIZE_KEY("feature_dim", synth.feature_dim, "visual feature width"),
      TDCSS_SIZE_KEY("samples_per_class", synth.samples_per_class, "rows generated per class"),
      TDCSS_SIZE_KEY("task_signal_dim", synth.task_signal_dim, "class-relevant latent width"),
      TDCSS_SIZE_KEY("nuisance_dim", synth.nuisance_dim, "class-irrelevant latent width"),
      TDCSS_REAL_KEY("noise_std", synth.noise_std, "noise on the class-relevant factors"),
      TDCSS_REAL_KEY("nuisance_std", synth.nuisance_std, "scale of the nuisance factors"),
      TDCSS_SEED_KEY("data_seed", synth.seed, "seed of the synthetic generator"),
      // training
      TDCSS_REAL_KEY("lr", train.lr, "stage-1 learning rate"),
      TDCSS_REAL_KEY("lr_stage2_factor", train.lr_stage2_factor, "stage-2 learning rate as a fraction of lr"),
      TDCSS_SIZE_KEY("epochs", train.epochs, "training epochs"),
      TDCSS_SIZE_KEY("batches_stage1", train.batches_stage1, "batches per epoch in stage 1"),
      TDCSS_SIZE_KEY("batches_stage2", train.batches_stage2, "batches per epoch in stage 2"),
      TDCSS_SIZE_KEY("batch_size", train.batch_size, "rows per batch"),
      TDCSS_SIZE_KEY("n_target", train.n_target, "seen classes held out as targets each epoch"),
      TDCSS_SIZE_KEY("num_edge_nets", train.num_edge_nets, "edge convert nets"),
      TDCSS_REAL_KEY("edge_epsilon", train.edge_epsilon, "edge offset bound relative to mean |h_cor|"),
      TDCSS_REAL_KEY("soft_temperature", train.soft_temperature, "temperature of the transfer soft labels"),
      ConfigKey{"soft_label_mode", "softmax or linear normalization of soft labels",
                [](const RunConfig& c) {
                  return std::string(c.train.soft_label_mode == SoftLabelMode::softmax ? "softmax" : "linear");
                },
                [](RunConfig& c, const std::string& v) {
                  if (v == "softmax") c.train.soft_label_mode = SoftLabelMode::softmax;
                  else if (v == "linear") c.train.soft_label_mode = SoftLabelMode::linear;
                  else throw ConfigError("config key 'soft_label_mode': expected softmax or linear, got '" + v + "'");
                }},
      TDCSS_REAL_KEY("lambda_rec", train.lambda_rec, "reconstruction weight"),
      TDCSS_REAL_KEY("lambda_mine", train.lambda_mine, "mutual-information weight"),
      TDCSS_REAL_KEY("lambda_adv", train.lambda_adv, "adversarial entropy weight"),
      TDCSS_REAL_KEY("lambda_trans", train.lambda_trans, "transfer loss weight"),
      TDCSS_REAL_KEY("lambda_di", train.lambda_di, "domain identifier weight"),
      TDCSS_REAL_KEY("mine_ema_momentum", train.mine_ema_momentum, "moving-average momentum of the MI denominator"),
      TDCSS_REAL_KEY("latent_l2", train.latent_l2, "penalty on the squared norm of the latent factors"),
      ConfigKey{"ablation", "comma list of removed parts: tfd, eps, cps; or none",
                [](const RunConfig& c) { return ablation_string(c.train.ablation); },
                [](RunConfig& c, const std::string& v) { c.train.ablation = parse_ablation("ablation", v); }},
      TDCSS_BOOL_KEY("fixed_split", train.fixed_split, "reuse one source/target split for every epoch"),
      TDCSS_BOOL_KEY("rec_trains_encoders", train.rec_trains_encoders, "reconstruction also updates the encoders"),
      TDCSS_BOOL_KEY("classify_ind", train.classify_ind, "W also learns to classify h_ind"),
      TDCSS_BOOL_KEY("encoders_in_synthesis", train.encoders_in_synthesis, "pseudo-sample losses update the encoders"),
      TDCSS_BOOL_KEY("mine_trains_shared", train.mine_trains_shared, "MI step also updates E and E_cor"),
      TDCSS_BOOL_KEY("mine_standardize", train.mine_standardize, "MI estimator sees per-batch z-scored latents"),
      TDCSS_SIZE_KEY("mine_steps", train.mine_steps, "statistics-net ascent steps per batch"),
      TDCSS_BOOL_KEY("stage2_real_seen", train.stage2_real_seen, "stage-2 head step also uses the real seen batch"),
      TDCSS_BOOL_KEY("bilinear_head", train.bilinear_head, "single linear map as compatibility head"),
      ConfigKey{"scale", "desk or paper layer widths",
                [](const RunConfig& c) { return std::string(c.train.scale == Scale::desk ? "desk" : "paper"); },
                [](RunConfig& c, const std::string& v) {
                  if (v == "desk") c.train.scale = Scale::desk;
                  else if (v == "paper") c.train.scale = Scale::paper;
                  else throw ConfigError("config key 'scale': expected desk or paper, got '" + v + "'");
                }},
      TDCSS_SIZE_KEY("eval_every", train.eval_every, "epochs between test evaluations (0 = only at the end)"),
      TDCSS_REAL_KEY("seen_test_fraction", train.seen_test_fraction, "seen rows held out for testing"),
      TDCSS_REAL_KEY("val_fraction", train.val_fraction, "seen rows held out for checkpoint selection"),
      TDCSS_SIZE_KEY("fszu_shots", train.fszu_shots, "training rows kept per seen class (0 = all)"),
      TDCSS_SEED_KEY("seed", train.seed, "training seed"),
      // paths
      ConfigKey{"bundle_path", "dataset bundle", [](const RunConfig& c) { return c.bundle_path; },
                [](RunConfig& c, const std::string& v) { c.bundle_path = v; }},
      ConfigKey{"out_dir", "output directory", [](const RunConfig& c) { return c.out_dir; },
                [](RunConfig& c, const std::string& v) { c.out_dir = v; }},
  };
  return keys;
}

#undef TDCSS_SIZE_KEY
#undef TDCSS_SEED_KEY
#undef TDCSS_REAL_KEY
#undef TDCSS_BOOL_KEY

inline const ConfigKey& find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return k;
  throw ConfigError("unknown config key '" + name + "'");
}

inline std::string env_name(const std::string& key) {
  std::string s = "TDCSS_";
  for (char c : key) s += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace detail

/// Sets one key; throws ConfigError naming the key on unknown keys or bad values.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  detail::find_key(key).set(c, detail::trim(value));
}

inline std::string get_config_value(const RunConfig& c, const std::string& key) { return detail::find_key(key).get(c); }

/// Applies `key = value` lines on top of `base`.
inline RunConfig parse_config(std::istream& in, RunConfig base = {}) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value, got '" + t + "'");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    set_config_value(base, key, std::string(std::string_view(t).substr(eq + 1)));
  }
  return base;
}

inline RunConfig parse_config_string(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  return parse_config(in, std::move(base));
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  return parse_config(in, std::move(base));
}

/// Overrides keys from TDCSS_<KEY> environment variables. `getenv` is
/// injectable for tests.
inline void apply_env_overrides(RunConfig& c,
                                const std::function<const char*(const char*)>& getenv_fn = [](const char* n) {
                                  return std::getenv(n);
                                }) {
  for (const auto& k : detail::config_keys())
    if (const char* v = getenv_fn(detail::env_name(k.name).c_str())) k.set(c, detail::trim(v));
}

/// Full-size preset: full layer widths, 1500 epochs and the unadjusted
/// optimization settings in place of the desk calibration.
inline void apply_paper_scale(RunConfig& c) {
  auto& t = c.train;
  t.scale = Scale::paper;
  t.epochs = 1500;
  t.lr = 2e-4;
  t.lr_stage2_factor = 0.1;
  t.batches_stage1 = 30;
  t.batches_stage2 = 10;
  t.lambda_rec = t.lambda_mine = t.lambda_adv = t.lambda_trans = t.lambda_di = 1.0;
  t.latent_l2 = 0.0;
  t.mine_standardize = false;
  t.mine_steps = 1;
  t.bilinear_head = false;
}

/// Every key with its value, one `key = value` per line in declaration
/// order. Parsing the echo reproduces the config.
inline std::string RunConfig::echo() const {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.name + " = " + k.get(*this) + "\n";
  return out;
}

/// 16 hex digits of FNV-1a over the echo, excluding paths.
inline std::string RunConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& k : detail::config_keys()) {
    if (k.name == "bundle_path" || k.name == "out_dir") continue;
    for (char ch : k.name + "=" + k.get(*this) + "\n") {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Documented defaults, formatted as a config file.
inline std::string default_config_text() {
  const RunConfig c;
  std::string out;
  for (const auto& k : detail::config_keys()) out += "# " + k.doc + "\n" + k.name + " = " + k.get(c) + "\n";
  return out;
}

}  // namespace tdcss
