#pragma once

// Dataset model: feature bundles, the synthetic confounded-feature
// generator, the ZSLB file format, CSV import, row partitions, per-epoch
// source/target class splits, few-shot subsampling and minibatching.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tdcss/binary_io.hpp"
#include "tdcss/errors.hpp"
#include "tdcss/numkernel.hpp"
#include "tdcss/rng.hpp"

namespace tdcss {

/// Features, labels and the class registry. Class ids index rows of
/// `semantics`; seen and unseen ids are disjoint and cover every label.
struct DatasetBundle {
  MatrixF features;  // N x D_x
  std::vector<int> labels;
  MatrixF semantics;  // (S+U) x D_a
  std::vector<int> seen_classes;
  std::vector<int> unseen_classes;

  std::size_t num_rows() const { return static_cast<std::size_t>(features.rows()); }
  std::size_t feature_dim() const { return static_cast<std::size_t>(features.cols()); }
  std::size_t semantic_dim() const { return static_cast<std::size_t>(semantics.cols()); }
  std::size_t num_classes() const { return static_cast<std::size_t>(semantics.rows()); }
  std::size_t num_seen() const { return seen_classes.size(); }
  std::size_t num_unseen() const { return unseen_classes.size(); }

  bool is_unseen(int c) const {
    return std::find(unseen_classes.begin(), unseen_classes.end(), c) != unseen_classes.end();
  }

  std::vector<std::size_t> rows_of_class(int c) const {
    std::vector<std::size_t> r;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) r.push_back(i);
    return r;
  }

  void validate() const {
    if (labels.size() != num_rows())
      throw DataError("bundle: " + std::to_string(labels.size()) + " labels for " + std::to_string(num_rows()) +
                      " rows");
    std::set<int> seen(seen_classes.begin(), seen_classes.end());
    std::set<int> unseen(unseen_classes.begin(), unseen_classes.end());
    if (seen.size() != seen_classes.size() || unseen.size() != unseen_classes.size())
      throw DataError("bundle: duplicate class id in seen/unseen registry");
    for (int c : seen)
      if (unseen.count(c)) throw DataError("bundle: class " + std::to_string(c) + " is both seen and unseen");
    if (seen.size() + unseen.size() != num_classes())
      throw DataError("bundle: registry covers " + std::to_string(seen.size() + unseen.size()) + " classes but " +
                      std::to_string(num_classes()) + " semantic rows present");
    for (int c : seen)
      if (c < 0 || static_cast<std::size_t>(c) >= num_classes())
        throw DataError("bundle: class id " + std::to_string(c) + " has no semantic row");
    for (int c : unseen)
      if (c < 0 || static_cast<std::size_t>(c) >= num_classes())
        throw DataError("bundle: class id " + std::to_string(c) + " has no semantic row");
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes())
        throw DataError("bundle: row " + std::to_string(i) + " has unknown label " + std::to_string(labels[i]));
    if (!semantics.allFinite()) throw DataError("bundle: non-finite semantic vector");
    for (Eigen::Index k = 0; k < semantics.rows(); ++k)
      if (semantics.row(k).squaredNorm() == 0.0f)
        throw DataError("bundle: semantic vector of class " + std::to_string(k) + " is zero");
  }

  bool operator==(const DatasetBundle&) const = default;
};

// ---------------------------------------------------------------------------
// Synthetic testbed

struct SynthConfig {
  std::size_t num_seen = 12;
  std::size_t num_unseen = 4;
  std::size_t semantic_dim = 16;
  std::size_t feature_dim = 64;
  std::size_t samples_per_class = 200;
  std::size_t task_signal_dim = 24;
  std::size_t nuisance_dim = 24;
  double noise_std = 0.1;
  double nuisance_std = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_seen < 1 || num_unseen < 1 || semantic_dim < 1 || feature_dim < 1 || samples_per_class < 1 ||
        task_signal_dim < 1 || nuisance_dim < 1)
      throw ConfigError("synth: all counts must be >= 1");
    if (task_signal_dim + nuisance_dim > feature_dim)
      throw ConfigError("synth: task_signal_dim + nuisance_dim (" + std::to_string(task_signal_dim + nuisance_dim) +
                        ") exceeds feature_dim (" + std::to_string(feature_dim) + ")");
    if (!(noise_std >= 0.0) || !(nuisance_std >= 0.0)) throw ConfigError("synth: noise scales must be >= 0");
  }
};

/// The latent factors behind a synthetic bundle, row-aligned with it.
struct SynthFactors {
  MatrixF task_signal;  // N x task_signal_dim
  MatrixF nuisance;     // N x nuisance_dim
};

/// Generates the bundle and returns the hidden factors alongside it.
///
/// Per class k a semantic vector a_k ~ U[0,1]^D_a. Each sample of class k
/// has task signal t = M_a a_k + noise and a class-independent nuisance n;
/// the observed feature is x = M_mix [t; n] with M_mix having orthonormal
/// columns. Classes [0, S) are seen, [S, S+U) unseen.
inline DatasetBundle generate_synthetic(const SynthConfig& cfg, SynthFactors* factors) {
  cfg.validate();
  Rng rng = make_rng(cfg.seed, {0x5717});
  const auto C = static_cast<Eigen::Index>(cfg.num_seen + cfg.num_unseen);
  const auto Da = static_cast<Eigen::Index>(cfg.semantic_dim);
  const auto Dt = static_cast<Eigen::Index>(cfg.task_signal_dim);
  const auto Dn = static_cast<Eigen::Index>(cfg.nuisance_dim);
  const auto Dx = static_cast<Eigen::Index>(cfg.feature_dim);
  const auto per = static_cast<Eigen::Index>(cfg.samples_per_class);

  DatasetBundle b;
  b.semantics.resize(C, Da);
  for (Eigen::Index i = 0; i < b.semantics.size(); ++i) b.semantics.data()[i] = static_cast<float>(uniform01(rng));

  MatrixD task_map(Dt, Da);
  for (Eigen::Index i = 0; i < task_map.size(); ++i)
    task_map.data()[i] = standard_normal(rng) / std::sqrt(static_cast<double>(Da));

  MatrixD gauss(Dx, Dt + Dn);
  for (Eigen::Index i = 0; i < gauss.size(); ++i) gauss.data()[i] = standard_normal(rng);
  const MatrixD q = Eigen::HouseholderQR<MatrixD>(gauss).householderQ() * MatrixD::Identity(Dx, Dt + Dn);

  const MatrixD class_signal = b.semantics.cast<double>() * task_map.transpose();  // C x Dt
  const Eigen::Index n = C * per;
  MatrixD t(n, Dt), nu(n, Dn);
  b.labels.resize(static_cast<std::size_t>(n));
  for (Eigen::Index k = 0; k < C; ++k) {
    for (Eigen::Index s = 0; s < per; ++s) {
      const Eigen::Index r = k * per + s;
      b.labels[static_cast<std::size_t>(r)] = static_cast<int>(k);
      for (Eigen::Index j = 0; j < Dt; ++j) t(r, j) = class_signal(k, j) + cfg.noise_std * standard_normal(rng);
      for (Eigen::Index j = 0; j < Dn; ++j) nu(r, j) = cfg.nuisance_std * standard_normal(rng);
    }
  }
  MatrixD latent(n, Dt + Dn);
  latent << t, nu;
  b.features = (latent * q.transpose()).cast<float>();

  for (std::size_t c = 0; c < cfg.num_seen; ++c) b.seen_classes.push_back(static_cast<int>(c));
  for (std::size_t c = 0; c < cfg.num_unseen; ++c) b.unseen_classes.push_back(static_cast<int>(cfg.num_seen + c));
  if (factors) {
    factors->task_signal = t.cast<float>();
    factors->nuisance = nu.cast<float>();
  }
  b.validate();
  return b;
}

inline DatasetBundle generate_synthetic(const SynthConfig& cfg) { return generate_synthetic(cfg, nullptr); }

// ---------------------------------------------------------------------------
// ZSLB file format
//
//   "ZSLB" | version u32 | N, D_x, S, U, D_a u64 | features N*D_x f32 |
//   labels N u32 | semantics (S+U)*D_a f32 | seen ids S u32 | unseen ids U u32 |
//   crc32 u32 over all preceding bytes

inline constexpr std::uint32_t kBundleVersion = 1;

inline std::vector<std::uint8_t> encode_bundle(const DatasetBundle& b) {
  b.validate();
  ByteWriter w;
  w.put_bytes("ZSLB");
  w.put<std::uint32_t>(kBundleVersion);
  w.put<std::uint64_t>(b.num_rows());
  w.put<std::uint64_t>(b.feature_dim());
  w.put<std::uint64_t>(b.num_seen());
  w.put<std::uint64_t>(b.num_unseen());
  w.put<std::uint64_t>(b.semantic_dim());
  w.put_array(b.features.data(), static_cast<std::size_t>(b.features.size()));
  for (int l : b.labels) w.put<std::uint32_t>(static_cast<std::uint32_t>(l));
  w.put_array(b.semantics.data(), static_cast<std::size_t>(b.semantics.size()));
  for (int c : b.seen_classes) w.put<std::uint32_t>(static_cast<std::uint32_t>(c));
  for (int c : b.unseen_classes) w.put<std::uint32_t>(static_cast<std::uint32_t>(c));
  w.seal();
  return w.bytes();
}

inline DatasetBundle decode_bundle(std::vector<std::uint8_t> bytes) {
  ByteReader r(std::move(bytes), "bundle");
  r.expect_magic("ZSLB");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kBundleVersion)
    throw FormatError("bundle: unsupported version " + std::to_string(version) + " at offset 4");
  const auto n = r.get<std::uint64_t>("N");
  const auto dx = r.get<std::uint64_t>("D_x");
  const auto s = r.get<std::uint64_t>("S");
  const auto u = r.get<std::uint64_t>("U");
  const auto da = r.get<std::uint64_t>("D_a");
  constexpr std::uint64_t kLimit = 1ULL << 40;
  if (n > kLimit || dx > kLimit || s > kLimit || u > kLimit || da > kLimit || n * dx > kLimit ||
      (s + u) * da > kLimit)
    throw FormatError("bundle: implausible header dimensions at offset 8");
  const std::uint64_t payload = 4 * (n * dx + n + (s + u) * da + s + u) + 4;
  if (r.size() - r.offset() < payload)
    throw FormatError("bundle: truncated at offset " + std::to_string(r.size()) + ": header declares N=" +
                      std::to_string(n) + " needing " + std::to_string(r.offset() + payload) + " bytes");
  r.verify_trailing_crc();

  DatasetBundle b;
  b.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dx));
  r.get_array(b.features.data(), n * dx, "features");
  b.labels.resize(n);
  for (auto& l : b.labels) l = static_cast<int>(r.get<std::uint32_t>("labels"));
  b.semantics.resize(static_cast<Eigen::Index>(s + u), static_cast<Eigen::Index>(da));
  r.get_array(b.semantics.data(), (s + u) * da, "semantics");
  b.seen_classes.resize(s);
  for (auto& c : b.seen_classes) c = static_cast<int>(r.get<std::uint32_t>("seen ids"));
  b.unseen_classes.resize(u);
  for (auto& c : b.unseen_classes) c = static_cast<int>(r.get<std::uint32_t>("unseen ids"));
  r.expect_crc_next();
  try {
    b.validate();
  } catch (const DataError& e) {
    throw FormatError(std::string("bundle: invalid contents: ") + e.what());
  }
  return b;
}

inline void save_bundle(const DatasetBundle& b, const std::string& path) {
  const auto bytes = encode_bundle(b);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw UsageError("save_bundle: cannot open '" + path + "'");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw UsageError("save_bundle: short write to '" + path + "'");
}

inline DatasetBundle load_bundle(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("load_bundle: cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_bundle(std::move(bytes));
}

// ---------------------------------------------------------------------------
// CSV import for hand-made fixtures.
//
// features: header `label,f0,f1,...`, one row per sample.
// semantics: header `class,split,a0,a1,...` with split in {seen, unseen}.

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  return out;
}

inline double parse_number(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(where + ": cannot parse number '" + s + "'");
  }
}

}  // namespace detail

inline DatasetBundle import_csv(const std::string& features_path, const std::string& semantics_path) {
  std::ifstream sf(semantics_path);
  if (!sf) throw UsageError("import_csv: cannot open '" + semantics_path + "'");
  std::string line;
  if (!std::getline(sf, line)) throw FormatError(semantics_path + ": empty file");
  auto head = detail::split_csv_line(line);
  if (head.size() < 3 || head[0] != "class" || head[1] != "split")
    throw FormatError(semantics_path + ":1: header must be class,split,a0,...");
  const std::size_t da = head.size() - 2;
  std::map<int, std::pair<bool, std::vector<double>>> rows;
  for (std::size_t ln = 2; std::getline(sf, line); ++ln) {
    if (line.empty() || line == "\r") continue;
    const std::string where = semantics_path + ":" + std::to_string(ln);
    auto cells = detail::split_csv_line(line);
    if (cells.size() != da + 2) throw FormatError(where + ": expected " + std::to_string(da + 2) + " cells");
    const int c = static_cast<int>(detail::parse_number(cells[0], where));
    if (cells[1] != "seen" && cells[1] != "unseen") throw FormatError(where + ": split must be seen or unseen");
    std::vector<double> a(da);
    for (std::size_t j = 0; j < da; ++j) a[j] = detail::parse_number(cells[j + 2], where);
    if (!rows.emplace(c, std::make_pair(cells[1] == "seen", std::move(a))).second)
      throw FormatError(where + ": duplicate class " + std::to_string(c));
  }
  DatasetBundle b;
  b.semantics.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(da));
  int expect = 0;
  for (auto& [c, v] : rows) {
    if (c != expect) throw FormatError(semantics_path + ": class ids must be 0..C-1, missing " + std::to_string(expect));
    ++expect;
    (v.first ? b.seen_classes : b.unseen_classes).push_back(c);
    for (std::size_t j = 0; j < da; ++j) b.semantics(c, static_cast<Eigen::Index>(j)) = static_cast<float>(v.second[j]);
  }

  std::ifstream ff(features_path);
  if (!ff) throw UsageError("import_csv: cannot open '" + features_path + "'");
  if (!std::getline(ff, line)) throw FormatError(features_path + ": empty file");
  head = detail::split_csv_line(line);
  if (head.size() < 2 || head[0] != "label") throw FormatError(features_path + ":1: header must be label,f0,...");
  const std::size_t dx = head.size() - 1;
  std::vector<std::vector<double>> feats;
  for (std::size_t ln = 2; std::getline(ff, line); ++ln) {
    if (line.empty() || line == "\r") continue;
    const std::string where = features_path + ":" + std::to_string(ln);
    auto cells = detail::split_csv_line(line);
    if (cells.size() != dx + 1) throw FormatError(where + ": expected " + std::to_string(dx + 1) + " cells");
    b.labels.push_back(static_cast<int>(detail::parse_number(cells[0], where)));
    std::vector<double> f(dx);
    for (std::size_t j = 0; j < dx; ++j) f[j] = detail::parse_number(cells[j + 1], where);
    feats.push_back(std::move(f));
  }
  b.features.resize(static_cast<Eigen::Index>(feats.size()), static_cast<Eigen::Index>(dx));
  for (std::size_t i = 0; i < feats.size(); ++i)
    for (std::size_t j = 0; j < dx; ++j)
      b.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = static_cast<float>(feats[i][j]);
  b.validate();
  return b;
}

// ---------------------------------------------------------------------------
// Row partitions

/// Which rows play which role. Unseen-class rows only ever appear in
/// `test_unseen`.
struct Partition {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test_seen;
  std::vector<std::size_t> test_unseen;

  bool operator==(const Partition&) const = default;
};

struct PartitionConfig {
  double seen_test_fraction = 0.2;
  double val_fraction = 0.1;
};

/// Stratified per seen class: test, then validation, the rest is training.
inline Partition make_partition(const DatasetBundle& b, const PartitionConfig& pc, std::uint64_t seed) {
  if (!(pc.seen_test_fraction >= 0.0 && pc.seen_test_fraction < 1.0 && pc.val_fraction >= 0.0 &&
        pc.seen_test_fraction + pc.val_fraction < 1.0))
    throw ConfigError("partition: fractions must be in [0,1) and sum below 1");
  Partition p;
  for (int c : b.seen_classes) {
    auto rows = b.rows_of_class(c);
    Rng rng = make_rng(seed, {0x9a27, static_cast<std::uint64_t>(c)});
    shuffle(rows.begin(), rows.end(), rng);
    const auto n = rows.size();
    auto n_test = static_cast<std::size_t>(std::llround(pc.seen_test_fraction * static_cast<double>(n)));
    auto n_val = static_cast<std::size_t>(std::llround(pc.val_fraction * static_cast<double>(n)));
    if (pc.seen_test_fraction > 0.0 && n >= 2) n_test = std::max<std::size_t>(n_test, 1);
    n_test = std::min(n_test, n > 0 ? n - 1 : 0);
    n_val = std::min(n_val, n - n_test - (n > n_test ? 1 : 0));
    p.test_seen.insert(p.test_seen.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_test));
    p.val.insert(p.val.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_test),
                 rows.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
    p.train.insert(p.train.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), rows.end());
  }
  for (int c : b.unseen_classes) {
    auto rows = b.rows_of_class(c);
    p.test_unseen.insert(p.test_unseen.end(), rows.begin(), rows.end());
  }
  std::sort(p.train.begin(), p.train.end());
  std::sort(p.val.begin(), p.val.end());
  std::sort(p.test_seen.begin(), p.test_seen.end());
  std::sort(p.test_unseen.begin(), p.test_unseen.end());
  return p;
}

/// Few-shot seen / zero-shot unseen: keep exactly k training rows per seen
/// class. Test rows are untouched; validation is dropped because it would
/// add seen-class samples beyond the k-shot budget.
inline Partition subsample_fszu(const DatasetBundle& b, const Partition& p, std::size_t k, std::uint64_t seed) {
  if (k < 1) throw ConfigError("subsample_fszu: k must be >= 1");
  Partition out = p;
  out.train.clear();
  out.val.clear();
  for (int c : b.seen_classes) {
    std::vector<std::size_t> rows;
    for (auto r : p.train)
      if (b.labels[r] == c) rows.push_back(r);
    if (rows.size() < k)
      throw DataError("subsample_fszu: class " + std::to_string(c) + " has " + std::to_string(rows.size()) +
                      " training rows, fewer than k=" + std::to_string(k));
    Rng rng = make_rng(seed, {0xf52u, static_cast<std::uint64_t>(c)});
    shuffle(rows.begin(), rows.end(), rng);
    out.train.insert(out.train.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(k));
  }
  std::sort(out.train.begin(), out.train.end());
  return out;
}

// ---------------------------------------------------------------------------
// Source / target class split

struct SourceTargetSplit {
  std::vector<int> source_classes;
  std::vector<int> target_classes;
  std::uint64_t seed = 0;
};

/// n_target seen classes chosen uniformly as targets; the rest are sources.
inline SourceTargetSplit split_source_target(const DatasetBundle& b, std::size_t n_target, std::uint64_t seed) {
  const auto S = b.num_seen();
  if (n_target < 1 || n_target >= S)
    throw ConfigError("split_source_target: n_target=" + std::to_string(n_target) + " must be in [1, " +
                      std::to_string(S) + ")");
  std::vector<int> classes = b.seen_classes;
  Rng rng = make_rng(seed, {0x57});
  // partial Fisher-Yates: the first n_target slots become targets
  for (std::size_t i = 0; i < n_target; ++i) std::swap(classes[i], classes[i + uniform_index(rng, S - i)]);
  SourceTargetSplit split;
  split.seed = seed;
  split.target_classes.assign(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(n_target));
  split.source_classes.assign(classes.begin() + static_cast<std::ptrdiff_t>(n_target), classes.end());
  std::sort(split.target_classes.begin(), split.target_classes.end());
  std::sort(split.source_classes.begin(), split.source_classes.end());
  return split;
}

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  std::vector<std::size_t> rows;
  MatrixF features;
  std::vector<int> labels;
};

/// Rows of `candidates` whose label is in `class_filter`.
inline std::vector<std::size_t> filter_rows(const DatasetBundle& b, std::span<const std::size_t> candidates,
                                            std::span<const int> class_filter) {
  if (class_filter.empty()) throw DataError("batches: empty class filter");
  const std::set<int> allowed(class_filter.begin(), class_filter.end());
  std::vector<std::size_t> rows;
  for (auto r : candidates)
    if (allowed.count(b.labels[r])) rows.push_back(r);
  return rows;
}

/// One pass of shuffled minibatches over the filtered rows, last short batch
/// dropped. When fewer than n_b rows pass the filter the whole filtered set
/// forms a single batch, so few-shot training still sees data.
inline std::vector<std::vector<std::size_t>> batch_plan(std::vector<std::size_t> rows, std::size_t n_b,
                                                        std::uint64_t seed) {
  if (n_b < 1) throw ConfigError("batches: n_b must be >= 1");
  if (rows.empty()) throw DataError("batches: no rows match the class filter");
  Rng rng = make_rng(seed, {0xba7c});
  shuffle(rows.begin(), rows.end(), rng);
  std::vector<std::vector<std::size_t>> plan;
  if (rows.size() < n_b) {
    plan.push_back(std::move(rows));
    return plan;
  }
  for (std::size_t i = 0; i + n_b <= rows.size(); i += n_b)
    plan.emplace_back(rows.begin() + static_cast<std::ptrdiff_t>(i), rows.begin() + static_cast<std::ptrdiff_t>(i + n_b));
  return plan;
}

inline Batch make_batch(const DatasetBundle& b, std::vector<std::size_t> rows) {
  Batch out;
  out.features = gather_rows(b.features, rows);
  out.labels.reserve(rows.size());
  for (auto r : rows) out.labels.push_back(b.labels[r]);
  out.rows = std::move(rows);
  return out;
}

/// Single-pass iterator over minibatches; independent instances may iterate
/// the same bundle concurrently.
class BatchIterator {
 public:
  BatchIterator(const DatasetBundle& b, std::vector<std::vector<std::size_t>> plan) : b_(&b), plan_(std::move(plan)) {}

  bool done() const { return next_ >= plan_.size(); }
  std::size_t size() const { return plan_.size(); }
  Batch next() {
    if (done()) throw UsageError("BatchIterator: exhausted");
    return make_batch(*b_, plan_[next_++]);
  }

 private:
  const DatasetBundle* b_;
  std::vector<std::vector<std::size_t>> plan_;
  std::size_t next_ = 0;
};

inline BatchIterator batches(const DatasetBundle& b, std::span<const std::size_t> candidates,
                             std::span<const int> class_filter, std::size_t n_b, std::uint64_t seed) {
  return BatchIterator(b, batch_plan(filter_rows(b, candidates, class_filter), n_b, seed));
}

inline BatchIterator batches(const DatasetBundle& b, std::span<const int> class_filter, std::size_t n_b,
                             std::uint64_t seed) {
  std::vector<std::size_t> all(b.num_rows());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return batches(b, all, class_filter, n_b, seed);
}

/// Endless stream of batches: reshuffles with a fresh derived seed every
/// time a pass is exhausted.
class BatchStream {
 public:
  BatchStream(const DatasetBundle& b, std::vector<std::size_t> rows, std::size_t n_b, std::uint64_t seed)
      : b_(&b), rows_(std::move(rows)), n_b_(n_b), seed_(seed) {
    if (rows_.empty()) throw DataError("BatchStream: no rows");
  }

  std::vector<std::size_t> next_rows() {
    if (cursor_ >= plan_.size()) {
      plan_ = batch_plan(rows_, n_b_, derive_seed(seed_, {pass_++}));
      cursor_ = 0;
    }
    return plan_[cursor_++];
  }

  Batch next() { return make_batch(*b_, next_rows()); }

 private:
  const DatasetBundle* b_;
  std::vector<std::size_t> rows_;
  std::size_t n_b_;
  std::uint64_t seed_;
  std::uint64_t pass_ = 0;
  std::vector<std::vector<std::size_t>> plan_;
  std::size_t cursor_ = 0;
};

}  // namespace tdcss
