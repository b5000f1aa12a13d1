#pragma once

// GZSL evaluation: per-class top-1 accuracy, harmonic mean, linear probes,
// pseudo-sample geometry and a PCA export of latent vectors.

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tdcss/compat.hpp"
#include "tdcss/data.hpp"
#include "tdcss/model.hpp"

namespace tdcss {

struct ClassAccuracy {
  std::map<int, double> per_class;
  std::map<int, std::size_t> counts;
  double mean = 0.0;
};

/// Accuracy computed per class then averaged unweighted over `class_set`.
/// Rows whose label is outside `class_set` are ignored.
inline ClassAccuracy per_class_top1(std::span<const int> preds, std::span<const int> labels,
                                    std::span<const int> class_set) {
  if (preds.size() != labels.size())
    throw ShapeError("per_class_top1: " + std::to_string(preds.size()) + " predictions for " +
                     std::to_string(labels.size()) + " labels");
  if (class_set.empty()) throw MetricError("per_class_top1: empty class set");
  std::map<int, std::size_t> hits, counts;
  for (int c : class_set) counts[c] = 0, hits[c] = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = counts.find(labels[i]);
    if (it == counts.end()) continue;
    ++it->second;
    if (preds[i] == labels[i]) ++hits[labels[i]];
  }
  ClassAccuracy out;
  for (auto [c, n] : counts) {
    if (n == 0) throw MetricError("per_class_top1: class " + std::to_string(c) + " has no test samples");
    out.per_class[c] = static_cast<double>(hits[c]) / static_cast<double>(n);
    out.counts[c] = n;
    out.mean += out.per_class[c];
  }
  out.mean /= static_cast<double>(counts.size());
  return out;
}

/// H = 2us / (u + s), zero when both are zero.
inline double harmonic_mean(double u, double s) { return u + s == 0.0 ? 0.0 : 2.0 * u * s / (u + s); }

/// Fractions in [0,1]; rendered as percentages with one decimal.
struct Metrics {
  std::map<int, double> per_class_acc;
  std::map<int, std::size_t> n_evaluated;
  double u = 0.0;
  double s = 0.0;
  double H = 0.0;
};

inline Metrics metrics_from_predictions(std::span<const int> preds, std::span<const int> labels,
                                        std::span<const int> seen, std::span<const int> unseen) {
  const auto su = per_class_top1(preds, labels, seen);
  const auto uu = per_class_top1(preds, labels, unseen);
  Metrics m;
  m.per_class_acc = su.per_class;
  m.per_class_acc.insert(uu.per_class.begin(), uu.per_class.end());
  m.n_evaluated = su.counts;
  m.n_evaluated.insert(uu.counts.begin(), uu.counts.end());
  m.s = su.mean;
  m.u = uu.mean;
  m.H = harmonic_mean(m.u, m.s);
  return m;
}

/// Predictions over all classes for the given rows, in chunks.
template <class T>
std::vector<int> predict_rows(const Model<T>& model, const DatasetBundle& b, std::span<const std::size_t> rows) {
  const Matrix<T> sem = b.semantics.template cast<T>();
  std::vector<int> out;
  out.reserve(rows.size());
  constexpr std::size_t kChunk = 1024;
  for (std::size_t i = 0; i < rows.size(); i += kChunk) {
    const auto part = rows.subspan(i, std::min(kChunk, rows.size() - i));
    const Matrix<T> x = gather_rows(b.features, part).template cast<T>();
    const auto p = predict(x, sem, model.dis, model.head);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

/// u over unseen test rows, s over seen test rows, both predicted over the
/// joint label space.
template <class T>
Metrics evaluate_gzsl(const Model<T>& model, const DatasetBundle& b, const Partition& p) {
  std::vector<std::size_t> rows = p.test_seen;
  rows.insert(rows.end(), p.test_unseen.begin(), p.test_unseen.end());
  const auto preds = predict_rows(model, b, rows);
  std::vector<int> labels;
  for (auto r : rows) labels.push_back(b.labels[r]);
  return metrics_from_predictions(preds, labels, b.seen_classes, b.unseen_classes);
}

/// Seen-class ACA on validation rows, predicted over the joint label space.
/// Used for checkpoint selection; never touches unseen features.
template <class T>
double validation_score(const Model<T>& model, const DatasetBundle& b, const Partition& p) {
  if (p.val.empty()) return 0.0;
  const auto preds = predict_rows(model, b, p.val);
  std::vector<int> labels;
  for (auto r : p.val) labels.push_back(b.labels[r]);
  std::set<int> present(labels.begin(), labels.end());
  const std::vector<int> classes(present.begin(), present.end());
  return per_class_top1(preds, labels, classes).mean;
}

inline nlohmann::json metrics_json(const Metrics& m) {
  nlohmann::json per = nlohmann::json::object();
  for (auto [c, a] : m.per_class_acc) per[std::to_string(c)] = a;
  return {{"u", m.u}, {"s", m.s}, {"H", m.H}, {"per_class", per}};
}

inline std::string percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * fraction);
  return buf;
}

// ---------------------------------------------------------------------------
// Linear probe

/// Multinomial logistic regression on standardized features; returns the
/// per-class mean top-1 accuracy on the test rows.
inline double linear_probe_accuracy(const MatrixD& x_train, std::span<const int> y_train, const MatrixD& x_test,
                                    std::span<const int> y_test, std::uint64_t seed = 0, int iterations = 400,
                                    double lr = 0.05, double l2 = 1e-4) {
  if (x_train.rows() == 0 || x_test.rows() == 0) throw UsageError("linear_probe: empty split");
  std::set<int> cls(y_train.begin(), y_train.end());
  cls.insert(y_test.begin(), y_test.end());
  const std::vector<int> classes(cls.begin(), cls.end());
  auto to_col = [&](std::span<const int> y) {
    std::vector<int> c;
    for (int l : y) c.push_back(static_cast<int>(std::lower_bound(classes.begin(), classes.end(), l) - classes.begin()));
    return c;
  };
  const auto ytr = to_col(y_train), yte = to_col(y_test);
  const Eigen::RowVectorXd mu = x_train.colwise().mean();
  Eigen::RowVectorXd sd = ((x_train.rowwise() - mu).array().square().colwise().mean()).sqrt().matrix();
  for (Eigen::Index j = 0; j < sd.size(); ++j)
    if (sd(j) < 1e-8) sd(j) = 1.0;
  const MatrixD xtr = (x_train.rowwise() - mu).array().rowwise() / sd.array();
  const MatrixD xte = (x_test.rowwise() - mu).array().rowwise() / sd.array();

  Rng rng = make_rng(seed, {0x940be});
  auto probe = Mlp<double>::make({static_cast<std::size_t>(xtr.cols()), classes.size()}, Activation::identity,
                                 Activation::identity, rng);
  AdamState<double> st({lr, 0.9, 0.999, 1e-8}, std::as_const(probe).params());
  for (int it = 0; it < iterations; ++it) {
    MlpCache<double> cache;
    const auto logits = probe.forward(xtr, &cache);
    const auto ce = softmax_ce<double>(logits, ytr);
    auto g = probe.zero_grads();
    probe.backward(ce.grad, cache, &g);
    g[0] += l2 * probe.layers[0].weight;
    adam_step(probe, g, st);
  }
  const auto preds = argmax_rows(probe.forward(xte));
  std::vector<int> all(classes.size());
  std::iota(all.begin(), all.end(), 0);
  std::set<int> present(yte.begin(), yte.end());
  const std::vector<int> test_classes(present.begin(), present.end());
  return per_class_top1(preds, yte, test_classes).mean;
}

struct ProbeGap {
  double cor = 0.0;
  double ind = 0.0;
};

/// Linear-probe accuracy of h_cor and h_ind over the seen classes: fit on
/// training rows, score on seen test rows.
template <class T>
ProbeGap latent_probe(const Model<T>& model, const DatasetBundle& b, const Partition& p, std::uint64_t seed = 0) {
  auto latents = [&](std::span<const std::size_t> rows) {
    return encode(Matrix<T>(gather_rows(b.features, rows).template cast<T>()), model.dis);
  };
  const auto tr = latents(p.train);
  const auto te = latents(p.test_seen);
  std::vector<int> ytr, yte;
  for (auto r : p.train) ytr.push_back(b.labels[r]);
  for (auto r : p.test_seen) yte.push_back(b.labels[r]);
  ProbeGap g;
  g.cor = linear_probe_accuracy(tr.h_cor.template cast<double>(), ytr, te.h_cor.template cast<double>(), yte, seed);
  g.ind = linear_probe_accuracy(tr.h_ind.template cast<double>(), ytr, te.h_ind.template cast<double>(), yte, seed);
  return g;
}

// ---------------------------------------------------------------------------
// Pseudo-sample geometry and embedding export

template <class T>
struct PseudoSet {
  PseudoBatch<T> center;
  PseudoBatch<T> edge;
};

/// Center and edge pseudo samples toward the unseen classes, synthesized
/// from seen training rows with the stage-2 pairing (seen sources).
template <class T>
PseudoSet<T> synthesize_unseen(const Model<T>& model, const DatasetBundle& b, const Partition& p, std::size_t count,
                               double edge_epsilon, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0xe6be});
  std::vector<std::size_t> rows = p.train;
  shuffle(rows.begin(), rows.end(), rng);
  rows.resize(std::min(rows.size(), count));
  const Matrix<T> x = gather_rows(b.features, rows).template cast<T>();
  const Matrix<T> h = encode(x, model.dis).h_cor;
  std::vector<int> labels;
  for (auto r : rows) labels.push_back(b.labels[r]);
  const Matrix<T> sem = b.semantics.template cast<T>();
  const auto pairing = draw_pairing(rows.size(), rows.size(), b.unseen_classes, rng);
  PseudoSet<T> out;
  out.center = synth_center(h, labels, pairing, sem, b.seen_classes, b.unseen_classes, model.center);
  if (!model.edges.empty())
    out.edge = synth_edge(h, labels, pairing, sem, b.seen_classes, b.unseen_classes, model.edges, 0, edge_epsilon);
  return out;
}

struct PseudoGeometry {
  double center_distance = 0.0;  // mean distance of center samples to their target's real centroid
  double edge_distance = 0.0;
};

template <class T>
PseudoGeometry pseudo_geometry(const Model<T>& model, const DatasetBundle& b, const Partition& p,
                               double edge_epsilon, std::uint64_t seed, std::size_t count = 512) {
  std::map<int, Eigen::Matrix<T, 1, Eigen::Dynamic>> centroid;
  for (int c : b.unseen_classes) {
    std::vector<std::size_t> rows;
    for (auto r : p.test_unseen)
      if (b.labels[r] == c) rows.push_back(r);
    if (rows.empty()) throw MetricError("pseudo_geometry: unseen class " + std::to_string(c) + " has no rows");
    const Matrix<T> h = encode(Matrix<T>(gather_rows(b.features, rows).template cast<T>()), model.dis).h_cor;
    centroid[c] = h.colwise().mean();
  }
  const auto ps = synthesize_unseen(model, b, p, count, edge_epsilon, seed);
  auto mean_dist = [&](const PseudoBatch<T>& pb) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < pb.h.rows(); ++i)
      total += static_cast<double>((pb.h.row(i) - centroid[pb.target_classes[static_cast<std::size_t>(i)]]).norm());
    return total / static_cast<double>(pb.h.rows());
  };
  PseudoGeometry g;
  g.center_distance = mean_dist(ps.center);
  if (ps.edge.h.rows() > 0) g.edge_distance = mean_dist(ps.edge);
  return g;
}

/// Projection onto the top two principal components. Signs are fixed so the
/// largest-magnitude loading of each component is positive.
inline MatrixD pca_2d(const MatrixD& x) {
  if (x.rows() < 3) throw UsageError("pca_2d: need at least 3 samples, got " + std::to_string(x.rows()));
  const MatrixD centered = x.rowwise() - x.colwise().mean();
  const MatrixD cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<MatrixD> es(cov);
  const auto d = cov.cols();
  MatrixD basis(d, 2);
  for (int k = 0; k < 2; ++k) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(d);
    if (k < d) v = es.eigenvectors().col(d - 1 - k);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    basis.col(k) = v;
  }
  return centered * basis;
}

struct EmbeddingRow {
  int class_id;
  std::string kind;  // real, center, edge, h_ind
  double pc1, pc2;
};

/// Pools real h_cor and h_ind of the test rows with center and edge pseudo
/// samples toward the unseen classes, projects them with PCA and writes
/// `class,kind,pc1,pc2`. A non-empty `comment` is written first as a `#` line.
template <class T>
std::vector<EmbeddingRow> export_embeddings_2d(const Model<T>& model, const DatasetBundle& b, const Partition& p,
                                               const std::string& path, double edge_epsilon, std::uint64_t seed,
                                               std::size_t pseudo_count = 256, const std::string& comment = "") {
  std::vector<std::size_t> rows = p.test_seen;
  rows.insert(rows.end(), p.test_unseen.begin(), p.test_unseen.end());
  const auto lat = encode(Matrix<T>(gather_rows(b.features, rows).template cast<T>()), model.dis);
  const auto ps = synthesize_unseen(model, b, p, pseudo_count, edge_epsilon, seed);
  std::vector<Matrix<T>> blocks{lat.h_cor, lat.h_ind, ps.center.h};
  std::vector<EmbeddingRow> out;
  for (auto r : rows) out.push_back({b.labels[r], "real", 0, 0});
  for (auto r : rows) out.push_back({b.labels[r], "h_ind", 0, 0});
  for (int c : ps.center.target_classes) out.push_back({c, "center", 0, 0});
  if (ps.edge.h.rows() > 0) {
    blocks.push_back(ps.edge.h);
    for (int c : ps.edge.target_classes) out.push_back({c, "edge", 0, 0});
  }
  Eigen::Index total = 0;
  for (const auto& m : blocks) total += m.rows();
  MatrixD pooled(total, lat.h_cor.cols());
  Eigen::Index at = 0;
  for (const auto& m : blocks) {
    pooled.middleRows(at, m.rows()) = m.template cast<double>();
    at += m.rows();
  }
  const MatrixD proj = pca_2d(pooled);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].pc1 = proj(static_cast<Eigen::Index>(i), 0);
    out[i].pc2 = proj(static_cast<Eigen::Index>(i), 1);
  }
  std::ofstream f(path);
  if (!f) throw UsageError("export_embeddings_2d: cannot open '" + path + "'");
  if (!comment.empty()) f << "# " << comment << '\n';
  f << "class,kind,pc1,pc2\n";
  f.precision(9);
  for (const auto& e : out) f << e.class_id << ',' << e.kind << ',' << e.pc1 << ',' << e.pc2 << '\n';
  return out;
}

}  // namespace tdcss
