#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "tdcss/eval.hpp"
#include "test_util.hpp"

using namespace tdcss;
using tdcss::testing::random_matrix;
using tdcss::testing::TempDir;

namespace {

Mlp<float> identity_net(Eigen::Index d) {
  return Mlp<float>({DenseLayer<float>(MatrixF::Identity(d, d), MatrixF::Zero(1, d), Activation::identity)});
}

// Features are one-hot class indicators; every net is the identity, so the
// model predicts the class whose one-hot the feature equals.
struct OracleSetup {
  DatasetBundle b;
  Model<float> m;
  Partition p;

  OracleSetup() {
    const int C = 5, per = 6;
    b.features = MatrixF::Zero(C * per, C);
    for (int i = 0; i < C * per; ++i) {
      b.labels.push_back(i / per);
      b.features(i, i / per) = 1;
    }
    b.semantics = MatrixF::Identity(C, C);
    b.seen_classes = {0, 1, 2};
    b.unseen_classes = {3, 4};
    m.dis.extractor = identity_net(C);
    m.dis.cor = identity_net(C);
    m.dis.ind = identity_net(C);
    m.head.net = identity_net(C);
    p = make_partition(b, {0.5, 0.0}, 0);
  }
};

}  // namespace

TEST(PerClass, PerfectAndUnweighted) {
  const std::vector<int> labels{0, 0, 1, 2};
  const auto all = per_class_top1(labels, labels, std::vector<int>{0, 1, 2});
  EXPECT_EQ(all.mean, 1.0);
  for (auto [c, a] : all.per_class) EXPECT_EQ(a, 1.0);

  std::vector<int> l, p;
  for (int i = 0; i < 10; ++i) l.push_back(0), p.push_back(0);
  for (int i = 0; i < 1000; ++i) l.push_back(1), p.push_back(0);
  EXPECT_DOUBLE_EQ(per_class_top1(p, l, std::vector<int>{0, 1}).mean, 0.5);
}

TEST(PerClass, RandomPredictorNearChance) {
  Rng rng(3);
  const int C = 16, n = 10000;
  std::vector<int> l(n), p(n);
  for (int i = 0; i < n; ++i) {
    l[static_cast<std::size_t>(i)] = static_cast<int>(uniform_index(rng, C));
    p[static_cast<std::size_t>(i)] = static_cast<int>(uniform_index(rng, C));
  }
  std::vector<int> classes(C);
  std::iota(classes.begin(), classes.end(), 0);
  const double sigma = std::sqrt((1.0 / C) * (1 - 1.0 / C) / n);
  EXPECT_NEAR(per_class_top1(p, l, classes).mean, 1.0 / C, 3 * sigma);
}

TEST(PerClass, Errors) {
  const std::vector<int> l{0, 1};
  EXPECT_THROW(per_class_top1(l, std::vector<int>{0}, std::vector<int>{0}), ShapeError);
  EXPECT_THROW(per_class_top1(l, l, std::vector<int>{}), MetricError);
  EXPECT_THROW(per_class_top1(l, l, std::vector<int>{0, 5}), MetricError);
}

TEST(HarmonicMean, ReferenceRows) {
  EXPECT_EQ(percent(harmonic_mean(0.592, 0.749)), "66.1");
  // 54.1 / 85.1 gives 66.148, printed as 66.2: only reachable from the
  // unrounded accuracies, which lie within 0.05 of the printed ones.
  EXPECT_EQ(percent(harmonic_mean(0.541, 0.851)), "66.1");
  EXPECT_EQ(percent(harmonic_mean(0.5415, 0.8515)), "66.2");
  EXPECT_DOUBLE_EQ(harmonic_mean(0.37, 0.37), 0.37);
  EXPECT_EQ(harmonic_mean(0.0, 0.0), 0.0);
  EXPECT_EQ(harmonic_mean(0.0, 0.9), 0.0);
}

TEST(Metrics, ConfusionMatrixFixture) {
  std::vector<int> labels, preds;
  for (int i = 0; i < 200; ++i) {
    const int l = (i * 5 + i / 7) % 8;
    labels.push_back(l);
    preds.push_back((i * i * 13 + 7 * i) % 17 < 9 + (l % 3) ? l : (i * i + 3) % 8);
  }
  const auto m = metrics_from_predictions(preds, labels, std::vector<int>{0, 1, 2, 3, 4, 5}, std::vector<int>{6, 7});
  EXPECT_NEAR(m.s, 0.7311165845648605, 1e-12);
  EXPECT_NEAR(m.u, 0.6369047619047619, 1e-12);
  EXPECT_NEAR(m.H, 0.6807666202264852, 1e-12);
  EXPECT_EQ(m.n_evaluated.at(3), 14u);
  const auto j = metrics_json(m);
  EXPECT_DOUBLE_EQ(j["H"].get<double>(), m.H);
  EXPECT_EQ(j["per_class"].size(), 8u);
}

TEST(EvaluateGzsl, OracleModelIsPerfect) {
  OracleSetup o;
  const auto m = evaluate_gzsl(o.m, o.b, o.p);
  EXPECT_EQ(m.u, 1.0);
  EXPECT_EQ(m.s, 1.0);
  EXPECT_EQ(m.H, 1.0);
  EXPECT_EQ(validation_score(o.m, o.b, o.p), 0.0);  // no validation rows
}

TEST(EvaluateGzsl, NeverPredictingUnseenGivesZeroH) {
  OracleSetup o;
  // unseen semantic rows scored far below every seen row
  o.b.semantics.row(3) *= -1e6f;
  o.b.semantics.row(4) *= -1e6f;
  for (auto r : o.p.test_unseen) o.b.features(static_cast<Eigen::Index>(r), 0) = 1;
  const auto m = evaluate_gzsl(o.m, o.b, o.p);
  EXPECT_EQ(m.u, 0.0);
  EXPECT_EQ(m.H, 0.0);
  EXPECT_EQ(m.s, 1.0);
}

TEST(Probe, SeparableBeatsNoise) {
  Rng rng(1);
  const int n = 400, C = 4;
  MatrixD sig(n, 3), noise(n, 3);
  std::vector<int> y(n);
  for (int i = 0; i < n; ++i) {
    y[static_cast<std::size_t>(i)] = i % C;
    for (int j = 0; j < 3; ++j) {
      sig(i, j) = (j == i % C ? 3.0 : 0.0) + (i % C == 3 ? -2.0 : 0.0) + 0.3 * standard_normal(rng);
      noise(i, j) = standard_normal(rng);
    }
  }
  std::vector<std::size_t> tr, te;
  for (std::size_t i = 0; i < n; ++i) (i < 300 ? tr : te).push_back(i);
  std::vector<int> ytr(y.begin(), y.begin() + 300), yte(y.begin() + 300, y.end());
  EXPECT_GE(linear_probe_accuracy(gather_rows(sig, tr), ytr, gather_rows(sig, te), yte), 0.95);
  EXPECT_LE(linear_probe_accuracy(gather_rows(noise, tr), ytr, gather_rows(noise, te), yte), 0.45);
}

TEST(Pca, TwoDimensionalDataIsIsometric) {
  const MatrixD x = random_matrix<double>(30, 2, 4, 2.0);
  const MatrixD y = pca_2d(x);
  for (int i = 0; i < 30; ++i)
    for (int j = 0; j < 30; ++j) EXPECT_NEAR((x.row(i) - x.row(j)).norm(), (y.row(i) - y.row(j)).norm(), 1e-9);
}

TEST(Pca, VarianceOrdering) {
  MatrixD x = random_matrix<double>(100, 5, 6);
  x.col(2) *= 5;
  const MatrixD y = pca_2d(x);
  const auto var = [](const Eigen::VectorXd& v) { return (v.array() - v.mean()).square().sum(); };
  EXPECT_GE(var(y.col(0)), var(y.col(1)));
  EXPECT_THROW(pca_2d(MatrixD(MatrixD::Zero(2, 3))), UsageError);
}

TEST(Export, RowCountsAndFile) {
  SynthConfig c;
  c.num_seen = 4;
  c.num_unseen = 2;
  c.feature_dim = 12;
  c.semantic_dim = 5;
  c.task_signal_dim = 4;
  c.nuisance_dim = 4;
  c.samples_per_class = 10;
  const auto b = generate_synthetic(c);
  const auto p = make_partition(b, {}, 0);
  const auto m = Model<float>::init(ModelDims::desk(12, 5), 1);
  TempDir dir("export");
  const auto rows = export_embeddings_2d(m, b, p, dir.file("e.csv"), 0.5, 0, 16);
  const std::size_t test_rows = p.test_seen.size() + p.test_unseen.size();
  EXPECT_EQ(rows.size(), 2 * test_rows + 2 * 16);
  std::ifstream f(dir.file("e.csv"));
  std::string line;
  std::size_t lines = 0;
  std::getline(f, line);
  EXPECT_EQ(line, "class,kind,pc1,pc2");
  while (std::getline(f, line)) ++lines;
  EXPECT_EQ(lines, rows.size());
}

TEST(Geometry, ZeroOffsetsMeasureRealSpread) {
  SynthConfig c;
  c.num_seen = 4;
  c.num_unseen = 2;
  c.feature_dim = 12;
  c.semantic_dim = 5;
  c.task_signal_dim = 4;
  c.nuisance_dim = 4;
  c.samples_per_class = 20;
  const auto b = generate_synthetic(c);
  const auto p = make_partition(b, {}, 0);
  auto m = Model<float>::init(ModelDims::desk(12, 5), 2);
  for (auto* w : m.center.net.params()) w->setZero();
  for (auto& e : m.edges)
    for (auto* w : e.net.params()) w->setZero();
  const auto g = pseudo_geometry(m, b, p, 0.5, 0, 64);
  // identical pseudo samples: both kinds sit at the same distance
  EXPECT_DOUBLE_EQ(g.center_distance, g.edge_distance);
  EXPECT_GT(g.center_distance, 0.0);
}
