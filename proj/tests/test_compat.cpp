#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "tdcss/compat.hpp"
#include "tdcss/model.hpp"
#include "test_util.hpp"

using namespace tdcss;
using tdcss::testing::jitter_biases;
using tdcss::testing::random_matrix;
using tdcss::testing::tiny_dims;

namespace {

CompatHead<double> identity_head(std::size_t d) {
  CompatHead<double> h;
  h.net = Mlp<double>({DenseLayer<double>(MatrixD::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d)),
                                          MatrixD::Zero(1, static_cast<Eigen::Index>(d)), Activation::identity)});
  return h;
}

CompatHead<double> random_head(std::uint64_t seed) {
  auto m = Model<double>::init(tiny_dims(), seed);
  jitter_biases(m.head.net, seed + 1);
  return m.head;
}

std::vector<int> iota_ids(int n, int from = 0) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), from);
  return v;
}

}  // namespace

TEST(CompatScores, IdentityHeadPicksCoordinates) {
  const auto head = identity_head(5);
  const MatrixD h = random_matrix<double>(4, 5, 1);
  const MatrixD table = MatrixD::Identity(3, 5);
  const auto s = compat_scores(h, table, iota_ids(3), head);
  EXPECT_EQ(s.scores, h.leftCols(3));
}

TEST(CompatScores, LinearInSemantics) {
  const auto head = random_head(2);
  const MatrixD h = random_matrix<double>(4, 5, 3);
  const MatrixD table = random_matrix<double>(6, 4, 4);
  const auto a = compat_scores(h, table, iota_ids(6), head);
  const auto b = compat_scores(h, MatrixD(2.5 * table), iota_ids(6), head);
  EXPECT_LE((b.scores - 2.5 * a.scores).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CompatScores, MatchesNaiveLoop) {
  const auto head = random_head(5);
  const MatrixD h = random_matrix<double>(7, 5, 6);
  const MatrixD table = random_matrix<double>(9, 4, 7);
  const auto s = compat_scores(h, table, iota_ids(9, 10), head);
  const MatrixD phi = head.net.forward(h);
  for (int i = 0; i < 7; ++i)
    for (int k = 0; k < 9; ++k) {
      double dot = 0;
      for (int j = 0; j < 4; ++j) dot += phi(i, j) * table(k, j);
      EXPECT_NEAR(s.scores(i, k), dot, 1e-6);
    }
  EXPECT_EQ(s.column_of(13), 3);
  EXPECT_EQ(s.column_of(2), -1);
}

TEST(CompatScores, ShapeErrors) {
  const auto head = random_head(1);
  EXPECT_THROW(compat_scores(MatrixD(MatrixD::Zero(2, 4)), MatrixD(MatrixD::Zero(3, 4)), iota_ids(3), head), ShapeError);
  EXPECT_THROW(compat_scores(MatrixD(MatrixD::Zero(2, 5)), MatrixD(MatrixD::Zero(3, 3)), iota_ids(3), head), ShapeError);
  EXPECT_THROW(compat_scores(MatrixD(MatrixD::Zero(2, 5)), MatrixD(MatrixD::Zero(3, 4)), iota_ids(2), head), ShapeError);
}

TEST(CompatCe, UniformSaturatedAndLabelErrors) {
  ScoreMatrix<double> u{MatrixD::Zero(2, 3), {4, 7, 9}};
  EXPECT_NEAR(compat_ce_loss(u, std::vector<int>{7, 9}).loss, std::log(3.0), 1e-12);
  ScoreMatrix<double> sat{MatrixD::Zero(1, 3), {4, 7, 9}};
  sat.scores(0, 1) = 60;
  EXPECT_LT(compat_ce_loss(sat, std::vector<int>{7}).loss, 1e-20);
  EXPECT_THROW(compat_ce_loss(u, std::vector<int>{7, 5}), RangeError);
}

TEST(CompatCe, GradientThroughHead) {
  auto head = random_head(8);
  const MatrixD h = random_matrix<double>(6, 5, 9);
  const MatrixD table = random_matrix<double>(5, 4, 10);
  const std::vector<int> labels{0, 1, 4, 3, 2, 0};
  auto loss = [&] { return compat_ce_loss(compat_scores(h, table, iota_ids(5), head), labels).loss; };
  CompatCache<double> cache;
  const auto s = compat_scores(h, table, iota_ids(5), head, &cache);
  auto g = head.net.zero_grads();
  const MatrixD gh = compat_scores_backward<double>(compat_ce_loss(s, labels).grad, head, cache, &g);
  EXPECT_LE(grad_check(loss, head.net.params(), g), 1e-4);
  MatrixD hv = h;
  auto loss_h = [&] { return compat_ce_loss(compat_scores(hv, table, iota_ids(5), head), labels).loss; };
  EXPECT_LE(grad_check(loss_h, {&hv}, {gh}), 1e-4);
}

TEST(SoftLabels, NearZeroTemperatureIsOneHot) {
  MatrixD src(3, 3);
  src << 1, 0, 0, 0, 1, 0, 0, 0, 1;
  const MatrixD tgt = src.row(1);
  const auto p = soft_labels(src, tgt, 1e-3);
  EXPECT_NEAR(p(0, 1), 1.0, 1e-12);
  EXPECT_NEAR(p(0, 0), 0.0, 1e-12);
}

TEST(SoftLabels, SymmetricRowsShareWeight) {
  MatrixD src(2, 2);
  src << 1, 0, 0, 1;
  MatrixD tgt(1, 2);
  tgt << 1, 1;
  const auto p = soft_labels(src, tgt);
  EXPECT_NEAR(p(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(p(0, 1), 0.5, 1e-15);
  const auto lin = soft_labels(src, tgt, 1.0, SoftLabelMode::linear);
  EXPECT_NEAR(lin(0, 0), 0.5, 1e-15);
}

TEST(SoftLabels, ThreeClassCosines) {
  // cosines 1.0, 0.5, 0.0 against target (1, 0)
  MatrixD src(3, 2);
  src << 2, 0, 0.5, std::sqrt(0.75), 0, 3;
  MatrixD tgt(1, 2);
  tgt << 1, 0;
  const auto p = soft_labels(src, tgt, 1.0);
  EXPECT_NEAR(p(0, 0), 0.506480391055654, 1e-12);
  EXPECT_NEAR(p(0, 1), 0.3071958857184984, 1e-12);
  EXPECT_NEAR(p(0, 2), 0.18632372322584756, 1e-12);
  const auto lin = soft_labels(src, tgt, 1.0, SoftLabelMode::linear);
  EXPECT_NEAR(lin(0, 0), 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(lin(0, 2), 0.0, 1e-12);
}

TEST(SoftLabels, Errors) {
  MatrixD src = MatrixD::Identity(2, 2);
  EXPECT_THROW(soft_labels(src, MatrixD(MatrixD::Zero(1, 2))), DataError);
  EXPECT_THROW(soft_labels(src, MatrixD(MatrixD::Ones(1, 2)), 0.0), ConfigError);
  EXPECT_THROW(soft_labels(src, MatrixD(MatrixD::Ones(1, 3))), ShapeError);
}

TEST(Transfer, OwnSoftmaxGivesEntropy) {
  ScoreMatrix<double> s{random_matrix<double>(3, 4, 2), {0, 1, 2, 3}};
  const MatrixD p = softmax_rows(s.scores);
  double entropy = 0;
  for (Eigen::Index i = 0; i < 3; ++i)
    for (Eigen::Index k = 0; k < 4; ++k) entropy -= p(i, k) * std::log(p(i, k));
  const auto r = transfer_loss(s, p);
  EXPECT_NEAR(r.loss, entropy / 3.0, 1e-12);
  EXPECT_LE(r.grad.cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Transfer, OneHotMatchesHardCe) {
  ScoreMatrix<double> s{random_matrix<double>(3, 4, 5), {10, 11, 12, 13}};
  const std::vector<int> labels{11, 13, 10};
  const MatrixD oh = one_hot<double>(std::vector<int>{1, 3, 0}, 4);
  EXPECT_EQ(transfer_loss(s, oh).loss, compat_ce_loss(s, labels).loss);
}

TEST(Transfer, Gradient) {
  MatrixD sc = random_matrix<double>(4, 5, 6);
  MatrixD soft = softmax_rows(MatrixD(random_matrix<double>(4, 5, 7)));
  auto loss = [&] { return transfer_loss(ScoreMatrix<double>{sc, iota_ids(5)}, soft).loss; };
  const auto r = transfer_loss(ScoreMatrix<double>{sc, iota_ids(5)}, soft);
  EXPECT_LE(grad_check(loss, {&sc}, {r.grad}), 1e-4);
}

TEST(Predict, OneHotSemanticsPickMaxCoordinate) {
  // encoder output equals the input when the nets are identities
  DisentangleNets<double> nets;
  auto id = [](Eigen::Index d) {
    return Mlp<double>({DenseLayer<double>(MatrixD::Identity(d, d), MatrixD::Zero(1, d), Activation::identity)});
  };
  nets.extractor = id(4);
  nets.cor = id(4);
  nets.ind = id(4);
  const auto head = identity_head(4);
  MatrixD x(3, 4);
  x << 1, 5, 2, 0, 9, 1, 1, 1, -1, -2, -3, 0;
  const MatrixD sem = MatrixD::Identity(4, 4);
  EXPECT_EQ(predict(x, sem, nets, head), (std::vector<int>{1, 0, 3}));
  EXPECT_EQ(predict(x, MatrixD(7.0 * sem), nets, head), (std::vector<int>{1, 0, 3}));
}

TEST(Predict, MatchesBruteForceOverAllClasses) {
  auto m = Model<double>::init(tiny_dims(), 4);
  for (auto& [n, net] : m.groups()) jitter_biases(*net, 9);
  const MatrixD x = random_matrix<double>(100, 6, 11);
  const MatrixD sem = random_matrix<double>(16, 4, 12);
  const auto pred = predict(x, sem, m.dis, m.head);
  const MatrixD phi = project(x, m.dis, m.head);
  for (int i = 0; i < 100; ++i) {
    int best = 0;
    double best_score = -1e300;
    for (int k = 0; k < 16; ++k) {
      const double s = phi.row(i).dot(sem.row(k));
      if (s > best_score) {
        best_score = s;
        best = k;
      }
    }
    EXPECT_EQ(pred[static_cast<std::size_t>(i)], best);
  }
}

TEST(Predict, TiesGoToLowestColumn) {
  EXPECT_EQ(argmax_rows(MatrixD(MatrixD::Ones(2, 3))), (std::vector<int>{0, 0}));
}
