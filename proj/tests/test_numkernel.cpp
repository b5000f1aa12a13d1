#include <gtest/gtest.h>

#include <cmath>

#include "tdcss/numkernel.hpp"
#include "test_util.hpp"

using namespace tdcss;
using tdcss::testing::random_matrix;

namespace {

// Plain triple loop; independent of Eigen's products.
MatrixD naive_dense(const MatrixD& x, const DenseLayer<double>& l) {
  MatrixD out(x.rows(), l.weight.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < l.weight.cols(); ++j) {
      double s = l.bias(0, j);
      for (Eigen::Index k = 0; k < x.cols(); ++k) s += x(i, k) * l.weight(k, j);
      switch (l.activation()) {
        case Activation::identity: break;
        case Activation::relu: s = s > 0 ? s : 0; break;
        case Activation::leaky_relu: s = s > 0 ? s : 0.2 * s; break;
      }
      out(i, j) = s;
    }
  return out;
}

}  // namespace

TEST(Dense, ForwardMatchesLoopOracle) {
  Rng rng(3);
  for (auto act : {Activation::identity, Activation::relu, Activation::leaky_relu}) {
    auto layer = DenseLayer<double>::glorot(7, 5, act, rng);
    layer.bias = random_matrix<double>(1, 5, 11);
    const MatrixD x = random_matrix<double>(9, 7, 12);
    const MatrixD got = dense_forward(x, layer);
    const MatrixD want = naive_dense(x, layer);
    EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-12) << activation_name(act);
  }
}

TEST(Dense, ShapeMismatchThrowsShapeError) {
  Rng rng(0);
  auto layer = DenseLayer<double>::glorot(4, 3, Activation::relu, rng);
  EXPECT_THROW(dense_forward(MatrixD(2, 5), layer), ShapeError);
  EXPECT_THROW(DenseLayer<double>(MatrixD::Zero(4, 3), MatrixD::Zero(1, 2), Activation::relu), ShapeError);
}

TEST(Dense, BackwardWithoutForwardThrows) {
  Rng rng(0);
  auto layer = DenseLayer<double>::glorot(4, 3, Activation::relu, rng);
  DenseCache<double> empty;
  EXPECT_THROW(dense_backward(MatrixD(MatrixD::Zero(2, 3)), layer, empty), UsageError);
}

TEST(Dense, GlorotRangeAndZeroBias) {
  Rng rng(5);
  auto layer = DenseLayer<float>::glorot(30, 20, Activation::relu, rng);
  const double limit = std::sqrt(6.0 / 50.0);
  EXPECT_LE(layer.weight.cwiseAbs().maxCoeff(), limit);
  EXPECT_EQ(layer.bias.cwiseAbs().maxCoeff(), 0.0f);
}

TEST(Dense, NonFiniteOutputIsNumericError) {
  Rng rng(0);
  auto layer = DenseLayer<double>::glorot(2, 2, Activation::identity, rng);
  MatrixD x(1, 2);
  x << std::numeric_limits<double>::infinity(), 1.0;
  EXPECT_THROW(dense_forward(x, layer), NumericError);
}

TEST(Mlp, TwoLayerGradientsMatchFiniteDifferences) {
  for (auto act : {Activation::relu, Activation::leaky_relu}) {
    Rng rng(17);
    auto net = Mlp<double>::make({6, 11, 4}, act, Activation::identity, rng);
    tdcss::testing::jitter_biases(net, 2);
    const MatrixD x = random_matrix<double>(5, 6, 4);
    const MatrixD target = random_matrix<double>(5, 4, 5);
    auto loss = [&] { return 0.5 * (net.forward(x) - target).squaredNorm(); };
    MlpCache<double> cache;
    const MatrixD y = net.forward(x, &cache);
    auto grads = net.zero_grads();
    net.backward(y - target, cache, &grads);
    EXPECT_LE(grad_check(loss, net.params(), grads), 1e-4) << activation_name(act);
  }
}

TEST(Mlp, BackwardReturnsInputGradient) {
  Rng rng(8);
  auto net = Mlp<double>::make({3, 5, 2}, Activation::relu, Activation::identity, rng);
  tdcss::testing::jitter_biases(net, 3);
  MatrixD x = random_matrix<double>(4, 3, 9);
  MlpCache<double> cache;
  const MatrixD y = net.forward(x, &cache);
  const MatrixD gx = net.backward(y, cache, nullptr);
  auto loss = [&] { return 0.5 * net.forward(x).squaredNorm(); };
  std::vector<MatrixD*> ps{&x};
  EXPECT_LE(grad_check(loss, ps, {gx}), 1e-4);
}

TEST(Mlp, CastPreservesValues) {
  Rng rng(1);
  auto net = Mlp<float>::make({4, 3, 2}, Activation::relu, Activation::identity, rng);
  const auto d = net.cast<double>();
  EXPECT_EQ(d.num_params(), net.num_params());
  EXPECT_EQ(d.layers[1].weight.cast<float>(), net.layers[1].weight);
}

TEST(Softmax, UniformLogitsGiveLogC) {
  const MatrixD logits = MatrixD::Constant(4, 3, 0.7);
  const std::vector<int> labels{0, 1, 2, 1};
  EXPECT_NEAR(softmax_ce<double>(logits, labels).loss, std::log(3.0), 1e-12);
}

TEST(Softmax, SaturatedCorrectClassNearZero) {
  MatrixD logits = MatrixD::Zero(2, 3);
  logits(0, 1) = 60;
  logits(1, 2) = 60;
  EXPECT_LT(softmax_ce<double>(logits, std::vector<int>{1, 2}).loss, 1e-20);
}

TEST(Softmax, LargeLogitsStayFinite) {
  MatrixD logits(1, 2);
  logits << 1e4, -1e4;
  auto r = softmax_ce<double>(logits, std::vector<int>{1});
  EXPECT_NEAR(r.loss, 2e4, 1e-6);
  EXPECT_TRUE(r.grad.allFinite());
}

TEST(Softmax, OneHotSoftTargetIsBitwiseHardLabel) {
  const MatrixD logits = random_matrix<double>(6, 5, 21);
  const std::vector<int> labels{0, 4, 2, 2, 1, 3};
  const auto hard = softmax_ce<double>(logits, labels);
  const auto soft = softmax_ce_soft<double>(logits, one_hot<double>(labels, 5));
  EXPECT_EQ(hard.loss, soft.loss);
  EXPECT_EQ(hard.grad, soft.grad);
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  MatrixD logits = random_matrix<double>(4, 5, 2);
  MatrixD targets = random_matrix<double>(4, 5, 3).cwiseAbs();
  for (Eigen::Index i = 0; i < 4; ++i) targets.row(i) /= targets.row(i).sum();
  const auto r = softmax_ce_soft<double>(logits, targets);
  auto loss = [&] { return softmax_ce_soft<double>(logits, targets).loss; };
  EXPECT_LE(grad_check(loss, {&logits}, {r.grad}), 1e-4);
}

TEST(Softmax, RejectsBadTargetsAndLabels) {
  const MatrixD logits = MatrixD::Zero(2, 3);
  EXPECT_THROW(softmax_ce<double>(logits, std::vector<int>{0, 3}), RangeError);
  EXPECT_THROW(softmax_ce<double>(logits, std::vector<int>{0}), ShapeError);
  EXPECT_THROW(softmax_ce_soft<double>(logits, MatrixD::Constant(2, 3, 0.5)), UsageError);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  // After one step the bias-corrected moments are g and g^2, so the update
  // is lr * g / (|g| + eps).
  MatrixD p(1, 3);
  p << 1.0, -2.0, 0.5;
  MatrixD g(1, 3);
  g << 0.3, -4.0, 1e-3;
  AdamState<double> st(AdamHyper{}, std::vector<const MatrixD*>{&p});
  const MatrixD before = p;
  adam_step<double>({&p}, {g}, st);
  for (int j = 0; j < 3; ++j) {
    const double want = before(0, j) - 2e-4 * g(0, j) / (std::abs(g(0, j)) + 1e-8);
    EXPECT_NEAR(p(0, j), want, 1e-15);
  }
  EXPECT_EQ(st.t, 1);
}

TEST(Adam, SecondStepMatchesHandRecursion) {
  MatrixD p = MatrixD::Constant(1, 1, 0.0);
  AdamState<double> st(AdamHyper{0.1, 0.9, 0.999, 1e-8}, std::vector<const MatrixD*>{&p});
  adam_step<double>({&p}, {MatrixD::Constant(1, 1, 1.0)}, st);
  adam_step<double>({&p}, {MatrixD::Constant(1, 1, -2.0)}, st);
  double m = 0, v = 0, x = 0;
  for (int t = 1; t <= 2; ++t) {
    const double gg = t == 1 ? 1.0 : -2.0;
    m = 0.9 * m + 0.1 * gg;
    v = 0.999 * v + 0.001 * gg * gg;
    x -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  EXPECT_NEAR(p(0, 0), x, 1e-14);
}

TEST(Adam, ArityAndShapeChecks) {
  MatrixD p = MatrixD::Zero(2, 2);
  AdamState<double> st(AdamHyper{}, std::vector<const MatrixD*>{&p});
  EXPECT_THROW(adam_step<double>({&p}, {}, st), ShapeError);
  EXPECT_THROW(adam_step<double>({&p}, {MatrixD::Zero(2, 3)}, st), ShapeError);
}

TEST(GradCheck, DetectsWrongGradient) {
  MatrixD w = random_matrix<double>(2, 2, 1);
  auto loss = [&] { return w.squaredNorm(); };
  EXPECT_LE(grad_check(loss, {&w}, {MatrixD(2.0 * w)}), 1e-6);
  EXPECT_GT(grad_check(loss, {&w}, {MatrixD(3.0 * w)}), 0.1);
}

TEST(GradCheck, SubsamplesLargeParameterSets) {
  MatrixD w = random_matrix<double>(50, 50, 2);
  int calls = 0;
  auto loss = [&] {
    ++calls;
    return 0.5 * w.squaredNorm();
  };
  EXPECT_LE(grad_check(loss, {&w}, {w}, 1e-5, 0, 100), 1e-6);
  EXPECT_EQ(calls, 200);
}

TEST(GradCheck, NonFiniteLossThrows) {
  MatrixD w = MatrixD::Zero(1, 1);
  auto loss = [] { return std::nan(""); };
  EXPECT_THROW(grad_check(loss, {&w}, {MatrixD::Zero(1, 1)}), NumericError);
}

TEST(Helpers, ConcatAndGather) {
  MatrixD a(2, 1), b(2, 2);
  a << 1, 2;
  b << 3, 4, 5, 6;
  MatrixD want(2, 3);
  want << 1, 3, 4, 2, 5, 6;
  EXPECT_EQ(hconcat(a, b), want);
  EXPECT_THROW(hconcat(a, MatrixD(3, 1)), ShapeError);
  const std::vector<std::size_t> rows{1, 1, 0};
  const MatrixD g = gather_rows(want, rows);
  EXPECT_EQ(g.row(0), want.row(1));
  EXPECT_EQ(g.row(2), want.row(0));
  const std::vector<std::size_t> bad{2};
  EXPECT_THROW(gather_rows(want, bad), RangeError);
}
