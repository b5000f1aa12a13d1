#pragma once

// Task-correlated feature disentanglement: the shared extractor E, the two
// factor encoders, the reconstructor R, the Donsker-Varadhan mutual
// information estimator and the negative-entropy adversarial loss.

#include <cmath>
#include <vector>

#include "tdcss/numkernel.hpp"

namespace tdcss {

template <class T>
struct DisentangleNets {
  Mlp<T> extractor;      // E: D_x -> extractor width
  Mlp<T> cor;            // E_cor: extractor width -> D_h
  Mlp<T> ind;            // E_ind: extractor width -> D_h
  Mlp<T> reconstructor;  // R: 2 D_h -> D_x
  Mlp<T> mine_stat;      // statistics network: 2 D_h -> 1
  // When set, E_cor and E_ind are bypassed and the extractor output is cut
  // into two halves (the ablation without disentanglement).
  bool split_extractor = false;

  std::size_t latent_dim() const {
    return split_extractor ? extractor.out_dim() / 2 : cor.out_dim();
  }
};

template <class T>
struct LatentBatch {
  Matrix<T> h_cor;
  Matrix<T> h_ind;
};

template <class T>
struct EncodeCache {
  MlpCache<T> extractor, cor, ind;
};

template <class T>
struct EncoderGrads {
  ParamGrads<T> extractor, cor, ind;

  static EncoderGrads zeros(const DisentangleNets<T>& n) {
    return {n.extractor.zero_grads(), n.cor.zero_grads(), n.ind.zero_grads()};
  }
};

/// h_cor = E_cor(E(x)), h_ind = E_ind(E(x)).
template <class T>
LatentBatch<T> encode(const Matrix<T>& x, const DisentangleNets<T>& nets, EncodeCache<T>* cache = nullptr) {
  if (static_cast<std::size_t>(x.cols()) != nets.extractor.in_dim())
    throw ShapeError("encode: input " + shape_string(x) + " but extractor expects " +
                     std::to_string(nets.extractor.in_dim()) + " columns");
  require_finite(x, "encode (input)");
  const Matrix<T> shared = nets.extractor.forward(x, cache ? &cache->extractor : nullptr);
  LatentBatch<T> out;
  if (nets.split_extractor) {
    const auto half = shared.cols() / 2;
    out.h_cor = shared.leftCols(half);
    out.h_ind = shared.middleCols(half, half);
  } else {
    out.h_cor = nets.cor.forward(shared, cache ? &cache->cor : nullptr);
    out.h_ind = nets.ind.forward(shared, cache ? &cache->ind : nullptr);
  }
  return out;
}

/// Accumulates encoder parameter gradients for upstream gradients on either
/// factor. Pass nullptr for a factor that receives no gradient.
template <class T>
void encode_backward(const Matrix<T>* g_cor, const Matrix<T>* g_ind, const DisentangleNets<T>& nets,
                     const EncodeCache<T>& cache, EncoderGrads<T>& acc) {
  if (!g_cor && !g_ind) return;
  const auto& ecache = cache.extractor.layers;
  if (ecache.empty()) throw UsageError("encode_backward: missing forward cache");
  const auto rows = ecache.back().pre.rows();
  Matrix<T> g_shared = Matrix<T>::Zero(rows, static_cast<Eigen::Index>(nets.extractor.out_dim()));
  if (nets.split_extractor) {
    const auto half = g_shared.cols() / 2;
    if (g_cor) g_shared.leftCols(half) += *g_cor;
    if (g_ind) g_shared.middleCols(half, half) += *g_ind;
  } else {
    if (g_cor) g_shared += nets.cor.backward(*g_cor, cache.cor, &acc.cor);
    if (g_ind) g_shared += nets.ind.backward(*g_ind, cache.ind, &acc.ind);
  }
  nets.extractor.backward(g_shared, cache.extractor, &acc.extractor);
}

// ---------------------------------------------------------------------------
// Reconstruction

template <class T>
struct ReconstructionResult {
  T loss{};
  Matrix<T> g_cor, g_ind;  // gradients w.r.t. the two factors
  ParamGrads<T> g_reconstructor;
};

/// Mean over the batch of the squared error ||R(h_cor ++ h_ind) - x||^2.
template <class T>
ReconstructionResult<T> reconstruction_loss(const Matrix<T>& x, const LatentBatch<T>& h,
                                            const DisentangleNets<T>& nets) {
  if (h.h_cor.rows() != x.rows() || h.h_ind.rows() != x.rows())
    throw ShapeError("reconstruction_loss: factor rows " + shape_string(h.h_cor) + "/" + shape_string(h.h_ind) +
                     " vs input " + shape_string(x));
  const Matrix<T> joined = hconcat(h.h_cor, h.h_ind);
  MlpCache<T> cache;
  const Matrix<T> recon = nets.reconstructor.forward(joined, &cache);
  if (recon.cols() != x.cols())
    throw ShapeError("reconstruction_loss: reconstructor emits " + shape_string(recon) + " for input " +
                     shape_string(x));
  const auto n = static_cast<T>(x.rows());
  const Matrix<T> resid = recon - x;
  ReconstructionResult<T> out;
  out.loss = resid.squaredNorm() / n;
  out.g_reconstructor = nets.reconstructor.zero_grads();
  const Matrix<T> g_joined = nets.reconstructor.backward((T(2) / n) * resid, cache, &out.g_reconstructor);
  out.g_cor = g_joined.leftCols(h.h_cor.cols());
  out.g_ind = g_joined.rightCols(h.h_ind.cols());
  return out;
}

// ---------------------------------------------------------------------------
// Mutual information (Donsker-Varadhan)

/// Moving average of the marginal partition term, used to debias the
/// gradient of the log term.
struct MineEma {
  double log_value = 0.0;  // log of the averaged mean exp T
  bool initialized = false;
  double momentum = 0.99;
};

template <class T>
struct MineResult {
  T mi{};                  // DV estimate on this batch
  Matrix<T> g_cor, g_ind;  // d(estimate)/d(factors)
  ParamGrads<T> g_stat;    // d(estimate)/d(statistics net)
};

/// Estimate of I(h_cor; h_ind): mean T over joint pairs minus log mean exp T
/// over pairs whose h_ind rows are permuted by `perm`. Gradients are of the
/// estimate itself; the encoders descend it and the statistics network
/// ascends it. With `ema` the log-term gradient uses the moving-average
/// denominator; without it gradients are exact.
template <class T>
MineResult<T> mine_loss(const Matrix<T>& h_cor, const Matrix<T>& h_ind, const DisentangleNets<T>& nets,
                        std::span<const std::size_t> perm, MineEma* ema = nullptr) {
  const auto n = h_cor.rows();
  if (n < 8) throw UsageError("mine_loss: batch of " + std::to_string(n) + " rows, need at least 8");
  if (h_ind.rows() != n || static_cast<Eigen::Index>(perm.size()) != n)
    throw ShapeError("mine_loss: h_cor " + shape_string(h_cor) + ", h_ind " + shape_string(h_ind) + ", perm " +
                     std::to_string(perm.size()));
  Matrix<T> shuffled(n, h_ind.cols());
  for (Eigen::Index i = 0; i < n; ++i) shuffled.row(i) = h_ind.row(static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)]));

  MlpCache<T> joint_cache, marg_cache;
  const Matrix<T> t_joint = nets.mine_stat.forward(hconcat(h_cor, h_ind), &joint_cache);
  const Matrix<T> t_marg = nets.mine_stat.forward(hconcat(h_cor, shuffled), &marg_cache);

  const double mx = static_cast<double>(t_marg.maxCoeff());
  double sum_exp = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) sum_exp += std::exp(static_cast<double>(t_marg(i, 0)) - mx);
  const double mean_exp_shifted = sum_exp / static_cast<double>(n);
  const double log_mean_exp = mx + std::log(mean_exp_shifted);
  const double mean_joint = static_cast<double>(t_joint.sum()) / static_cast<double>(n);

  // denominator of the log-term gradient, in units of exp(mx)
  double denom = mean_exp_shifted;
  if (ema) {
    if (!ema->initialized) {
      ema->log_value = log_mean_exp;
      ema->initialized = true;
    } else {
      // log(m e^old + (1-m) e^batch), kept in log space so large T cannot overflow
      const double a = std::log(ema->momentum) + ema->log_value;
      const double c = std::log1p(-ema->momentum) + log_mean_exp;
      const double hi = std::max(a, c);
      ema->log_value = hi + std::log(std::exp(a - hi) + std::exp(c - hi));
    }
    denom = std::exp(ema->log_value - mx);
  }

  MineResult<T> out;
  out.mi = static_cast<T>(mean_joint - log_mean_exp);
  if (!std::isfinite(static_cast<double>(out.mi))) throw NumericError("mine_loss: non-finite estimate");

  const Matrix<T> g_joint = Matrix<T>::Constant(n, 1, static_cast<T>(1.0 / static_cast<double>(n)));
  Matrix<T> g_marg(n, 1);
  for (Eigen::Index i = 0; i < n; ++i)
    g_marg(i, 0) = static_cast<T>(-std::exp(static_cast<double>(t_marg(i, 0)) - mx) / (static_cast<double>(n) * denom));

  out.g_stat = nets.mine_stat.zero_grads();
  const Matrix<T> gin_joint = nets.mine_stat.backward(g_joint, joint_cache, &out.g_stat);
  const Matrix<T> gin_marg = nets.mine_stat.backward(g_marg, marg_cache, &out.g_stat);
  const auto d = h_cor.cols();
  out.g_cor = gin_joint.leftCols(d) + gin_marg.leftCols(d);
  out.g_ind = gin_joint.rightCols(h_ind.cols());
  for (Eigen::Index i = 0; i < n; ++i)
    out.g_ind.row(static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)])) += gin_marg.row(i).tail(h_ind.cols());
  return out;
}

/// Per-column z-scores over the batch. Mutual information is unchanged by
/// such per-coordinate affine maps, while the estimator no longer sees the
/// latent scale.
template <class T>
struct Standardized {
  Matrix<T> z;
  Matrix<T> inv_std;  // 1 x cols
};

template <class T>
Standardized<T> standardize_columns(const Matrix<T>& h, double eps = 1e-5) {
  if (h.rows() < 2) throw UsageError("standardize_columns: need at least 2 rows");
  const auto n = static_cast<T>(h.rows());
  const Matrix<T> centered = h.rowwise() - h.colwise().mean();
  const Matrix<T> var = centered.array().square().colwise().sum() / n;
  Standardized<T> out;
  out.inv_std = (var.array() + static_cast<T>(eps)).rsqrt().matrix();
  out.z = centered.array().rowwise() * out.inv_std.array().row(0);
  return out;
}

/// Gradient w.r.t. h given the gradient w.r.t. the z-scores.
template <class T>
Matrix<T> standardize_backward(const Matrix<T>& g_z, const Standardized<T>& s) {
  const auto n = static_cast<T>(g_z.rows());
  const Matrix<T> mean_g = g_z.colwise().sum() / n;
  const Matrix<T> mean_gz = g_z.cwiseProduct(s.z).colwise().sum() / n;
  Matrix<T> g = g_z.rowwise() - mean_g.row(0);
  g -= (s.z.array().rowwise() * mean_gz.array().row(0)).matrix();
  return (g.array().rowwise() * s.inv_std.array().row(0)).matrix();
}

/// Random permutation used for the marginal sample.
inline std::vector<std::size_t> marginal_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  shuffle(p.begin(), p.end(), rng);
  return p;
}

/// Standalone estimator run: fits a fresh statistics net of one hidden layer
/// to the joint sample (x, y) with full-batch Adam for `steps` updates, then
/// returns the DV estimate on the whole sample under a fresh permutation.
inline double fit_mine_estimate(const MatrixD& x, const MatrixD& y, std::size_t hidden, std::size_t steps,
                                double lr, std::uint64_t seed) {
  if (x.rows() != y.rows()) throw ShapeError("fit_mine_estimate: x " + shape_string(x) + " vs y " + shape_string(y));
  Rng rng = make_rng(seed, {0x313e});
  DisentangleNets<double> nets;
  nets.mine_stat = Mlp<double>::make({static_cast<std::size_t>(x.cols() + y.cols()), hidden, 1}, Activation::relu,
                                     Activation::identity, rng);
  AdamState<double> opt(AdamHyper{lr}, std::as_const(nets.mine_stat).params());
  MineEma ema;
  const auto n = static_cast<std::size_t>(x.rows());
  for (std::size_t s = 0; s < steps; ++s) {
    const auto perm = marginal_permutation(n, rng);
    auto r = mine_loss(x, y, nets, perm, &ema);
    for (auto& g : r.g_stat) g = -g;  // ascend the estimate
    adam_step(nets.mine_stat, r.g_stat, opt);
  }
  return static_cast<double>(mine_loss(x, y, nets, marginal_permutation(n, rng)).mi);
}

// ---------------------------------------------------------------------------
// Adversarial entropy

/// Mean over rows of sum_k p_k ln p_k with p = softmax(scores row), i.e. the
/// negative entropy. Minimized (value -ln C) at the uniform distribution.
template <class T>
LossGrad<T> adversarial_entropy_loss(const Matrix<T>& scores) {
  if (scores.cols() < 2)
    throw ConfigError("adversarial_entropy_loss: need at least 2 classes, got " + std::to_string(scores.cols()));
  if (scores.rows() == 0) throw UsageError("adversarial_entropy_loss: empty batch");
  const auto n = static_cast<T>(scores.rows());
  const Matrix<T> logp = log_softmax_rows(scores);
  const Matrix<T> p = logp.array().exp().matrix();
  LossGrad<T> out;
  out.grad.resize(scores.rows(), scores.cols());
  T total = T(0);
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const T neg_entropy = (p.row(i).array() * logp.row(i).array()).sum();
    total += neg_entropy;
    out.grad.row(i) = (p.row(i).array() * (logp.row(i).array() - neg_entropy)).matrix() / n;
  }
  out.loss = total / n;
  require_finite(out.grad, "adversarial_entropy_loss");
  return out;
}

}  // namespace tdcss
