#pragma once

// Dense-network numeric substrate: row-major matrices, dense layers with
// cached forward passes, multi-layer perceptrons, softmax cross-entropy,
// ADAM and a central-difference gradient checker.
//
// Everything is templated on the scalar type so the same code trains in
// float and is gradient-checked in double.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tdcss/errors.hpp"
#include "tdcss/rng.hpp"

namespace tdcss {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

template <class Derived>
std::string shape_string(const Eigen::EigenBase<Derived>& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

/// Throws NumericError naming `op` if any entry is NaN or Inf.
template <class Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, std::string_view op) {
  if (!m.allFinite()) throw NumericError(std::string(op) + ": non-finite value in output");
}

template <class T>
Matrix<T> hconcat(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows())
    throw ShapeError("hconcat: row mismatch " + shape_string(a) + " vs " + shape_string(b));
  Matrix<T> out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

template <class T>
Matrix<T> gather_rows(const Matrix<T>& m, std::span<const std::size_t> rows) {
  Matrix<T> out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= static_cast<std::size_t>(m.rows()))
      throw RangeError("gather_rows: row " + std::to_string(rows[i]) + " out of range");
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dense layers

enum class Activation { identity, relu, leaky_relu };

inline constexpr double kLeakySlope = 0.2;

inline std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
  }
  return "?";
}

template <class T>
class DenseLayer {
 public:
  Matrix<T> weight;  // in_dim x out_dim
  Matrix<T> bias;    // 1 x out_dim

  DenseLayer(Matrix<T> w, Matrix<T> b, Activation act) : weight(std::move(w)), bias(std::move(b)), act_(act) {
    if (bias.rows() != 1 || bias.cols() != weight.cols())
      throw ShapeError("DenseLayer: bias " + shape_string(bias) + " does not match weight " + shape_string(weight));
  }

  /// Glorot-uniform weights, zero biases.
  static DenseLayer glorot(std::size_t in_dim, std::size_t out_dim, Activation act, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
    Matrix<T> w(static_cast<Eigen::Index>(in_dim), static_cast<Eigen::Index>(out_dim));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>((2.0 * uniform01(rng) - 1.0) * limit);
    return DenseLayer(std::move(w), Matrix<T>::Zero(1, static_cast<Eigen::Index>(out_dim)), act);
  }

  Activation activation() const { return act_; }
  std::size_t in_dim() const { return static_cast<std::size_t>(weight.rows()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(weight.cols()); }

 private:
  Activation act_;
};

template <class T>
struct DenseCache {
  Matrix<T> input;
  Matrix<T> pre;  // pre-activation
  bool valid = false;
};

template <class T>
struct DenseGrads {
  Matrix<T> grad_in;
  Matrix<T> grad_weight;
  Matrix<T> grad_bias;
};

template <class T>
void apply_activation(Matrix<T>& m, Activation act) {
  switch (act) {
    case Activation::identity: break;
    case Activation::relu: m = m.cwiseMax(T(0)); break;
    case Activation::leaky_relu:
      m = m.unaryExpr([](T v) { return v > T(0) ? v : static_cast<T>(kLeakySlope) * v; });
      break;
  }
}

template <class T>
Matrix<T> dense_forward(const Matrix<T>& x, const DenseLayer<T>& layer, DenseCache<T>* cache = nullptr) {
  if (static_cast<std::size_t>(x.cols()) != layer.in_dim())
    throw ShapeError("dense_forward: input " + shape_string(x) + " vs weight " + shape_string(layer.weight));
  Matrix<T> pre = x * layer.weight;
  pre.rowwise() += layer.bias.row(0);
  Matrix<T> out = pre;
  apply_activation(out, layer.activation());
  require_finite(out, "dense_forward");
  if (cache) {
    cache->input = x;
    cache->pre = std::move(pre);
    cache->valid = true;
  }
  return out;
}

/// Gradient of the activation applied to `grad_out`, in place.
template <class T>
void activation_backward(Matrix<T>& grad, const Matrix<T>& pre, Activation act) {
  switch (act) {
    case Activation::identity: break;
    case Activation::relu: grad = (pre.array() > T(0)).select(grad, T(0)); break;
    case Activation::leaky_relu:
      grad = (pre.array() > T(0)).select(grad, static_cast<T>(kLeakySlope) * grad);
      break;
  }
}

template <class T>
DenseGrads<T> dense_backward(const Matrix<T>& grad_out, const DenseLayer<T>& layer, const DenseCache<T>& cache,
                             bool want_param_grads = true) {
  if (!cache.valid) throw UsageError("dense_backward: no forward cache");
  if (grad_out.rows() != cache.pre.rows() || grad_out.cols() != cache.pre.cols())
    throw ShapeError("dense_backward: grad_out " + shape_string(grad_out) + " vs forward output " +
                     shape_string(cache.pre));
  Matrix<T> g = grad_out;
  activation_backward(g, cache.pre, layer.activation());
  DenseGrads<T> out;
  out.grad_in = g * layer.weight.transpose();
  if (want_param_grads) {
    out.grad_weight = cache.input.transpose() * g;
    out.grad_bias = g.colwise().sum();
  }
  require_finite(out.grad_in, "dense_backward");
  return out;
}

// ---------------------------------------------------------------------------
// Parameter groups

/// Gradients for a parameter group, one matrix per parameter in params() order.
template <class T>
using ParamGrads = std::vector<Matrix<T>>;

template <class T>
struct MlpCache {
  std::vector<DenseCache<T>> layers;
};

/// A stack of dense layers. Parameter order is w0, b0, w1, b1, ...
template <class T>
class Mlp {
 public:
  std::vector<DenseLayer<T>> layers;

  Mlp() = default;
  explicit Mlp(std::vector<DenseLayer<T>> ls) : layers(std::move(ls)) {}

  /// widths = {in, h1, ..., out}. Hidden layers use `hidden`, the last `output`.
  static Mlp make(const std::vector<std::size_t>& widths, Activation hidden, Activation output, Rng& rng) {
    if (widths.size() < 2) throw ConfigError("Mlp::make: need at least input and output widths");
    std::vector<DenseLayer<T>> ls;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      const bool last = i + 2 == widths.size();
      ls.push_back(DenseLayer<T>::glorot(widths[i], widths[i + 1], last ? output : hidden, rng));
    }
    return Mlp(std::move(ls));
  }

  std::size_t in_dim() const { return layers.front().in_dim(); }
  std::size_t out_dim() const { return layers.back().out_dim(); }

  Matrix<T> forward(const Matrix<T>& x, MlpCache<T>* cache = nullptr) const {
    if (layers.empty()) throw UsageError("Mlp::forward: empty network");
    if (cache) cache->layers.assign(layers.size(), DenseCache<T>{});
    Matrix<T> h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) h = dense_forward(h, layers[i], cache ? &cache->layers[i] : nullptr);
    return h;
  }

  /// Backpropagates `grad_out`; adds parameter gradients into `acc` when non-null.
  Matrix<T> backward(const Matrix<T>& grad_out, const MlpCache<T>& cache, ParamGrads<T>* acc) const {
    if (cache.layers.size() != layers.size()) throw UsageError("Mlp::backward: missing or stale forward cache");
    if (acc && acc->size() != 2 * layers.size()) throw ShapeError("Mlp::backward: gradient buffer has wrong arity");
    Matrix<T> g = grad_out;
    for (std::size_t i = layers.size(); i-- > 0;) {
      auto d = dense_backward(g, layers[i], cache.layers[i], acc != nullptr);
      if (acc) {
        (*acc)[2 * i] += d.grad_weight;
        (*acc)[2 * i + 1] += d.grad_bias;
      }
      g = std::move(d.grad_in);
    }
    return g;
  }

  std::vector<Matrix<T>*> params() {
    std::vector<Matrix<T>*> ps;
    for (auto& l : layers) {
      ps.push_back(&l.weight);
      ps.push_back(&l.bias);
    }
    return ps;
  }

  std::vector<const Matrix<T>*> params() const {
    std::vector<const Matrix<T>*> ps;
    for (const auto& l : layers) {
      ps.push_back(&l.weight);
      ps.push_back(&l.bias);
    }
    return ps;
  }

  ParamGrads<T> zero_grads() const {
    ParamGrads<T> g;
    for (const auto* p : params()) g.push_back(Matrix<T>::Zero(p->rows(), p->cols()));
    return g;
  }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto* p : params()) n += static_cast<std::size_t>(p->size());
    return n;
  }

  /// Same architecture and values in another scalar type.
  template <class U>
  Mlp<U> cast() const {
    std::vector<DenseLayer<U>> ls;
    for (const auto& l : layers)
      ls.emplace_back(l.weight.template cast<U>(), l.bias.template cast<U>(), l.activation());
    return Mlp<U>(std::move(ls));
  }
};

// ---------------------------------------------------------------------------
// Softmax and cross-entropy

template <class T>
Matrix<T> log_softmax_rows(const Matrix<T>& logits) {
  Matrix<T> out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const T mx = logits.row(i).maxCoeff();
    const T lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

template <class T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
  return log_softmax_rows(logits).array().exp().matrix();
}

template <class T>
struct LossGrad {
  T loss{};
  Matrix<T> grad;  // gradient w.r.t. the loss input
};

/// Mean cross-entropy against target distributions (one row per sample).
template <class T>
LossGrad<T> softmax_ce_soft(const Matrix<T>& logits, const Matrix<T>& targets) {
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols())
    throw ShapeError("softmax_ce: targets " + shape_string(targets) + " vs logits " + shape_string(logits));
  const auto n = logits.rows();
  if (n == 0) throw UsageError("softmax_ce: empty batch");
  for (Eigen::Index i = 0; i < n; ++i) {
    const double s = static_cast<double>(targets.row(i).sum());
    if (std::abs(s - 1.0) > 1e-6 || (targets.row(i).array() < T(0)).any())
      throw UsageError("softmax_ce: target row " + std::to_string(i) + " is not a distribution");
  }
  const Matrix<T> logp = log_softmax_rows(logits);
  T total = T(0);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < logits.cols(); ++k)
      if (targets(i, k) != T(0)) total -= targets(i, k) * logp(i, k);
  LossGrad<T> out;
  out.loss = total / static_cast<T>(n);
  out.grad = (logp.array().exp() - targets.array()).matrix() / static_cast<T>(n);
  require_finite(out.grad, "softmax_ce");
  if (!std::isfinite(static_cast<double>(out.loss))) throw NumericError("softmax_ce: non-finite loss");
  return out;
}

template <class T>
Matrix<T> one_hot(std::span<const int> labels, std::size_t num_classes) {
  Matrix<T> t = Matrix<T>::Zero(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(num_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
      throw RangeError("softmax_ce: label " + std::to_string(labels[i]) + " outside [0, " +
                       std::to_string(num_classes) + ")");
    t(static_cast<Eigen::Index>(i), labels[i]) = T(1);
  }
  return t;
}

/// Mean cross-entropy against hard labels (column indices).
template <class T>
LossGrad<T> softmax_ce(const Matrix<T>& logits, std::span<const int> labels) {
  if (labels.size() != static_cast<std::size_t>(logits.rows()))
    throw ShapeError("softmax_ce: " + std::to_string(labels.size()) + " labels for " + shape_string(logits) +
                     " logits");
  return softmax_ce_soft(logits, one_hot<T>(labels, static_cast<std::size_t>(logits.cols())));
}

// ---------------------------------------------------------------------------
// ADAM

struct AdamHyper {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  AdamHyper hyper;
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
  std::int64_t t = 0;

  AdamState() = default;
  AdamState(AdamHyper h, const std::vector<const Matrix<T>*>& params) : hyper(h) {
    for (const auto* p : params) {
      m.push_back(Matrix<T>::Zero(p->rows(), p->cols()));
      v.push_back(Matrix<T>::Zero(p->rows(), p->cols()));
    }
  }
};

/// Bias-corrected ADAM update, in place.
template <class T>
void adam_step(const std::vector<Matrix<T>*>& params, const ParamGrads<T>& grads, AdamState<T>& state) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params, " + std::to_string(grads.size()) +
                     " grads, " + std::to_string(state.m.size()) + " moment slots");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->rows() != grads[i].rows() || params[i]->cols() != grads[i].cols() ||
        state.m[i].rows() != grads[i].rows() || state.m[i].cols() != grads[i].cols())
      throw ShapeError("adam_step: param " + shape_string(*params[i]) + " vs grad " + shape_string(grads[i]));
  ++state.t;
  const auto& h = state.hyper;
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(h.beta1, static_cast<double>(state.t)));
  const T c2 = static_cast<T>(1.0 - std::pow(h.beta2, static_cast<double>(state.t)));
  const T lr = static_cast<T>(h.lr), eps = static_cast<T>(h.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    m = b1 * m + (T(1) - b1) * grads[i];
    v = b2 * v + (T(1) - b2) * grads[i].cwiseProduct(grads[i]);
    params[i]->array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    require_finite(*params[i], "adam_step");
  }
}

template <class T>
void adam_step(Mlp<T>& net, const ParamGrads<T>& grads, AdamState<T>& state) {
  adam_step(net.params(), grads, state);
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over the
/// checked coordinates. Above `max_coords` total coordinates a seeded random
/// subset of that size is checked.
inline double grad_check(const std::function<double()>& loss_fn, const std::vector<MatrixD*>& params,
                         const ParamGrads<double>& analytic, double eps = 1e-5, std::uint64_t seed = 0,
                         std::size_t max_coords = 10000, double floor = 1e-6) {
  if (params.size() != analytic.size()) throw ShapeError("grad_check: params/grads arity mismatch");
  std::vector<std::pair<std::size_t, Eigen::Index>> coords;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p]->size() != analytic[p].size())
      throw ShapeError("grad_check: param " + shape_string(*params[p]) + " vs grad " + shape_string(analytic[p]));
    for (Eigen::Index i = 0; i < params[p]->size(); ++i) coords.emplace_back(p, i);
  }
  if (coords.size() > max_coords) {
    Rng rng(seed);
    shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
  }
  auto eval = [&] {
    const double l = loss_fn();
    if (!std::isfinite(l)) throw NumericError("grad_check: non-finite loss");
    return l;
  };
  double worst = 0.0;
  for (auto [p, i] : coords) {
    double& w = params[p]->data()[i];
    const double saved = w;
    w = saved + eps;
    const double up = eval();
    w = saved - eps;
    const double down = eval();
    w = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic[p].data()[i];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace tdcss
