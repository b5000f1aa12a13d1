#pragma once

// Controllable pseudo-sample synthesis. Convert nets map a semantic
// difference a_i - a_j (target minus source) to an offset in latent space;
// adding it to a real source h_cor yields a pseudo sample of the target.
// Center samples are trained to sit inside the target class; edge samples
// have norm-bounded offsets and act as feature-level adversarial examples.
// The domain identifier separates real target h_cor from center samples.

#include <cmath>
#include <optional>
#include <set>
#include <vector>

#include "tdcss/numkernel.hpp"

namespace tdcss {

template <class T>
struct ConvertNet {
  Mlp<T> net;  // D_a -> D_h
};

/// Binary discriminator over latent vectors; column 1 = real, 0 = pseudo.
template <class T>
struct DomainIdentifier {
  Mlp<T> net;  // D_h -> 2, LeakyReLU hidden
};

inline constexpr int kPseudoDomain = 0;
inline constexpr int kRealDomain = 1;

template <class T>
struct OffsetCache {
  MlpCache<T> net;
  Matrix<T> raw;         // unclipped offsets
  std::vector<T> scale;  // per-row clip factor (1 when inside the bound)
};

/// Row-wise offsets net(a_target - a_source). With `clip_bound`, any row
/// whose norm exceeds the bound is rescaled onto it.
template <class T>
Matrix<T> make_offsets(const Matrix<T>& a_target, const Matrix<T>& a_source, const ConvertNet<T>& cn,
                       std::optional<T> clip_bound = std::nullopt, OffsetCache<T>* cache = nullptr) {
  if (a_target.rows() != a_source.rows() || a_target.cols() != a_source.cols())
    throw ShapeError("make_offset: target " + shape_string(a_target) + " vs source " + shape_string(a_source));
  if (static_cast<std::size_t>(a_target.cols()) != cn.net.in_dim())
    throw ShapeError("make_offset: semantic width " + std::to_string(a_target.cols()) + " but convert net expects " +
                     std::to_string(cn.net.in_dim()));
  OffsetCache<T> local;
  OffsetCache<T>& c = cache ? *cache : local;
  c.raw = cn.net.forward(Matrix<T>(a_target - a_source), &c.net);
  c.scale.assign(static_cast<std::size_t>(c.raw.rows()), T(1));
  Matrix<T> out = c.raw;
  if (clip_bound) {
    if (*clip_bound < T(0)) throw ConfigError("make_offset: negative clip bound");
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      const T norm = c.raw.row(i).norm();
      if (norm > *clip_bound) {
        const T s = *clip_bound / norm;
        c.scale[static_cast<std::size_t>(i)] = s;
        out.row(i) *= s;
      }
    }
  }
  return out;
}

/// Single offset for one (target, source) pair.
template <class T>
Matrix<T> make_offset(const Matrix<T>& a_target, const Matrix<T>& a_source, const ConvertNet<T>& cn,
                      std::optional<T> clip_bound = std::nullopt) {
  if (a_target.rows() != 1) throw ShapeError("make_offset: expected single semantic rows");
  return make_offsets(a_target, a_source, cn, clip_bound);
}

/// Backpropagates offset gradients into the convert net parameters.
template <class T>
void offsets_backward(const Matrix<T>& g_offsets, const ConvertNet<T>& cn, const OffsetCache<T>& cache,
                      ParamGrads<T>& acc) {
  Matrix<T> g_raw = g_offsets;
  for (Eigen::Index i = 0; i < g_raw.rows(); ++i) {
    const T s = cache.scale[static_cast<std::size_t>(i)];
    if (s == T(1)) continue;
    // d(s * o)/do with s = bound/|o|:  s (I - o o^T / |o|^2)
    const auto o = cache.raw.row(i);
    const T sq = o.squaredNorm();
    const T proj = g_raw.row(i).dot(o) / sq;
    g_raw.row(i) = s * (g_raw.row(i) - proj * o);
  }
  cn.net.backward(g_raw, cache.net, &acc);
}

// ---------------------------------------------------------------------------
// Pseudo batches

enum class PseudoKind { center, edge };

template <class T>
struct PseudoBatch {
  Matrix<T> h;
  PseudoKind kind = PseudoKind::center;
  std::vector<int> target_classes;       // class i per row
  std::vector<int> source_classes;       // class j per row
  std::vector<std::size_t> source_rows;  // row of the real batch each vector came from
  OffsetCache<T> cache;

  /// Labels used when this batch trains the compatibility head: edge
  /// samples keep their source class, center samples take the target.
  const std::vector<int>& head_labels() const { return kind == PseudoKind::edge ? source_classes : target_classes; }
  /// Labels used when this batch trains its convert net: always the target.
  const std::vector<int>& convert_labels() const { return target_classes; }
};

/// Which real row and which target class each pseudo vector uses.
struct Pairing {
  std::vector<std::size_t> source_rows;
  std::vector<int> target_classes;
};

/// Target drawn uniformly from `targets`, source row uniformly from the batch.
inline Pairing draw_pairing(std::size_t count, std::size_t batch_rows, std::span<const int> targets, Rng& rng) {
  if (targets.empty() || batch_rows == 0) throw UsageError("draw_pairing: no targets or empty source batch");
  Pairing p;
  for (std::size_t i = 0; i < count; ++i) {
    p.source_rows.push_back(uniform_index(rng, batch_rows));
    p.target_classes.push_back(targets[uniform_index(rng, targets.size())]);
  }
  return p;
}

namespace detail {

template <class T>
PseudoBatch<T> synthesize(PseudoKind kind, const Matrix<T>& h_cor, std::span<const int> h_labels,
                          const Pairing& pairing, const Matrix<T>& semantics, std::span<const int> sources,
                          std::span<const int> targets, const ConvertNet<T>& cn, std::optional<T> clip_bound) {
  if (static_cast<std::size_t>(h_cor.rows()) != h_labels.size())
    throw ShapeError("synthesize: " + std::to_string(h_labels.size()) + " labels for h_cor " + shape_string(h_cor));
  if (pairing.source_rows.size() != pairing.target_classes.size())
    throw ShapeError("synthesize: pairing arity mismatch");
  const std::set<int> src(sources.begin(), sources.end()), tgt(targets.begin(), targets.end());
  const auto n = static_cast<Eigen::Index>(pairing.source_rows.size());
  PseudoBatch<T> pb;
  pb.kind = kind;
  Matrix<T> base(n, h_cor.cols()), a_t(n, semantics.cols()), a_s(n, semantics.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto row = pairing.source_rows[static_cast<std::size_t>(r)];
    if (row >= h_labels.size()) throw RangeError("synthesize: source row " + std::to_string(row) + " out of range");
    const int j = h_labels[row];
    const int i = pairing.target_classes[static_cast<std::size_t>(r)];
    if (!tgt.count(i)) throw UsageError("synthesize: class " + std::to_string(i) + " is not a target class");
    if (!src.count(j)) throw UsageError("synthesize: class " + std::to_string(j) + " is not a source class");
    base.row(r) = h_cor.row(static_cast<Eigen::Index>(row));
    a_t.row(r) = semantics.row(i);
    a_s.row(r) = semantics.row(j);
    pb.source_classes.push_back(j);
    pb.target_classes.push_back(i);
    pb.source_rows.push_back(row);
  }
  const Matrix<T> off = make_offsets(a_t, a_s, cn, clip_bound, &pb.cache);
  if (off.cols() != base.cols())
    throw ShapeError("synthesize: offsets " + shape_string(off) + " vs h_cor " + shape_string(base));
  pb.h = base + off;
  return pb;
}

}  // namespace detail

/// h_center = h_cor + C_center(a_i - a_j), labelled with the target class.
template <class T>
PseudoBatch<T> synth_center(const Matrix<T>& h_cor, std::span<const int> h_labels, const Pairing& pairing,
                            const Matrix<T>& semantics, std::span<const int> sources, std::span<const int> targets,
                            const ConvertNet<T>& center) {
  return detail::synthesize(PseudoKind::center, h_cor, h_labels, pairing, semantics, sources, targets, center,
                            std::optional<T>{});
}

/// Mean row norm of a batch of latent vectors.
template <class T>
T mean_row_norm(const Matrix<T>& h) {
  if (h.rows() == 0) return T(0);
  return h.rowwise().norm().sum() / static_cast<T>(h.rows());
}

/// h_edge = h_cor + clip(C_edge[k](a_i - a_j)) with every offset norm at most
/// epsilon * (batch mean of |h_cor|).
template <class T>
PseudoBatch<T> synth_edge(const Matrix<T>& h_cor, std::span<const int> h_labels, const Pairing& pairing,
                          const Matrix<T>& semantics, std::span<const int> sources, std::span<const int> targets,
                          const std::vector<ConvertNet<T>>& edge_nets, std::size_t k, double epsilon) {
  if (k >= edge_nets.size())
    throw UsageError("synth_edge: edge net " + std::to_string(k) + " out of range (have " +
                     std::to_string(edge_nets.size()) + ")");
  if (!(epsilon >= 0.0)) throw ConfigError("synth_edge: epsilon must be >= 0");
  const T bound = static_cast<T>(epsilon) * mean_row_norm(h_cor);
  return detail::synthesize(PseudoKind::edge, h_cor, h_labels, pairing, semantics, sources, targets, edge_nets[k],
                            std::optional<T>(bound));
}

// ---------------------------------------------------------------------------
// Domain identification

template <class T>
struct DomainLossResult {
  T loss{};
  ParamGrads<T> g_identifier;
  Matrix<T> g_real, g_pseudo;  // gradients w.r.t. the inputs
};

/// Cross-entropy of the identifier's 2-way softmax against domain labels
/// (real = 1, pseudo = 0), mean over all rows. `swap_labels` gives the
/// fooling objective used to train the center convert net.
template <class T>
DomainLossResult<T> domain_loss(const DomainIdentifier<T>& di, const Matrix<T>& real, const Matrix<T>& pseudo,
                                bool swap_labels = false) {
  if (real.rows() == 0 || pseudo.rows() == 0) throw UsageError("domain_loss: empty real or pseudo batch");
  if (real.cols() != pseudo.cols())
    throw ShapeError("domain_loss: real " + shape_string(real) + " vs pseudo " + shape_string(pseudo));
  const Matrix<T> both = [&] {
    Matrix<T> m(real.rows() + pseudo.rows(), real.cols());
    m << real, pseudo;
    return m;
  }();
  std::vector<int> labels(static_cast<std::size_t>(both.rows()));
  for (Eigen::Index i = 0; i < both.rows(); ++i) {
    const bool is_real = i < real.rows();
    labels[static_cast<std::size_t>(i)] = (is_real != swap_labels) ? kRealDomain : kPseudoDomain;
  }
  MlpCache<T> cache;
  const Matrix<T> logits = di.net.forward(both, &cache);
  if (logits.cols() != 2) throw ShapeError("domain_loss: identifier emits " + shape_string(logits));
  const auto ce = softmax_ce<T>(logits, labels);
  DomainLossResult<T> out;
  out.loss = ce.loss;
  out.g_identifier = di.net.zero_grads();
  const Matrix<T> g_in = di.net.backward(ce.grad, cache, &out.g_identifier);
  out.g_real = g_in.topRows(real.rows());
  out.g_pseudo = g_in.bottomRows(pseudo.rows());
  return out;
}

}  // namespace tdcss
