#pragma once

// Compatibility scoring tau[i][k] = <W(h_i), a_k> against a semantic table,
// hard and soft-label compatibility losses, transfer soft labels and GZSL
// prediction.

#include <algorithm>
#include <cmath>
#include <vector>

#include "tdcss/disentangler.hpp"
#include "tdcss/numkernel.hpp"

namespace tdcss {

template <class T>
struct CompatHead {
  Mlp<T> net;  // W: D_h -> D_a
  // Single linear map without bias: the classic bilinear h W a form.
  bool bilinear = false;
};

/// Scores of a batch against the listed classes. Column c of `scores`
/// belongs to class_ids[c].
template <class T>
struct ScoreMatrix {
  Matrix<T> scores;
  std::vector<int> class_ids;

  /// Column of a class id, or -1.
  int column_of(int class_id) const {
    auto it = std::find(class_ids.begin(), class_ids.end(), class_id);
    return it == class_ids.end() ? -1 : static_cast<int>(it - class_ids.begin());
  }
};

template <class T>
struct CompatCache {
  MlpCache<T> head;
  Matrix<T> table;  // C x D_a
};

/// Rows of `semantics` for the given class ids, in that order.
template <class T, class S>
Matrix<T> semantic_table(const Matrix<S>& semantics, std::span<const int> class_ids) {
  Matrix<T> t(static_cast<Eigen::Index>(class_ids.size()), semantics.cols());
  for (std::size_t c = 0; c < class_ids.size(); ++c) {
    if (class_ids[c] < 0 || class_ids[c] >= semantics.rows())
      throw RangeError("semantic_table: class " + std::to_string(class_ids[c]) + " has no semantic row");
    t.row(static_cast<Eigen::Index>(c)) = semantics.row(class_ids[c]).template cast<T>();
  }
  return t;
}

template <class T>
ScoreMatrix<T> compat_scores(const Matrix<T>& h, const Matrix<T>& table, std::vector<int> class_ids,
                             const CompatHead<T>& head, CompatCache<T>* cache = nullptr) {
  if (static_cast<std::size_t>(table.rows()) != class_ids.size())
    throw ShapeError("compat_scores: table " + shape_string(table) + " for " + std::to_string(class_ids.size()) +
                     " class ids");
  if (static_cast<std::size_t>(h.cols()) != head.net.in_dim())
    throw ShapeError("compat_scores: h " + shape_string(h) + " but head expects " + std::to_string(head.net.in_dim()) +
                     " columns");
  if (static_cast<std::size_t>(table.cols()) != head.net.out_dim())
    throw ShapeError("compat_scores: table " + shape_string(table) + " but head emits " +
                     std::to_string(head.net.out_dim()) + " columns");
  const Matrix<T> projected = head.net.forward(h, cache ? &cache->head : nullptr);
  ScoreMatrix<T> out{projected * table.transpose(), std::move(class_ids)};
  require_finite(out.scores, "compat_scores");
  if (cache) cache->table = table;
  return out;
}

/// Gradient w.r.t. h; head parameter gradients go to `acc` when non-null.
template <class T>
Matrix<T> compat_scores_backward(const Matrix<T>& g_scores, const CompatHead<T>& head, const CompatCache<T>& cache,
                                 ParamGrads<T>* acc) {
  const Matrix<T> g_projected = g_scores * cache.table;
  Matrix<T> g_h = head.net.backward(g_projected, cache.head, acc);
  if (acc && head.bilinear)
    for (std::size_t i = 1; i < acc->size(); i += 2) (*acc)[i].setZero();
  return g_h;
}

/// Column positions of class-id labels within `scores.class_ids`.
template <class T>
std::vector<int> label_columns(const ScoreMatrix<T>& scores, std::span<const int> labels, std::string_view op) {
  std::vector<int> cols;
  cols.reserve(labels.size());
  for (int l : labels) {
    const int c = scores.column_of(l);
    if (c < 0) throw RangeError(std::string(op) + ": label " + std::to_string(l) + " is not among the scored classes");
    cols.push_back(c);
  }
  return cols;
}

/// Mean cross-entropy of softmax(tau) against class-id labels.
template <class T>
LossGrad<T> compat_ce_loss(const ScoreMatrix<T>& scores, std::span<const int> labels) {
  const auto cols = label_columns(scores, labels, "compat_ce_loss");
  return softmax_ce<T>(scores.scores, cols);
}

// ---------------------------------------------------------------------------
// Soft labels

enum class SoftLabelMode { softmax, linear };

/// Distribution over the rows of `source_table` from cosine similarity with
/// `target`. softmax: softmax(cos / temperature). linear: positive part of
/// the cosines normalized to sum 1 (uniform if all are <= 0).
template <class T>
Matrix<T> soft_labels(const Matrix<T>& source_table, const Matrix<T>& target, double temperature = 1.0,
                      SoftLabelMode mode = SoftLabelMode::softmax) {
  if (target.rows() != 1 || target.cols() != source_table.cols())
    throw ShapeError("soft_labels: target " + shape_string(target) + " vs table " + shape_string(source_table));
  if (source_table.rows() < 1) throw UsageError("soft_labels: empty source table");
  if (!(temperature > 0.0)) throw ConfigError("soft_labels: temperature must be positive");
  const double tn = static_cast<double>(target.norm());
  if (tn == 0.0) throw DataError("soft_labels: zero-norm target semantic vector");
  const auto C = source_table.rows();
  std::vector<double> cos(static_cast<std::size_t>(C));
  for (Eigen::Index j = 0; j < C; ++j) {
    const double sn = static_cast<double>(source_table.row(j).norm());
    if (sn == 0.0) throw DataError("soft_labels: zero-norm source semantic vector at row " + std::to_string(j));
    cos[static_cast<std::size_t>(j)] = static_cast<double>(source_table.row(j).dot(target.row(0))) / (sn * tn);
  }
  Matrix<T> out(1, C);
  if (mode == SoftLabelMode::softmax) {
    const double mx = *std::max_element(cos.begin(), cos.end());
    double z = 0.0;
    for (auto c : cos) z += std::exp((c - mx) / temperature);
    for (Eigen::Index j = 0; j < C; ++j)
      out(0, j) = static_cast<T>(std::exp((cos[static_cast<std::size_t>(j)] - mx) / temperature) / z);
  } else {
    double z = 0.0;
    for (auto c : cos) z += std::max(c, 0.0);
    for (Eigen::Index j = 0; j < C; ++j)
      out(0, j) = static_cast<T>(z > 0.0 ? std::max(cos[static_cast<std::size_t>(j)], 0.0) / z : 1.0 / static_cast<double>(C));
  }
  return out;
}

/// Cross-entropy between softmax(tau) and per-row soft targets, batch mean.
template <class T>
LossGrad<T> transfer_loss(const ScoreMatrix<T>& scores, const Matrix<T>& soft_targets) {
  return softmax_ce_soft(scores.scores, soft_targets);
}

// ---------------------------------------------------------------------------
// Prediction

/// Index of the row maximum; ties go to the lowest column.
template <class T>
std::vector<int> argmax_rows(const Matrix<T>& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < m.cols(); ++k)
      if (m(i, k) > m(i, best)) best = k;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

/// phi(x) = W(E_cor(E(x))) projected into semantic space.
template <class T>
Matrix<T> project(const Matrix<T>& x, const DisentangleNets<T>& nets, const CompatHead<T>& head) {
  return head.net.forward(encode(x, nets).h_cor);
}

/// argmax_k <phi(x), a_k> over all classes of `semantics` (row k = class k).
template <class T>
std::vector<int> predict(const Matrix<T>& x, const Matrix<T>& semantics, const DisentangleNets<T>& nets,
                         const CompatHead<T>& head) {
  if (static_cast<std::size_t>(semantics.cols()) != head.net.out_dim())
    throw ShapeError("predict: semantics " + shape_string(semantics) + " vs head output " +
                     std::to_string(head.net.out_dim()));
  const Matrix<T> scores = project(x, nets, head) * semantics.transpose();
  return argmax_rows(scores);
}

}  // namespace tdcss
