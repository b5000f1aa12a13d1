#pragma once

// Two-stage alternating optimization. Each epoch draws a fresh source/target
// split of the seen classes and runs stage 1 (disentanglement, pseudo-sample
// synthesis toward the target classes, domain identification), then stage 2
// (seen classes as sources, unseen classes as targets; only unseen semantics
// are read).

#include <chrono>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tdcss/data.hpp"
#include "tdcss/eval.hpp"
#include "tdcss/model.hpp"

namespace tdcss {

struct Ablation {
  bool no_tfd = false;  // no disentanglement: E output halves, no adversarial/rec/MINE steps
  bool no_eps = false;  // no edge pseudo samples
  bool no_cps = false;  // no center pseudo samples, transfer loss or domain identifier

  bool operator==(const Ablation&) const = default;
};

enum class Scale { desk, paper };

struct TrainConfig {
  // Desk-scale defaults, calibrated on the synthetic testbed; the full-size
  // preset restores the unadjusted values.
  double lr = 7e-5;
  double lr_stage2_factor = 1.0;
  std::size_t epochs = 200;
  std::size_t batches_stage1 = 30;
  std::size_t batches_stage2 = 30;
  std::size_t batch_size = 64;
  std::size_t n_target = 1;
  std::size_t num_edge_nets = 2;
  double edge_epsilon = 0.5;
  double soft_temperature = 1.0;
  SoftLabelMode soft_label_mode = SoftLabelMode::softmax;
  double lambda_rec = 1.0;
  double lambda_mine = 3.0;
  double lambda_adv = 1.0;
  double lambda_trans = 1.0;
  double lambda_di = 3.0;
  double mine_ema_momentum = 0.99;
  double latent_l2 = 1e-3;           // penalty on the mean squared norm of h_cor and h_ind
  Ablation ablation;
  bool fixed_split = false;          // keep one source/target split for the whole run
  bool rec_trains_encoders = true;   // false: reconstruction updates R only
  bool classify_ind = true;          // W also learns to classify h_ind (the adversary's target)
  bool encoders_in_synthesis = false;  // pseudo-sample losses also update E and E_cor
  bool mine_trains_shared = true;    // false: the MI step updates E_ind only
  bool mine_standardize = true;      // MI estimator sees per-batch z-scored latents
  std::size_t mine_steps = 5;        // statistics-net ascent steps per batch
  bool stage2_real_seen = true;      // stage-2 W step also sees the real seen batch with its labels
  bool bilinear_head = true;        // false: three-layer head
  Scale scale = Scale::desk;
  std::size_t eval_every = 10;       // 0 disables periodic test evaluation
  double seen_test_fraction = 0.2;
  double val_fraction = 0.1;
  std::size_t fszu_shots = 0;        // 0 = all training rows
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr > 0.0) || !(lr_stage2_factor > 0.0)) throw ConfigError("train: learning rates must be positive");
    if (batches_stage1 == 0 || batches_stage2 == 0 || batch_size == 0 || n_target == 0)
      throw ConfigError("train: batch counts, batch size and n_target must be positive");
    if (!(edge_epsilon >= 0.0) || !(soft_temperature > 0.0)) throw ConfigError("train: bad edge_epsilon/soft_temperature");
    for (double l : {lambda_rec, lambda_mine, lambda_adv, lambda_trans, lambda_di, latent_l2})
      if (!(l >= 0.0)) throw ConfigError("train: loss weights must be >= 0");
    if (!(mine_ema_momentum >= 0.0 && mine_ema_momentum < 1.0)) throw ConfigError("train: mine_ema_momentum in [0,1)");
    if (!ablation.no_eps && num_edge_nets == 0) throw ConfigError("train: num_edge_nets must be >= 1 unless no_eps");
  }

  ModelDims dims(std::size_t dx, std::size_t da) const {
    ModelDims d = scale == Scale::paper ? ModelDims::paper(dx, da) : ModelDims::desk(dx, da);
    d.num_edge_nets = num_edge_nets;
    d.split_extractor = ablation.no_tfd;
    d.bilinear_head = bilinear_head;
    if (d.split_extractor && scale == Scale::desk) d.extractor_dim = 2 * d.latent_dim;
    return d;
  }
};

/// Mean of each active loss term over the batches of one stage. Inactive
/// (ablated) terms are absent.
struct LossRecord {
  std::map<std::string, double> terms;
  std::map<std::string, std::size_t> counts;

  void add(const std::string& name, double v) {
    if (!std::isfinite(v)) throw NumericError("loss term '" + name + "' is not finite");
    auto& t = terms[name];
    auto& c = counts[name];
    t = (t * static_cast<double>(c) + v) / static_cast<double>(c + 1);
    ++c;
  }
  bool has(const std::string& name) const { return terms.count(name) != 0; }
};

struct EpochRecord {
  std::size_t epoch = 0;
  LossRecord stage1, stage2;
  std::optional<Metrics> test;
  double val_score = 0.0;
  double seconds = 0.0;
};

/// Model plus optimizer state: everything needed to resume bitwise.
struct TrainState {
  Model<float> model;
  std::map<std::string, AdamState<float>> stage1_opt;
  std::map<std::string, AdamState<float>> stage2_opt;
  std::size_t epochs_done = 0;
  double best_val = -1.0;
  std::size_t best_epoch = 0;

  static TrainState fresh(const ModelDims& dims, const TrainConfig& cfg) {
    TrainState s;
    s.model = Model<float>::init(dims, cfg.seed);
    s.model.mine_ema.momentum = cfg.mine_ema_momentum;
    const AdamHyper h1{cfg.lr, 0.9, 0.999, 1e-8};
    const AdamHyper h2{cfg.lr * cfg.lr_stage2_factor, 0.9, 0.999, 1e-8};
    for (auto& [name, net] : s.model.groups()) s.stage1_opt.emplace(name, AdamState<float>(h1, std::as_const(*net).params()));
    for (const char* name : {"W", "C_center"})
      s.stage2_opt.emplace(name, AdamState<float>(h2, std::as_const(s.model.group(name)).params()));
    return s;
  }
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0.0;
  std::optional<TrainState> best;  // snapshot at the best validation epoch
};

/// Read access to training features. Any attempt to read a row outside the
/// allowed set, or a row of an unseen class, is a leakage error.
class TrainingView {
 public:
  TrainingView(const DatasetBundle& b, std::vector<std::size_t> allowed) : b_(&b), allowed_(allowed.begin(), allowed.end()) {
    for (auto r : allowed_)
      if (b.is_unseen(b.labels[r]))
        throw LeakageError("training view: row " + std::to_string(r) + " belongs to unseen class " +
                           std::to_string(b.labels[r]));
  }

  const DatasetBundle& bundle() const { return *b_; }

  Batch batch(std::vector<std::size_t> rows) const {
    for (auto r : rows)
      if (!allowed_.count(r) || b_->is_unseen(b_->labels[r]))
        throw LeakageError("training read of row " + std::to_string(r) + " (class " + std::to_string(b_->labels[r]) +
                           ") outside the seen training set");
    return make_batch(*b_, std::move(rows));
  }

  /// Allowed rows whose label is in `classes`.
  std::vector<std::size_t> rows_of(std::span<const int> classes) const {
    const std::set<int> want(classes.begin(), classes.end());
    std::vector<std::size_t> out;
    for (auto r : allowed_)
      if (want.count(b_->labels[r])) out.push_back(r);
    return out;
  }

 private:
  const DatasetBundle* b_;
  std::set<std::size_t> allowed_;
};

namespace detail {

inline void step(TrainState& st, const std::string& group, const ParamGrads<float>& g, bool stage2 = false) {
  auto& opts = stage2 ? st.stage2_opt : st.stage1_opt;
  auto it = opts.find(group);
  if (it == opts.end()) throw UsageError("no optimizer state for group '" + group + "'");
  adam_step(st.model.group(group), g, it->second);
}

template <class T>
void scale_grads(ParamGrads<T>& g, T s) {
  for (auto& m : g) m *= s;
}

inline std::vector<int> concat_labels(std::initializer_list<const std::vector<int>*> parts) {
  std::vector<int> out;
  for (const auto* p : parts) out.insert(out.end(), p->begin(), p->end());
  return out;
}

/// Runs `f`, prefixing runtime failures with `where`.
template <class F>
auto with_context(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const NumericError& e) {
    throw NumericError(where + ": " + e.what());
  } catch (const LeakageError& e) {
    throw LeakageError(where + ": " + e.what());
  }
}

}  // namespace detail

/// Fixed inputs shared by the stage-1 steps of one epoch.
struct Stage1Context {
  const TrainingView* view = nullptr;
  const SourceTargetSplit* split = nullptr;
  MatrixF semantics;
  std::vector<int> seen_ids;
  MatrixF seen_table;
  MatrixF source_table;

  Stage1Context(const TrainingView& v, const SourceTargetSplit& s)
      : view(&v), split(&s), semantics(v.bundle().semantics), seen_ids(v.bundle().seen_classes) {
    if (s.target_classes.empty()) throw ConfigError("stage1: empty target split");
    if (s.source_classes.empty()) throw ConfigError("stage1: empty source split");
    seen_table = semantic_table<float>(semantics, seen_ids);
    source_table = semantic_table<float>(semantics, s.source_classes);
  }
};

namespace stage1 {

using M = MatrixF;

/// CE on h_cor updates W, E and E_cor; CE on h_ind trains W only.
inline void classify(TrainState& st, const Stage1Context& ctx, const Batch& batch, const TrainConfig& cfg,
                     LossRecord& rec) {
  auto& model = st.model;
  const auto& abl = cfg.ablation;
  const M& x = batch.features;
  EncodeCache<float> ec;
  const auto h = encode(x, model.dis, &ec);
  CompatCache<float> cc;
  const auto sc = compat_scores(h.h_cor, ctx.seen_table, ctx.seen_ids, model.head, &cc);
  const auto ce = compat_ce_loss(sc, batch.labels);
  auto g_head = model.head.net.zero_grads();
  M g_cor = compat_scores_backward(ce.grad, model.head, cc, &g_head);
  rec.add("ce", ce.loss);
  if (cfg.classify_ind && !abl.no_tfd) {
    CompatCache<float> ci;
    const auto si = compat_scores(h.h_ind, ctx.seen_table, ctx.seen_ids, model.head, &ci);
    const auto cei = compat_ce_loss(si, batch.labels);
    compat_scores_backward(cei.grad, model.head, ci, &g_head);
    rec.add("ce_ind", cei.loss);
  }
  M g_ind = M::Zero(h.h_ind.rows(), h.h_ind.cols());
  const bool ind_grad = cfg.latent_l2 > 0.0 && !abl.no_tfd;
  if (cfg.latent_l2 > 0.0) {
    const double n = static_cast<double>(x.rows());
    const float scale = static_cast<float>(2.0 * cfg.latent_l2 / n);
    g_cor += scale * h.h_cor;
    double sq = h.h_cor.squaredNorm();
    if (ind_grad) g_ind += scale * h.h_ind, sq += h.h_ind.squaredNorm();
    rec.add("latent_l2", cfg.latent_l2 * sq / n);
  }
  auto g_enc = EncoderGrads<float>::zeros(model.dis);
  encode_backward<float>(&g_cor, ind_grad ? &g_ind : nullptr, model.dis, ec, g_enc);
  detail::step(st, "W", g_head);
  detail::step(st, "E", g_enc.extractor);
  if (!abl.no_tfd) detail::step(st, "E_cor", g_enc.cor);
  if (ind_grad) detail::step(st, "E_ind", g_enc.ind);
}

/// W frozen; E and E_ind push predictions from h_ind toward uniform.
inline void adversarial(TrainState& st, const Stage1Context& ctx, const Batch& batch, const TrainConfig& cfg,
                        LossRecord& rec) {
  auto& model = st.model;
  EncodeCache<float> ec;
  const auto h = encode(batch.features, model.dis, &ec);
  CompatCache<float> cc;
  const auto sc = compat_scores(h.h_ind, ctx.source_table, ctx.split->source_classes, model.head, &cc);
  auto adv = adversarial_entropy_loss(sc.scores);
  const M g_ind = compat_scores_backward<float>(adv.grad * static_cast<float>(cfg.lambda_adv), model.head, cc, nullptr);
  auto g_enc = EncoderGrads<float>::zeros(model.dis);
  encode_backward<float>(nullptr, &g_ind, model.dis, ec, g_enc);
  detail::step(st, "E", g_enc.extractor);
  detail::step(st, "E_ind", g_enc.ind);
  rec.add("adv_entropy", adv.loss);
}

inline void reconstruct(TrainState& st, const Batch& batch, const TrainConfig& cfg, LossRecord& rec) {
  auto& model = st.model;
  const M& x = batch.features;
  EncodeCache<float> ec;
  const auto h = encode(x, model.dis, &ec);
  auto r = reconstruction_loss(x, h, model.dis);
  const float lam = static_cast<float>(cfg.lambda_rec);
  detail::scale_grads(r.g_reconstructor, lam);
  detail::step(st, "R", r.g_reconstructor);
  if (cfg.rec_trains_encoders) {
    const M gc = r.g_cor * lam, gi = r.g_ind * lam;
    auto g_enc = EncoderGrads<float>::zeros(model.dis);
    encode_backward<float>(&gc, &gi, model.dis, ec, g_enc);
    detail::step(st, "E", g_enc.extractor);
    detail::step(st, "E_cor", g_enc.cor);
    detail::step(st, "E_ind", g_enc.ind);
  }
  rec.add("rec", r.loss);
}

/// The statistics net ascends the MI estimate; the encoders descend it.
/// Batches below 8 rows are skipped.
inline void mutual_information(TrainState& st, const Batch& batch, const TrainConfig& cfg, Rng& rng, LossRecord& rec) {
  auto& model = st.model;
  const M& x = batch.features;
  if (x.rows() < 8) return;
  EncodeCache<float> ec;
  const auto h = encode(x, model.dis, &ec);
  std::optional<Standardized<float>> zc, zi;
  if (cfg.mine_standardize) zc = standardize_columns(h.h_cor), zi = standardize_columns(h.h_ind);
  const M& mc = zc ? zc->z : h.h_cor;
  const M& mi = zi ? zi->z : h.h_ind;
  for (std::size_t k = 0; k < cfg.mine_steps; ++k) {
    const auto perm_t = marginal_permutation(static_cast<std::size_t>(x.rows()), rng);
    auto mt = mine_loss(mc, mi, model.dis, perm_t, &model.mine_ema);
    detail::scale_grads(mt.g_stat, -1.0f);
    detail::step(st, "T_mine", mt.g_stat);
  }
  const auto perm_e = marginal_permutation(static_cast<std::size_t>(x.rows()), rng);
  auto me = mine_loss(mc, mi, model.dis, perm_e, &model.mine_ema);
  if (zc) me.g_cor = standardize_backward(me.g_cor, *zc), me.g_ind = standardize_backward(me.g_ind, *zi);
  const float lam = static_cast<float>(cfg.lambda_mine);
  const M gc = me.g_cor * lam, gi = me.g_ind * lam;
  auto g_enc = EncoderGrads<float>::zeros(model.dis);
  encode_backward<float>(cfg.mine_trains_shared ? &gc : nullptr, &gi, model.dis, ec, g_enc);
  if (cfg.mine_trains_shared) {
    detail::step(st, "E", g_enc.extractor);
    detail::step(st, "E_cor", g_enc.cor);
  }
  detail::step(st, "E_ind", g_enc.ind);
  rec.add("mine", me.mi);
}

/// Pairings of one batch's rows with target classes, drawn once per batch.
struct SynthDraw {
  M h_cor;
  std::vector<int> labels;
  Pairing center;
  std::vector<Pairing> edges;
};

inline SynthDraw draw_synthesis(const TrainState& st, const Stage1Context& ctx, const Batch& batch,
                                const TrainConfig& cfg, Rng& rng) {
  SynthDraw d;
  d.h_cor = encode(batch.features, st.model.dis).h_cor;
  d.labels = batch.labels;
  const std::size_t n = static_cast<std::size_t>(batch.features.rows());
  d.center = draw_pairing(n, d.labels.size(), ctx.split->target_classes, rng);
  if (!cfg.ablation.no_eps)
    for (std::size_t k = 0; k < st.model.edges.size(); ++k)
      d.edges.push_back(draw_pairing(n, d.labels.size(), ctx.split->target_classes, rng));
  return d;
}

inline PseudoBatch<float> center_samples(const TrainState& st, const Stage1Context& ctx, const SynthDraw& d) {
  return synth_center(d.h_cor, d.labels, d.center, ctx.semantics, ctx.split->source_classes,
                      ctx.split->target_classes, st.model.center);
}

inline PseudoBatch<float> edge_samples(const TrainState& st, const Stage1Context& ctx, const SynthDraw& d,
                                       std::size_t k, const TrainConfig& cfg) {
  return synth_edge(d.h_cor, d.labels, d.edges[k], ctx.semantics, ctx.split->source_classes,
                    ctx.split->target_classes, st.model.edges, k, cfg.edge_epsilon);
}

/// Center and edge synthesizers learn from the frozen head. With
/// `encoders_in_synthesis` the gradient reaching h_cor is accumulated in
/// `g_hcor`.
inline void train_synthesizers(TrainState& st, const Stage1Context& ctx, const SynthDraw& d, const TrainConfig& cfg,
                               M* g_hcor, LossRecord& rec) {
  auto& model = st.model;
  const auto scatter = [&](const M& g_h, const std::vector<std::size_t>& rows) {
    if (!g_hcor) return;
    for (Eigen::Index i = 0; i < g_h.rows(); ++i)
      g_hcor->row(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)])) += g_h.row(i);
  };
  if (!cfg.ablation.no_cps) {
    auto pc = center_samples(st, ctx, d);
    CompatCache<float> c1, c2;
    const auto sc = compat_scores(pc.h, ctx.seen_table, ctx.seen_ids, model.head, &c1);
    const auto ce = compat_ce_loss(sc, pc.convert_labels());
    const auto st_src = compat_scores(pc.h, ctx.source_table, ctx.split->source_classes, model.head, &c2);
    M soft(pc.h.rows(), ctx.source_table.rows());
    for (Eigen::Index i = 0; i < pc.h.rows(); ++i)
      soft.row(i) = soft_labels<float>(ctx.source_table, ctx.semantics.row(pc.target_classes[static_cast<std::size_t>(i)]),
                                       cfg.soft_temperature, cfg.soft_label_mode);
    const auto tl = transfer_loss(st_src, soft);
    M g_h = compat_scores_backward<float>(ce.grad, model.head, c1, nullptr);
    g_h += compat_scores_backward<float>(tl.grad * static_cast<float>(cfg.lambda_trans), model.head, c2, nullptr);
    auto g_c = model.center.net.zero_grads();
    offsets_backward(g_h, model.center, pc.cache, g_c);
    scatter(g_h, pc.source_rows);
    detail::step(st, "C_center", g_c);
    rec.add("center_ce", ce.loss);
    rec.add("transfer", tl.loss);
  }
  if (!cfg.ablation.no_eps) {
    for (std::size_t k = 0; k < model.edges.size(); ++k) {
      auto pe = edge_samples(st, ctx, d, k, cfg);
      CompatCache<float> cc;
      const auto sc = compat_scores(pe.h, ctx.seen_table, ctx.seen_ids, model.head, &cc);
      const auto ce = compat_ce_loss(sc, pe.convert_labels());
      const M g_h = compat_scores_backward<float>(ce.grad, model.head, cc, nullptr);
      auto g_c = model.edges[k].net.zero_grads();
      offsets_backward(g_h, model.edges[k], pe.cache, g_c);
      scatter(g_h, pe.source_rows);
      detail::step(st, "C_edge" + std::to_string(k), g_c);
      rec.add("edge_ce", ce.loss);
    }
  }
}

/// W learns from center samples (target labels) and edge samples (source labels).
inline void head_on_pseudo(TrainState& st, const Stage1Context& ctx, const SynthDraw& d, const TrainConfig& cfg,
                           LossRecord& rec) {
  auto& model = st.model;
  std::vector<M> blocks;
  std::vector<int> labels;
  if (!cfg.ablation.no_cps) {
    auto pc = center_samples(st, ctx, d);
    blocks.push_back(pc.h);
    labels.insert(labels.end(), pc.head_labels().begin(), pc.head_labels().end());
  }
  if (!cfg.ablation.no_eps)
    for (std::size_t k = 0; k < model.edges.size(); ++k) {
      auto pe = edge_samples(st, ctx, d, k, cfg);
      blocks.push_back(pe.h);
      labels.insert(labels.end(), pe.head_labels().begin(), pe.head_labels().end());
    }
  if (labels.empty()) return;
  M pooled(static_cast<Eigen::Index>(labels.size()), d.h_cor.cols());
  Eigen::Index at = 0;
  for (const auto& m : blocks) {
    pooled.middleRows(at, m.rows()) = m;
    at += m.rows();
  }
  CompatCache<float> cc;
  const auto sc = compat_scores(pooled, ctx.seen_table, ctx.seen_ids, model.head, &cc);
  const auto ce = compat_ce_loss(sc, labels);
  auto g_head = model.head.net.zero_grads();
  compat_scores_backward(ce.grad, model.head, cc, &g_head);
  detail::step(st, "W", g_head);
  rec.add("head_pseudo_ce", ce.loss);
}

/// The domain identifier separates real target latents from center samples.
inline void domain_identifier(TrainState& st, const Stage1Context& ctx, const SynthDraw& d, const M& real_target,
                              const TrainConfig& cfg, LossRecord& rec) {
  auto pc = center_samples(st, ctx, d);
  auto dl = domain_loss(st.model.di, real_target, pc.h, false);
  detail::scale_grads(dl.g_identifier, static_cast<float>(cfg.lambda_di));
  detail::step(st, "DI", dl.g_identifier);
  rec.add("di", dl.loss);
}

/// The center synthesizer learns to make its samples pass as real target latents.
inline void fool_identifier(TrainState& st, const Stage1Context& ctx, const SynthDraw& d, const M& real_target,
                            const TrainConfig& cfg, LossRecord& rec) {
  auto pc = center_samples(st, ctx, d);
  auto fl = domain_loss(st.model.di, real_target, pc.h, true);
  const M g_p = fl.g_pseudo * static_cast<float>(cfg.lambda_di);
  auto g_c = st.model.center.net.zero_grads();
  offsets_backward(g_p, st.model.center, pc.cache, g_c);
  detail::step(st, "C_center", g_c);
  rec.add("di_fool", fl.loss);
}

}  // namespace stage1

/// One stage-1 epoch over `cfg.batches_stage1` source batches.
inline LossRecord stage1_epoch(TrainState& st, const TrainingView& view, const SourceTargetSplit& split,
                               const TrainConfig& cfg, std::uint64_t epoch) {
  const Stage1Context ctx(view, split);
  const auto& b = view.bundle();
  auto& model = st.model;
  const auto& abl = cfg.ablation;

  BatchStream src_stream(b, view.rows_of(split.source_classes), cfg.batch_size, derive_seed(cfg.seed, {epoch, 11}));
  BatchStream tgt_stream(b, view.rows_of(split.target_classes), cfg.batch_size, derive_seed(cfg.seed, {epoch, 12}));
  Rng rng = make_rng(cfg.seed, {epoch, 13});

  LossRecord rec;
  for (std::size_t bi = 0; bi < cfg.batches_stage1; ++bi) {
    detail::with_context("stage 1 batch " + std::to_string(bi), [&] {
      const Batch batch = view.batch(src_stream.next_rows());
      stage1::classify(st, ctx, batch, cfg, rec);
      if (!abl.no_tfd) {
        stage1::adversarial(st, ctx, batch, cfg, rec);
        stage1::reconstruct(st, batch, cfg, rec);
        stage1::mutual_information(st, batch, cfg, rng, rec);
      }
      if (abl.no_cps && abl.no_eps) return;

      // pseudo samples toward the target classes; encoders frozen unless encoders_in_synthesis
      EncodeCache<float> syn_ec;
      const bool enc_grad = cfg.encoders_in_synthesis;
      if (enc_grad) encode(batch.features, model.dis, &syn_ec);
      const auto draw = stage1::draw_synthesis(st, ctx, batch, cfg, rng);
      MatrixF g_hcor = MatrixF::Zero(draw.h_cor.rows(), draw.h_cor.cols());
      stage1::train_synthesizers(st, ctx, draw, cfg, enc_grad ? &g_hcor : nullptr, rec);
      stage1::head_on_pseudo(st, ctx, draw, cfg, rec);
      if (!abl.no_cps) {
        const Batch tb = view.batch(tgt_stream.next_rows());
        const MatrixF real = encode(tb.features, model.dis).h_cor;
        stage1::domain_identifier(st, ctx, draw, real, cfg, rec);
        stage1::fool_identifier(st, ctx, draw, real, cfg, rec);
      }
      if (enc_grad) {
        auto g_enc = EncoderGrads<float>::zeros(model.dis);
        encode_backward<float>(&g_hcor, nullptr, model.dis, syn_ec, g_enc);
        detail::step(st, "E", g_enc.extractor);
        if (!abl.no_tfd) detail::step(st, "E_cor", g_enc.cor);
      }
    });
  }
  return rec;
}

/// One stage-2 epoch: seen classes are sources, unseen classes targets.
/// Only C_center and W change.
inline LossRecord stage2_epoch(TrainState& st, const TrainingView& view, const TrainConfig& cfg, std::uint64_t epoch) {
  LossRecord rec;
  if (cfg.ablation.no_cps) return rec;
  using M = MatrixF;
  const auto& b = view.bundle();
  auto& model = st.model;
  const M sem = b.semantics;
  const auto& seen = b.seen_classes;
  const auto& unseen = b.unseen_classes;
  std::vector<int> all_ids(b.num_classes());
  std::iota(all_ids.begin(), all_ids.end(), 0);
  const M seen_table = semantic_table<float>(sem, seen);
  const M all_table = semantic_table<float>(sem, all_ids);
  M soft_by_target(static_cast<Eigen::Index>(unseen.size()), seen_table.rows());
  for (std::size_t t = 0; t < unseen.size(); ++t)
    soft_by_target.row(static_cast<Eigen::Index>(t)) =
        soft_labels<float>(seen_table, sem.row(unseen[t]), cfg.soft_temperature, cfg.soft_label_mode);

  BatchStream stream(b, view.rows_of(seen), cfg.batch_size, derive_seed(cfg.seed, {epoch, 21}));
  Rng rng = make_rng(cfg.seed, {epoch, 22});
  for (std::size_t bi = 0; bi < cfg.batches_stage2; ++bi) {
    detail::with_context("stage 2 batch " + std::to_string(bi), [&] {
      const Batch batch = view.batch(stream.next_rows());
      const M h_cor = encode(batch.features, model.dis).h_cor;
      const auto pairing = draw_pairing(batch.labels.size(), batch.labels.size(), unseen, rng);
      {
        auto pc = synth_center(h_cor, batch.labels, pairing, sem, seen, unseen, model.center);
        CompatCache<float> cc;
        const auto sc = compat_scores(pc.h, seen_table, seen, model.head, &cc);
        M soft(pc.h.rows(), seen_table.rows());
        for (Eigen::Index i = 0; i < pc.h.rows(); ++i) {
          const auto t = std::find(unseen.begin(), unseen.end(), pc.target_classes[static_cast<std::size_t>(i)]) - unseen.begin();
          soft.row(i) = soft_by_target.row(t);
        }
        const auto tl = transfer_loss(sc, soft);
        const M g_h = compat_scores_backward<float>(tl.grad * static_cast<float>(cfg.lambda_trans), model.head, cc, nullptr);
        auto g_c = model.center.net.zero_grads();
        offsets_backward(g_h, model.center, pc.cache, g_c);
        detail::step(st, "C_center", g_c, true);
        rec.add("transfer", tl.loss);
      }
      {
        auto pc = synth_center(h_cor, batch.labels, pairing, sem, seen, unseen, model.center);
        M pooled = pc.h;
        std::vector<int> labels = pc.head_labels();
        if (cfg.stage2_real_seen) {
          pooled.conservativeResize(pc.h.rows() + h_cor.rows(), Eigen::NoChange);
          pooled.bottomRows(h_cor.rows()) = h_cor;
          labels.insert(labels.end(), batch.labels.begin(), batch.labels.end());
        }
        CompatCache<float> cc;
        const auto sc = compat_scores(pooled, all_table, all_ids, model.head, &cc);
        const auto ce = compat_ce_loss(sc, labels);
        auto g_head = model.head.net.zero_grads();
        compat_scores_backward(ce.grad, model.head, cc, &g_head);
        detail::step(st, "W", g_head, true);
        rec.add("ce", ce.loss);
      }
    });
  }
  return rec;
}

using EpochCallback = std::function<void(const EpochRecord&, const TrainState&)>;

/// Runs the remaining epochs of `state` (all of them for a fresh state).
inline TrainReport train(const DatasetBundle& b, const TrainConfig& cfg, TrainState& state, const Partition& part,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (cfg.n_target >= b.num_seen())
    throw ConfigError("train: n_target=" + std::to_string(cfg.n_target) + " must be below the " +
                      std::to_string(b.num_seen()) + " seen classes");
  const TrainingView view(b, part.train);
  TrainReport report;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t epoch = state.epochs_done; epoch < cfg.epochs; ++epoch) {
    const auto e0 = std::chrono::steady_clock::now();
    const std::uint64_t split_seed = cfg.fixed_split ? cfg.seed : derive_seed(cfg.seed, {epoch, 1});
    const auto split = split_source_target(b, cfg.n_target, split_seed);
    EpochRecord er;
    er.epoch = epoch;
    detail::with_context("epoch " + std::to_string(epoch + 1), [&] {
      er.stage1 = stage1_epoch(state, view, split, cfg, epoch);
      er.stage2 = stage2_epoch(state, view, cfg, epoch);
    });
    state.epochs_done = epoch + 1;
    const bool last = epoch + 1 == cfg.epochs;
    if (cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last)) {
      er.test = evaluate_gzsl(state.model, b, part);
    }
    if (!part.val.empty() && (cfg.eval_every > 0 ? ((epoch + 1) % cfg.eval_every == 0 || last) : last)) {
      er.val_score = validation_score(state.model, b, part);
      if (er.val_score > state.best_val) {
        state.best_val = er.val_score;
        state.best_epoch = epoch + 1;
        report.best = state;
      }
    }
    er.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - e0).count();
    if (on_epoch) on_epoch(er, state);
    report.epochs.push_back(std::move(er));
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

/// Partition for a run: stratified split, optionally few-shot subsampled.
inline Partition run_partition(const DatasetBundle& b, const TrainConfig& cfg) {
  auto p = make_partition(b, {cfg.seen_test_fraction, cfg.val_fraction}, cfg.seed);
  if (cfg.fszu_shots > 0) p = subsample_fszu(b, p, cfg.fszu_shots, derive_seed(cfg.seed, {0xf5}));
  return p;
}

struct TrainResult {
  TrainState state;
  TrainReport report;
  Partition partition;
};

/// Fresh run from scratch.
inline TrainResult train(const DatasetBundle& b, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  TrainResult r;
  r.partition = run_partition(b, cfg);
  r.state = TrainState::fresh(cfg.dims(b.feature_dim(), b.semantic_dim()), cfg);
  r.report = train(b, cfg, r.state, r.partition, on_epoch);
  return r;
}

}  // namespace tdcss
