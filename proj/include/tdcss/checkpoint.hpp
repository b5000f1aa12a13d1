#pragma once

// TDCK checkpoint files: magic "TDCK", u32 version, the run's config echo,
// model dimensions, training progress, every parameter group as
// (name, dims, float32 payload), optimizer moments, CRC32 over all
// preceding bytes. Little-endian.

#include <string>
#include <vector>

#include "tdcss/binary_io.hpp"
#include "tdcss/trainer.hpp"

namespace tdcss {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_echo;
  std::string config_hash;
  TrainState state;
};

namespace detail {

inline void put_matrix(ByteWriter& w, const MatrixF& m) {
  w.put<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
  w.put<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
  w.put_array(m.data(), static_cast<std::size_t>(m.size()));
}

inline void get_matrix_into(ByteReader& r, MatrixF& m, const std::string& field) {
  const auto rows = r.get<std::uint64_t>(field + " rows");
  const auto cols = r.get<std::uint64_t>(field + " cols");
  if (rows != static_cast<std::uint64_t>(m.rows()) || cols != static_cast<std::uint64_t>(m.cols()))
    throw ShapeError("checkpoint: " + field + " is " + std::to_string(rows) + "x" + std::to_string(cols) +
                     " but the model expects " + shape_string(m));
  r.get_array(m.data(), static_cast<std::size_t>(m.size()), field);
}

inline void put_dims(ByteWriter& w, const ModelDims& d) {
  for (auto v : {d.feature_dim, d.semantic_dim, d.extractor_dim, d.latent_dim, d.hidden1, d.hidden2, d.mine_hidden,
                 d.di_hidden, d.num_edge_nets})
    w.put<std::uint64_t>(v);
  w.put<std::uint8_t>(d.split_extractor ? 1 : 0);
  w.put<std::uint8_t>(d.bilinear_head ? 1 : 0);
}

inline ModelDims get_dims(ByteReader& r) {
  ModelDims d;
  for (auto* v : {&d.feature_dim, &d.semantic_dim, &d.extractor_dim, &d.latent_dim, &d.hidden1, &d.hidden2,
                  &d.mine_hidden, &d.di_hidden, &d.num_edge_nets}) {
    const auto x = r.get<std::uint64_t>("model dims");
    if (x > (1ULL << 24)) throw FormatError("checkpoint: implausible layer width " + std::to_string(x));
    *v = static_cast<std::size_t>(x);
  }
  d.split_extractor = r.get<std::uint8_t>("model flags") != 0;
  d.bilinear_head = r.get<std::uint8_t>("model flags") != 0;
  return d;
}

inline void put_adam(ByteWriter& w, const std::map<std::string, AdamState<float>>& opts) {
  w.put<std::uint64_t>(opts.size());
  for (const auto& [name, s] : opts) {
    w.put_string(name);
    w.put<double>(s.hyper.lr);
    w.put<double>(s.hyper.beta1);
    w.put<double>(s.hyper.beta2);
    w.put<double>(s.hyper.eps);
    w.put<std::int64_t>(s.t);
    for (const auto& m : s.m) put_matrix(w, m);
    for (const auto& v : s.v) put_matrix(w, v);
  }
}

inline void get_adam_into(ByteReader& r, std::map<std::string, AdamState<float>>& opts) {
  const auto n = r.get<std::uint64_t>("optimizer count");
  if (n != opts.size())
    throw FormatError("checkpoint: " + std::to_string(n) + " optimizer states, expected " + std::to_string(opts.size()));
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto name = r.get_string("optimizer name");
    auto it = opts.find(name);
    if (it == opts.end()) throw FormatError("checkpoint: unexpected optimizer state '" + name + "'");
    auto& s = it->second;
    s.hyper.lr = r.get<double>("adam lr");
    s.hyper.beta1 = r.get<double>("adam beta1");
    s.hyper.beta2 = r.get<double>("adam beta2");
    s.hyper.eps = r.get<double>("adam eps");
    s.t = r.get<std::int64_t>("adam step");
    for (auto& m : s.m) get_matrix_into(r, m, name + " first moment");
    for (auto& v : s.v) get_matrix_into(r, v, name + " second moment");
  }
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const TrainState& st, const std::string& config_echo,
                                                   const std::string& config_hash) {
  ByteWriter w;
  w.put_bytes("TDCK");
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(config_echo);
  w.put_string(config_hash);
  detail::put_dims(w, st.model.dims);
  w.put<std::uint64_t>(st.epochs_done);
  w.put<double>(st.best_val);
  w.put<std::uint64_t>(st.best_epoch);
  w.put<double>(st.model.mine_ema.log_value);
  w.put<std::uint8_t>(st.model.mine_ema.initialized ? 1 : 0);
  w.put<double>(st.model.mine_ema.momentum);
  const auto groups = st.model.groups();
  w.put<std::uint64_t>(groups.size());
  for (const auto& [name, net] : groups) {
    w.put_string(name);
    const auto ps = net->params();
    w.put<std::uint64_t>(ps.size());
    for (const auto* p : ps) detail::put_matrix(w, *p);
  }
  detail::put_adam(w, st.stage1_opt);
  detail::put_adam(w, st.stage2_opt);
  w.seal();
  return w.bytes();
}

/// Parses a checkpoint; CRC failures report "checksum mismatch".
inline Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes, const std::string& what = "checkpoint") {
  ByteReader r(std::move(bytes), what);
  r.expect_magic("TDCK");
  r.verify_trailing_crc();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError(what + ": unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.config_echo = r.get_string("config echo");
  ck.config_hash = r.get_string("config hash");
  const ModelDims dims = detail::get_dims(r);
  ck.state.model = Model<float>::init(dims, 0);
  const AdamHyper h{};
  for (auto& [name, net] : ck.state.model.groups())
    ck.state.stage1_opt.emplace(name, AdamState<float>(h, std::as_const(*net).params()));
  for (const char* name : {"W", "C_center"})
    ck.state.stage2_opt.emplace(name, AdamState<float>(h, std::as_const(ck.state.model.group(name)).params()));
  ck.state.epochs_done = static_cast<std::size_t>(r.get<std::uint64_t>("epochs done"));
  ck.state.best_val = r.get<double>("best score");
  ck.state.best_epoch = static_cast<std::size_t>(r.get<std::uint64_t>("best epoch"));
  ck.state.model.mine_ema.log_value = r.get<double>("mine average");
  ck.state.model.mine_ema.initialized = r.get<std::uint8_t>("mine average flag") != 0;
  ck.state.model.mine_ema.momentum = r.get<double>("mine momentum");
  const auto n_groups = r.get<std::uint64_t>("group count");
  auto groups = ck.state.model.groups();
  if (n_groups != groups.size())
    throw FormatError(what + ": " + std::to_string(n_groups) + " parameter groups, dims imply " +
                      std::to_string(groups.size()));
  for (auto& [name, net] : groups) {
    const auto stored = r.get_string("group name");
    if (stored != name) throw FormatError(what + ": group '" + stored + "' where '" + name + "' was expected");
    auto ps = net->params();
    if (r.get<std::uint64_t>("param count") != ps.size())
      throw FormatError(what + ": group '" + name + "' has the wrong number of tensors");
    for (std::size_t i = 0; i < ps.size(); ++i) detail::get_matrix_into(r, *ps[i], name + "[" + std::to_string(i) + "]");
    for (auto* p : ps)
      if (!p->allFinite()) throw FormatError(what + ": non-finite parameters in group '" + name + "'");
  }
  detail::get_adam_into(r, ck.state.stage1_opt);
  detail::get_adam_into(r, ck.state.stage2_opt);
  r.expect_crc_next();
  return ck;
}

inline void save_checkpoint(const std::string& path, const TrainState& st, const std::string& config_echo,
                            const std::string& config_hash) {
  ByteWriter w;
  const auto bytes = encode_checkpoint(st, config_echo, config_hash);
  w.put_array(bytes.data(), bytes.size());
  w.write_file(path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(std::move(buf), "checkpoint " + path);
}

/// The model must match the bundle's feature and semantic widths.
template <class T>
void require_compatible(const Model<T>& m, const DatasetBundle& b) {
  if (m.dims.feature_dim != b.feature_dim() || m.dims.semantic_dim != b.semantic_dim())
    throw ShapeError("checkpoint expects features " + std::to_string(m.dims.feature_dim) + " / semantics " +
                     std::to_string(m.dims.semantic_dim) + " but the bundle has " + std::to_string(b.feature_dim()) +
                     " / " + std::to_string(b.semantic_dim()));
}

}  // namespace tdcss
