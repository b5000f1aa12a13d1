#pragma once

// All trainable parameter groups of the model and their dimensions.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tdcss/compat.hpp"
#include "tdcss/disentangler.hpp"
#include "tdcss/synthesis.hpp"

namespace tdcss {

/// Layer widths. `paper()` gives the widths used on 2048-D CNN features;
/// `desk()` scales everything to the feature width for CPU-sized runs.
struct ModelDims {
  std::size_t feature_dim = 0;         // D_x
  std::size_t semantic_dim = 0;        // D_a
  std::size_t extractor_dim = 1800;    // E output
  std::size_t latent_dim = 1024;       // D_h
  std::size_t hidden1 = 1024;          // first hidden width of W, C, R
  std::size_t hidden2 = 512;           // second hidden width of W, C, R
  std::size_t mine_hidden = 256;
  std::size_t di_hidden = 512;
  std::size_t num_edge_nets = 2;
  bool split_extractor = false;        // no disentanglement: halves of E
  bool bilinear_head = false;

  static ModelDims paper(std::size_t dx, std::size_t da) {
    ModelDims d;
    d.feature_dim = dx;
    d.semantic_dim = da;
    return d;
  }

  static ModelDims desk(std::size_t dx, std::size_t da) {
    ModelDims d;
    d.feature_dim = dx;
    d.semantic_dim = da;
    d.extractor_dim = 2 * dx;
    d.latent_dim = dx;
    d.hidden1 = dx;
    d.hidden2 = std::max<std::size_t>(dx / 2, 2);
    d.mine_hidden = dx;
    d.di_hidden = std::max<std::size_t>(dx / 2, 2);
    return d;
  }

  /// Width of h_cor / h_ind as seen by downstream nets.
  std::size_t effective_latent() const { return split_extractor ? extractor_dim / 2 : latent_dim; }

  void validate() const {
    if (feature_dim == 0 || semantic_dim == 0 || extractor_dim == 0 || latent_dim == 0 || hidden1 == 0 ||
        hidden2 == 0 || mine_hidden == 0 || di_hidden == 0)
      throw ConfigError("model dims: all widths must be positive");
    if (split_extractor && extractor_dim % 2 != 0)
      throw ConfigError("model dims: extractor width must be even when split in halves");
  }
};

template <class T>
struct Model {
  ModelDims dims;
  DisentangleNets<T> dis;
  CompatHead<T> head;
  ConvertNet<T> center;
  std::vector<ConvertNet<T>> edges;
  DomainIdentifier<T> di;
  MineEma mine_ema;

  static Model init(const ModelDims& d, std::uint64_t seed) {
    d.validate();
    Model m;
    m.dims = d;
    const auto relu = Activation::relu, id = Activation::identity;
    const std::size_t h = d.effective_latent();
    auto rng_for = [&](std::uint64_t tag) { return make_rng(seed, {0x1417, tag}); };
    {
      Rng r = rng_for(1);
      m.dis.extractor = Mlp<T>::make({d.feature_dim, d.extractor_dim, d.extractor_dim}, relu, relu, r);
    }
    {
      Rng r = rng_for(2);
      m.dis.cor = Mlp<T>::make({d.extractor_dim, d.latent_dim, d.latent_dim}, relu, relu, r);
    }
    {
      Rng r = rng_for(3);
      m.dis.ind = Mlp<T>::make({d.extractor_dim, d.latent_dim, d.latent_dim}, relu, relu, r);
    }
    {
      Rng r = rng_for(4);
      m.dis.reconstructor = Mlp<T>::make({2 * h, d.hidden1, d.hidden2, d.feature_dim}, relu, id, r);
    }
    {
      Rng r = rng_for(5);
      m.dis.mine_stat = Mlp<T>::make({2 * h, d.mine_hidden, 1}, relu, id, r);
    }
    m.dis.split_extractor = d.split_extractor;
    {
      Rng r = rng_for(6);
      if (d.bilinear_head)
        m.head.net = Mlp<T>::make({h, d.semantic_dim}, id, id, r);
      else
        m.head.net = Mlp<T>::make({h, d.hidden1, d.hidden2, d.semantic_dim}, relu, id, r);
      m.head.bilinear = d.bilinear_head;
    }
    {
      Rng r = rng_for(7);
      m.center.net = Mlp<T>::make({d.semantic_dim, d.hidden1, d.hidden2, h}, relu, id, r);
    }
    for (std::size_t k = 0; k < d.num_edge_nets; ++k) {
      Rng r = rng_for(100 + k);
      m.edges.push_back(ConvertNet<T>{Mlp<T>::make({d.semantic_dim, d.hidden1, d.hidden2, h}, relu, id, r)});
    }
    {
      Rng r = rng_for(8);
      m.di.net = Mlp<T>::make({h, d.di_hidden, 2}, Activation::leaky_relu, id, r);
    }
    return m;
  }

  /// Named parameter groups in a fixed order.
  std::vector<std::pair<std::string, Mlp<T>*>> groups() {
    std::vector<std::pair<std::string, Mlp<T>*>> g{{"E", &dis.extractor},      {"E_cor", &dis.cor},
                                                   {"E_ind", &dis.ind},        {"R", &dis.reconstructor},
                                                   {"T_mine", &dis.mine_stat}, {"W", &head.net},
                                                   {"C_center", &center.net}};
    for (std::size_t k = 0; k < edges.size(); ++k) g.emplace_back("C_edge" + std::to_string(k), &edges[k].net);
    g.emplace_back("DI", &di.net);
    return g;
  }

  std::vector<std::pair<std::string, const Mlp<T>*>> groups() const {
    std::vector<std::pair<std::string, const Mlp<T>*>> out;
    for (auto& [name, net] : const_cast<Model*>(this)->groups()) out.emplace_back(name, net);
    return out;
  }

  Mlp<T>& group(const std::string& name) {
    for (auto& [n, net] : groups())
      if (n == name) return *net;
    throw UsageError("model: no parameter group '" + name + "'");
  }

  const Mlp<T>& group(const std::string& name) const { return const_cast<Model*>(this)->group(name); }

  template <class U>
  Model<U> cast() const {
    Model<U> m;
    m.dims = dims;
    m.dis.extractor = dis.extractor.template cast<U>();
    m.dis.cor = dis.cor.template cast<U>();
    m.dis.ind = dis.ind.template cast<U>();
    m.dis.reconstructor = dis.reconstructor.template cast<U>();
    m.dis.mine_stat = dis.mine_stat.template cast<U>();
    m.dis.split_extractor = dis.split_extractor;
    m.head.net = head.net.template cast<U>();
    m.head.bilinear = head.bilinear;
    m.center.net = center.net.template cast<U>();
    for (const auto& e : edges) m.edges.push_back(ConvertNet<U>{e.net.template cast<U>()});
    m.di.net = di.net.template cast<U>();
    m.mine_ema = mine_ema;
    return m;
  }
};

/// FNV-1a over the raw bytes of every parameter of a group.
template <class T>
std::uint64_t parameter_hash(const Mlp<T>& net) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* p : net.params()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(p->size()) * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

template <class T>
bool all_parameters_finite(const Model<T>& m) {
  for (const auto& [name, net] : m.groups())
    for (const auto* p : net->params())
      if (!p->allFinite()) return false;
  return true;
}

}  // namespace tdcss
