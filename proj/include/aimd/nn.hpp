#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "aimd/autograd.hpp"

namespace aimd {

/// Ordered, named collection of trainable tensors. Order defines checkpoint layout.
template <class T>
class ParamSet {
 public:
  Var<T> add(std::string name, Tensor<T> init) {
    for (auto& [n, _] : items_)
      if (n == name) throw ConfigError("duplicate parameter name: " + name);
    Var<T> v(std::move(init), true);
    items_.emplace_back(std::move(name), v);
    return v;
  }

  const std::vector<std::pair<std::string, Var<T>>>& items() const { return items_; }
  std::vector<std::pair<std::string, Var<T>>>& items() { return items_; }

  const Var<T>* find(const std::string& name) const {
    for (auto& [n, v] : items_)
      if (n == name) return &v;
    return nullptr;
  }

  size_t scalar_count() const {
    size_t n = 0;
    for (auto& [_, v] : items_) n += v.value().size();
    return n;
  }

  size_t scalar_count_with_prefix(const std::string& prefix) const {
    size_t n = 0;
    for (auto& [name, v] : items_)
      if (name.rfind(prefix, 0) == 0) n += v.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : items_) v.zero_grad();
  }

  /// Frozen parameters never enter the autograd graph.
  void set_trainable(bool on) {
    for (auto& [_, v] : items_) v.set_requires_grad(on);
  }

  uint64_t fingerprint() const {
    uint64_t h = fnv1a(nullptr, 0);
    for (auto& [name, v] : items_) {
      h = fnv1a(name.data(), name.size(), h);
      h = fnv1a(v.value().data(), v.value().size() * sizeof(T), h);
    }
    return h;
  }

  void copy_values_from(const ParamSet& other) {
    if (other.items_.size() != items_.size()) throw ConfigError("parameter sets differ in size");
    for (size_t i = 0; i < items_.size(); ++i) {
      if (items_[i].first != other.items_[i].first || items_[i].second.shape() != other.items_[i].second.shape())
        throw ConfigError("parameter mismatch at " + items_[i].first);
      items_[i].second.mutable_value() = other.items_[i].second.value();
    }
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> items_;
};

enum class Init { kHe, kSmall, kZero };

template <class T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;
  int stride = 1;
  int pad = 0;
  int groups = 1;

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias, stride, pad, groups); }
  int out_channels() const { return weight.dim(0); }
};

struct ConvSpec {
  int in = 0;
  int out = 0;
  int kernel = 3;
  int stride = 1;
  int groups = 1;
  bool bias = true;
  Init init = Init::kHe;
};

template <class T>
Conv2d<T> make_conv(ParamSet<T>& ps, const std::string& name, const ConvSpec& s, std::mt19937_64& rng) {
  if (s.in <= 0 || s.out <= 0 || s.in % s.groups || s.out % s.groups)
    throw ShapeError("conv " + name + ": invalid channel/group configuration");
  Shape ws{s.out, s.in / s.groups, s.kernel, s.kernel};
  const int fan_in = (s.in / s.groups) * s.kernel * s.kernel;
  Tensor<T> w(ws);
  switch (s.init) {
    case Init::kHe:
      w = Tensor<T>::randn(ws, static_cast<T>(std::sqrt(2.0 / fan_in)), rng);
      break;
    case Init::kSmall:
      w = Tensor<T>::randn(ws, static_cast<T>(0.01), rng);
      break;
    case Init::kZero:
      break;
  }
  Conv2d<T> c;
  c.weight = ps.add(name + ".weight", std::move(w));
  if (s.bias) c.bias = ps.add(name + ".bias", Tensor<T>({s.out}));
  c.stride = s.stride;
  c.pad = s.kernel / 2;
  c.groups = s.groups;
  return c;
}

template <class T>
struct GroupNorm {
  Var<T> gamma;
  Var<T> beta;
  int groups = 1;
  Var<T> operator()(const Var<T>& x) const { return group_norm(x, gamma, beta, groups); }
};

inline int default_norm_groups(int channels) {
  for (int g : {8, 4, 2})
    if (channels % g == 0 && channels / g >= 2) return g;
  return 1;
}

template <class T>
GroupNorm<T> make_group_norm(ParamSet<T>& ps, const std::string& name, int channels) {
  GroupNorm<T> g;
  g.gamma = ps.add(name + ".gamma", Tensor<T>({channels}, T(1)));
  g.beta = ps.add(name + ".beta", Tensor<T>({channels}));
  g.groups = default_norm_groups(channels);
  return g;
}

/// conv -> GN -> ReLU, the unit used throughout backbone and towers.
template <class T>
struct ConvNormAct {
  Conv2d<T> conv;
  GroupNorm<T> norm;
  Var<T> operator()(const Var<T>& x) const { return relu(norm(conv(x))); }
};

template <class T>
ConvNormAct<T> make_conv_norm_act(ParamSet<T>& ps, const std::string& name, ConvSpec s, std::mt19937_64& rng) {
  s.bias = false;
  ConvNormAct<T> u;
  u.conv = make_conv(ps, name + ".conv", s, rng);
  u.norm = make_group_norm(ps, name + ".gn", s.out);
  return u;
}

}  // namespace aimd
