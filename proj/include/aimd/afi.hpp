#pragma once

#include <random>
#include <string>
#include <vector>

#include "aimd/nn.hpp"

namespace aimd {

inline constexpr int kAfiGroups = 16;
inline constexpr int kAttentionReduction = 16;
inline constexpr int kSpatialKernel = 7;

/// CBAM-style channel gate: sigmoid(mlp(avgpool) + mlp(maxpool)) with a shared bottleneck.
template <class T>
struct ChannelAttention {
  Conv2d<T> fc1;  // C -> C/16, as a 1x1 conv on [N,C,1,1]
  Conv2d<T> fc2;  // C/16 -> C

  Var<T> weights(const Var<T>& x) const {
    auto mlp = [&](const Var<T>& d) { return fc2(relu(fc1(d))); };
    return sigmoid(add(mlp(global_avg_pool(x)), mlp(global_max_pool(x))));
  }
  Var<T> operator()(const Var<T>& x) const { return mul(x, weights(x)); }
};

/// Per-location gate: sigmoid(conv7x7([mean_c, max_c])).
template <class T>
struct SpatialAttention {
  Conv2d<T> conv;  // 2 -> 1, 7x7, no bias

  Var<T> weights(const Var<T>& x) const {
    return sigmoid(conv(concat_channels<T>({channel_mean(x), channel_max(x)})));
  }
  Var<T> operator()(const Var<T>& x) const { return mul(x, weights(x)); }
};

template <class T>
Var<T> channel_attention(const Var<T>& x, const ChannelAttention<T>& p) {
  return p(x);
}

template <class T>
Var<T> spatial_attention(const Var<T>& x, const SpatialAttention<T>& p) {
  return p(x);
}

/// 3x3 grouped conv (16 groups) -> GN -> ReLU -> 1x1 conv.
template <class T>
struct GroupConvBlock {
  Conv2d<T> grouped;
  GroupNorm<T> norm;
  Conv2d<T> pointwise;
  Var<T> operator()(const Var<T>& x) const { return pointwise(relu(norm(grouped(x)))); }
};

template <class T>
struct AfiBranch {
  GroupConvBlock<T> decode;
  ChannelAttention<T> channel;
  SpatialAttention<T> spatial;
  GroupConvBlock<T> refine;
};

/// Attention-based feature interactor over k branch feature maps of equal shape.
///
/// Every branch decodes the channel concatenation of all inputs, gates it by channel then spatial
/// attention, adds its own input back, and refines the sum. In bypass mode the inputs are returned
/// untouched, which is the plain multi-branch configuration.
template <class T>
class Afi {
 public:
  Afi() = default;
  Afi(std::vector<AfiBranch<T>> branches, int channels) : branches_(std::move(branches)), channels_(channels) {}

  std::vector<Var<T>> operator()(const std::vector<Var<T>>& in) const {
    if (in.size() != branches_.size())
      throw ShapeError("afi: expected " + std::to_string(branches_.size()) + " inputs, got " +
                       std::to_string(in.size()));
    for (const auto& f : in) {
      detail::require_rank4(f.shape(), "afi");
      if (f.shape() != in[0].shape()) throw ShapeError("afi: branch inputs differ in shape");
      if (f.dim(1) != channels_)
        throw ShapeError("afi: expected " + std::to_string(channels_) + " channels, got " + std::to_string(f.dim(1)));
    }
    if (bypass_) return in;
    const Var<T> fused = concat_channels(in);
    std::vector<Var<T>> out;
    out.reserve(in.size());
    for (size_t k = 0; k < in.size(); ++k) {
      const auto& b = branches_[k];
      Var<T> dec = b.decode(fused);
      Var<T> att = b.spatial(b.channel(dec));
      out.push_back(b.refine(add(att, in[k])));
    }
    return out;
  }

  void set_bypass(bool on) { bypass_ = on; }
  bool bypass() const { return bypass_; }
  size_t branch_count() const { return branches_.size(); }
  int channels() const { return channels_; }
  const AfiBranch<T>& branch(size_t k) const { return branches_.at(k); }
  AfiBranch<T>& branch(size_t k) { return branches_.at(k); }

 private:
  std::vector<AfiBranch<T>> branches_;
  int channels_ = 0;
  bool bypass_ = false;
};

template <class T>
GroupConvBlock<T> make_group_conv_block(ParamSet<T>& ps, const std::string& name, int in, int out,
                                        std::mt19937_64& rng) {
  GroupConvBlock<T> b;
  b.grouped = make_conv(ps, name + ".gconv", ConvSpec{in, out, 3, 1, kAfiGroups, true, Init::kHe}, rng);
  b.norm = make_group_norm(ps, name + ".gn", out);
  b.pointwise = make_conv(ps, name + ".pw", ConvSpec{out, out, 1, 1, 1, true, Init::kHe}, rng);
  return b;
}

template <class T>
Afi<T> make_afi(ParamSet<T>& ps, const std::string& prefix, int channels, int n_branches, std::mt19937_64& rng) {
  if (channels <= 0 || channels % kAfiGroups != 0)
    throw ShapeError("afi: channel width " + std::to_string(channels) + " must be a positive multiple of 16");
  if (n_branches < 2) throw ConfigError("afi: needs at least two branches");
  const int hidden = std::max(1, channels / kAttentionReduction);
  std::vector<AfiBranch<T>> branches;
  for (int k = 0; k < n_branches; ++k) {
    const std::string p = prefix + ".b" + std::to_string(k);
    AfiBranch<T> b;
    b.decode = make_group_conv_block(ps, p + ".decode", n_branches * channels, channels, rng);
    b.channel.fc1 = make_conv(ps, p + ".ca.fc1", ConvSpec{channels, hidden, 1, 1, 1, true, Init::kHe}, rng);
    b.channel.fc2 = make_conv(ps, p + ".ca.fc2", ConvSpec{hidden, channels, 1, 1, 1, true, Init::kHe}, rng);
    b.spatial.conv = make_conv(ps, p + ".sa", ConvSpec{2, 1, kSpatialKernel, 1, 1, false, Init::kHe}, rng);
    b.refine = make_group_conv_block(ps, p + ".refine", channels, channels, rng);
    branches.push_back(std::move(b));
  }
  return Afi<T>(std::move(branches), channels);
}

template <class T>
struct AfiPair {
  Afi<T> cls;
  Afi<T> reg;
};

/// Independent interactors for the classification and regression sub-branches.
template <class T>
AfiPair<T> make_afi_pair(ParamSet<T>& ps, int channels, int n_branches, std::mt19937_64& rng) {
  AfiPair<T> p;
  p.cls = make_afi(ps, "afi_cls", channels, n_branches, rng);
  p.reg = make_afi(ps, "afi_reg", channels, n_branches, rng);
  return p;
}

}  // namespace aimd
