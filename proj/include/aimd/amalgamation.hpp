#pragma once

#include <atomic>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "aimd/detector.hpp"

namespace aimd {

struct LossWeights {
  double det = 1.0;
  double fea = 1.0;
  double dis = 1.0;
  double pse = 1.0;

  void validate() const {
    for (double w : {det, fea, dis, pse})
      if (!std::isfinite(w) || w < 0) throw ConfigError("loss weights must be finite and non-negative");
  }
};

struct DistillConfig {
  double temperature = 5.0;         // distillation
  double pseudo_temperature = 0.1;  // soft pseudo labels
  double threshold = 0.4;           // pseudo-label filter

  void validate() const {
    if (!(temperature > 0)) throw DomainError("distillation temperature must be > 0");
    if (!(pseudo_temperature > 0)) throw DomainError("pseudo-label temperature must be > 0");
    if (!(threshold >= 0 && threshold <= 1)) throw DomainError("pseudo-label threshold must lie in [0, 1]");
  }
};

inline constexpr double kKlEpsilon = 1e-12;

/// Number of times kl_div had to clamp a vanishing reference probability.
inline std::atomic<uint64_t>& kl_clamp_count() {
  static std::atomic<uint64_t> n{0};
  return n;
}

/// Softmax of logits / T with max subtraction.
inline std::vector<double> softmax_temp(std::span<const double> logits, double temperature) {
  if (!(temperature > 0)) throw DomainError("softmax temperature must be > 0");
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double z = 0;
  for (size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp((logits[i] - m) / temperature));
  for (auto& v : p) v /= z;
  return p;
}

/// KL(p || q) = sum p log(p / q), with 0 log 0 = 0.
inline double kl_div(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("kl_div: distributions differ in length");
  double s = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0) continue;
    double qi = q[i];
    if (qi < kKlEpsilon) {
      qi = kKlEpsilon;
      kl_clamp_count()++;
    }
    s += p[i] * std::log(p[i] / qi);
  }
  return std::max(0.0, s);
}

// ---------------------------------------------------------------------------
// Feature loss.

/// Mean squared error between a constant teacher map and adaptor(target).
template <class T>
Var<T> feature_mse(const Var<T>& adapted, const Tensor<T>& teacher) {
  if (adapted.shape() != teacher.shape())
    throw ShapeError("feature_loss: adapted target " + shape_str(adapted.shape()) + " vs teacher " +
                     shape_str(teacher.shape()));
  const auto& a = adapted.value();
  const double m = static_cast<double>(a.size());
  double s = 0;
  Tensor<T> g(a.shape());
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(teacher[i]);
    s += d * d;
    g[i] = static_cast<T>(2.0 * d / m);
  }
  auto an = adapted.node();
  return make_result<T>(Tensor<T>({1}, std::vector<T>{static_cast<T>(s / m)}), {adapted},
                        [an, g = std::move(g)](Node<T>& self) {
                          auto& dst = an->ensure_grad();
                          for (size_t i = 0; i < g.size(); ++i) dst[i] += self.grad[0] * g[i];
                        });
}

/// MSE(F_tea, 1x1 conv(F_tar)). The teacher map is a constant; gradients reach only target and adaptor.
template <class T>
Var<T> feature_loss(const Var<T>& target, const Tensor<T>& teacher, const Conv2d<T>& adaptor) {
  if (target.shape().size() != 4 || teacher.rank() != 4 || target.dim(0) != teacher.dim(0) ||
      target.dim(2) != teacher.dim(2) || target.dim(3) != teacher.dim(3))
    throw ShapeError("feature_loss: spatial mismatch " + shape_str(target.shape()) + " vs " +
                     shape_str(teacher.shape()));
  if (adaptor.weight.dim(1) != target.dim(1) || adaptor.weight.dim(0) != teacher.dim(1) || adaptor.weight.dim(2) != 1)
    throw ShapeError("feature_loss: adaptor does not map target channels to teacher channels");
  return feature_mse(adaptor(target), teacher);
}

/// Per-teacher 1x1 adaptors for the two feature taps (last backbone stage, FPN levels).
template <class T>
struct FeatureAdaptor {
  Conv2d<T> backbone;
  Conv2d<T> fpn;
};

template <class T>
FeatureAdaptor<T> make_feature_adaptor(ParamSet<T>& ps, const std::string& name, int tar_backbone, int tea_backbone,
                                       int tar_fpn, int tea_fpn, std::mt19937_64& rng) {
  FeatureAdaptor<T> a;
  a.backbone = make_conv(ps, name + ".backbone", ConvSpec{tar_backbone, tea_backbone, 1, 1, 1, true, Init::kHe}, rng);
  a.fpn = make_conv(ps, name + ".fpn", ConvSpec{tar_fpn, tea_fpn, 1, 1, 1, true, Init::kHe}, rng);
  return a;
}

/// Feature loss at the end of the backbone plus the FPN levels (level losses averaged), equal weight.
template <class T>
Var<T> feature_loss_taps(const Var<T>& tar_backbone, const std::vector<Var<T>>& tar_fpn, const Tensor<T>& tea_backbone,
                         const std::vector<Tensor<T>>& tea_fpn, const FeatureAdaptor<T>& adaptor) {
  if (tar_fpn.size() != tea_fpn.size()) throw ShapeError("feature_loss: level count mismatch");
  std::vector<Var<T>> terms{feature_loss(tar_backbone, tea_backbone, adaptor.backbone)};
  std::vector<T> w{T(1)};
  for (size_t l = 0; l < tar_fpn.size(); ++l) {
    terms.push_back(feature_loss(tar_fpn[l], tea_fpn[l], adaptor.fpn));
    w.push_back(static_cast<T>(1.0 / static_cast<double>(tar_fpn.size())));
  }
  return weighted_sum(terms, w);
}

// ---------------------------------------------------------------------------
// Distillation and pseudo losses.

/// A location on one image of a flattened [N,L,K] logit map.
struct LocationRef {
  size_t image = 0;
  size_t location = 0;
};

/// sum over `where` of KL(softmax(tea/T) || softmax(tar/T)), divided by max(1, |where|).
/// The teacher map is a constant; d/dz_tar = (q_tar - p_tea) / T per selected location.
template <class T>
Var<T> softened_kl_loss(const Var<T>& tar, const Tensor<T>& tea, const std::vector<LocationRef>& where,
                        double temperature) {
  if (!(temperature > 0)) throw DomainError("temperature must be > 0");
  if (tar.shape().size() != 3 || tar.shape() != tea.shape())
    throw ShapeError("logit maps differ: " + shape_str(tar.shape()) + " vs " + shape_str(tea.shape()));
  const int L = tar.dim(1), K = tar.dim(2);
  const auto& tv = tar.value();
  Tensor<T> g(tv.shape());
  const double norm = std::max<size_t>(1, where.size());
  std::vector<double> zt(K), ze(K);
  double sum = 0;
  for (const auto& w : where) {
    if (w.image >= static_cast<size_t>(tar.dim(0)) || w.location >= static_cast<size_t>(L))
      throw ShapeError("location reference out of range");
    const size_t base = (w.image * L + w.location) * K;
    for (int k = 0; k < K; ++k) {
      zt[k] = tv[base + k];
      ze[k] = tea[base + k];
    }
    const auto q = softmax_temp(zt, temperature);
    const auto p = softmax_temp(ze, temperature);
    sum += kl_div(p, q);
    for (int k = 0; k < K; ++k) g[base + k] += static_cast<T>((q[k] - p[k]) / temperature / norm);
  }
  auto tn = tar.node();
  return make_result<T>(Tensor<T>({1}, std::vector<T>{static_cast<T>(sum / norm)}), {tar},
                        [tn, g = std::move(g)](Node<T>& self) {
                          auto& dst = tn->ensure_grad();
                          for (size_t i = 0; i < g.size(); ++i) dst[i] += self.grad[0] * g[i];
                        });
}

/// Distillation on positive locations of the branch's own labeled images.
template <class T>
Var<T> distillation_loss(const Var<T>& tar, const Tensor<T>& tea, const std::vector<AnchorTargets>& targets,
                         const std::vector<size_t>& images, double temperature) {
  if (targets.size() != images.size()) throw ShapeError("distillation_loss: one target set per image required");
  std::vector<LocationRef> pos;
  for (size_t i = 0; i < images.size(); ++i) {
    if (targets[i].size() != static_cast<size_t>(tar.dim(1)))
      throw ShapeError("distillation_loss: targets do not cover the logit map");
    for (size_t loc = 0; loc < targets[i].size(); ++loc)
      if (targets[i].labels[loc] > 0) pos.push_back({images[i], loc});
  }
  return softened_kl_loss(tar, tea, pos, temperature);
}

/// Locations whose teacher max softmax probability (T = 1) exceeds the threshold.
template <class T>
std::vector<LocationRef> pseudo_label_locations(const Tensor<T>& tea, const std::vector<size_t>& images,
                                                double threshold) {
  if (!(threshold >= 0 && threshold <= 1)) throw DomainError("pseudo-label threshold must lie in [0, 1]");
  const int L = tea.dim(1), K = tea.dim(2);
  std::vector<LocationRef> sel;
  std::vector<double> z(K);
  for (size_t n : images)
    for (int loc = 0; loc < L; ++loc) {
      const size_t base = (n * L + loc) * K;
      for (int k = 0; k < K; ++k) z[k] = tea[base + k];
      const auto p = softmax_temp(z, 1.0);
      if (*std::max_element(p.begin(), p.end()) > threshold) sel.push_back({n, static_cast<size_t>(loc)});
    }
  return sel;
}

template <class T>
struct PseudoLoss {
  Var<T> value;
  size_t selected = 0;
  size_t candidates = 0;
};

/// Soft pseudo-label loss on images the branch has no labels for.
template <class T>
PseudoLoss<T> pseudo_loss(const Var<T>& tar, const Tensor<T>& tea, const std::vector<size_t>& images,
                          double threshold, double pseudo_temperature) {
  if (tar.shape() != tea.shape()) throw ShapeError("pseudo_loss: logit maps differ in shape");
  PseudoLoss<T> out;
  const auto sel = pseudo_label_locations(tea, images, threshold);
  out.selected = sel.size();
  out.candidates = images.size() * static_cast<size_t>(tar.dim(1));
  out.value = softened_kl_loss(tar, tea, sel, pseudo_temperature);
  return out;
}

// ---------------------------------------------------------------------------
// Total loss.

template <class T>
struct BranchTerms {
  Var<T> det;
  Var<T> fea;
  Var<T> dis;
  Var<T> pse;
};

inline const char* const kTermNames[4] = {"det", "fea", "dis", "pse"};

/// sum_k (w_det L_det^k + w_fea L_fea^k + w_dis L_dis^k + w_pse L_pse^k). Undefined terms count as 0.
template <class T>
Var<T> total_loss(const std::vector<BranchTerms<T>>& branches, const LossWeights& w) {
  w.validate();
  std::vector<Var<T>> terms;
  std::vector<T> weights;
  for (size_t k = 0; k < branches.size(); ++k) {
    const Var<T>* t[4] = {&branches[k].det, &branches[k].fea, &branches[k].dis, &branches[k].pse};
    const double ws[4] = {w.det, w.fea, w.dis, w.pse};
    for (int i = 0; i < 4; ++i) {
      if (!t[i]->defined()) continue;
      if (!std::isfinite(static_cast<double>(t[i]->item())))
        throw NumericalError(std::string("non-finite loss term L_") + kTermNames[i] + " in branch " +
                             std::to_string(k));
      terms.push_back(*t[i]);
      weights.push_back(static_cast<T>(ws[i]));
    }
  }
  if (terms.empty()) return constant_scalar<T>(0);
  return weighted_sum(terms, weights);
}

}  // namespace aimd
