#pragma once

#include <array>
#include <bit>
#include <tuple>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aimd/afi.hpp"
#include "aimd/datasets.hpp"
#include "aimd/nn.hpp"

namespace aimd {

/// Small 4-stage convolutional backbone feeding an FPN.
///
/// Stage k >= 1 halves the resolution; the stem reduces by `stem_stride()`. The FPN taps the last
/// `num_levels` stages, so level l has stride base_stride * 2^l.
struct BackboneConfig {
  std::array<int, 4> stage_widths{32, 64, 128, 128};
  int num_levels = 3;
  int base_stride = 8;
  int fpn_channels = 64;
  int tower_depth = 2;
  /// Level l covers max regression distances in [range_scale * s_{l-1}, range_scale * s_l).
  double range_scale = 8.0;

  void validate() const {
    for (int w : stage_widths)
      if (w <= 0) throw ConfigError("backbone: stage widths must be positive");
    if (num_levels < 2 || num_levels > 4) throw ConfigError("backbone: num_levels must be in [2, 4]");
    if (fpn_channels <= 0) throw ConfigError("backbone: fpn_channels must be positive");
    if (tower_depth < 0) throw ConfigError("backbone: tower_depth must be non-negative");
    if (range_scale <= 0) throw ConfigError("backbone: range_scale must be positive");
    const int div = 1 << (4 - num_levels);
    if (base_stride <= 0 || base_stride % div != 0 || !std::has_single_bit(static_cast<unsigned>(base_stride / div)))
      throw ConfigError("backbone: base_stride " + std::to_string(base_stride) + " incompatible with " +
                        std::to_string(num_levels) + " levels");
    if (base_stride / div < 2) throw ConfigError("backbone: stem stride must be at least 2");
  }
  int stem_stride() const { return base_stride >> (4 - num_levels); }
  int level_stride(int l) const { return base_stride << l; }
  int largest_stride() const { return level_stride(num_levels - 1); }
};

struct BranchSpec {
  std::string name;
  std::vector<int> category_ids;  // class label c (1-based) maps to category_ids[c - 1]
};

struct DetectorConfig {
  BackboneConfig backbone;
  std::vector<BranchSpec> branches;
  bool afi_enabled = false;
};

/// One pyramid level of a branch: cls logits [N,K,H,W], distances [N,4,H,W], centerness logits [N,1,H,W].
template <class T>
struct LevelOutputs {
  Var<T> cls;
  Var<T> reg;
  Var<T> ctr;
};

template <class T>
struct HeadOutputs {
  std::vector<LevelOutputs<T>> levels;
};

/// Location-major view of a branch over all levels: [N,L,K], [N,L,4], [N,L,1].
template <class T>
struct FlatOutputs {
  Var<T> cls;
  Var<T> reg;
  Var<T> ctr;
};

template <class T>
FlatOutputs<T> flatten(const HeadOutputs<T>& h) {
  std::vector<Var<T>> c, r, z;
  for (const auto& l : h.levels) {
    c.push_back(l.cls);
    r.push_back(l.reg);
    z.push_back(l.ctr);
  }
  return {flatten_levels(c), flatten_levels(r), flatten_levels(z)};
}

template <class T>
struct ForwardResult {
  Var<T> backbone_tap;           // last backbone stage
  std::vector<Var<T>> fpn;       // one per level
  std::vector<HeadOutputs<T>> branches;
};

template <class T>
struct BranchHead {
  std::vector<ConvNormAct<T>> cls_tower;
  std::vector<ConvNormAct<T>> reg_tower;
  Conv2d<T> cls_pred;
  Conv2d<T> reg_pred;
  Conv2d<T> ctr_pred;
  std::vector<Var<T>> scales;  // one per level
  int num_classes = 0;
};

struct LevelSpec {
  int stride = 0;
  int height = 0;
  int width = 0;
  double lo = 0;
  double hi = std::numeric_limits<double>::infinity();
  int locations() const { return height * width; }
};

inline std::vector<LevelSpec> level_specs(const BackboneConfig& cfg, int image_h, int image_w) {
  std::vector<LevelSpec> out;
  for (int l = 0; l < cfg.num_levels; ++l) {
    LevelSpec s;
    s.stride = cfg.level_stride(l);
    s.height = image_h / s.stride;
    s.width = image_w / s.stride;
    s.lo = l == 0 ? 0.0 : cfg.range_scale * cfg.level_stride(l - 1);
    s.hi = l + 1 == cfg.num_levels ? std::numeric_limits<double>::infinity() : cfg.range_scale * s.stride;
    out.push_back(s);
  }
  return out;
}

/// Multi-branch FCOS-style detector: shared backbone + FPN, one head per branch, optional interactors.
template <class T>
class Detector {
 public:
  Detector(DetectorConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.backbone.validate();
    if (cfg_.branches.empty()) throw ConfigError("detector: at least one branch required");
    if (cfg_.afi_enabled && cfg_.branches.size() < 2) throw ConfigError("detector: interactor needs >= 2 branches");
    std::mt19937_64 rng(seed);
    build_backbone(rng);
    for (size_t k = 0; k < cfg_.branches.size(); ++k) build_branch(k, rng);
    if (cfg_.afi_enabled)
      afi_ = make_afi_pair(params_, cfg_.backbone.fpn_channels, static_cast<int>(cfg_.branches.size()), rng);
  }

  Detector(const Detector&) = delete;
  Detector& operator=(const Detector&) = delete;
  Detector(Detector&&) noexcept = default;
  Detector& operator=(Detector&&) noexcept = default;

  const DetectorConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  size_t branch_count() const { return heads_.size(); }
  const BranchHead<T>& head(size_t k) const { return heads_.at(k); }
  bool has_afi() const { return afi_.has_value(); }
  AfiPair<T>& afi() { return afi_.value(); }
  const AfiPair<T>& afi() const { return afi_.value(); }
  void set_afi_bypass(bool on) {
    if (afi_) {
      afi_->cls.set_bypass(on);
      afi_->reg.set_bypass(on);
    }
  }

  size_t branch_index(const std::string& name) const {
    for (size_t k = 0; k < cfg_.branches.size(); ++k)
      if (cfg_.branches[k].name == name) return k;
    throw ConfigError("unknown branch '" + name + "'");
  }

  void check_input(const Shape& s) const {
    if (s.size() != 4 || s[1] != 3) throw ShapeError("detector input must be [N,3,H,W], got " + shape_str(s));
    const int m = cfg_.backbone.largest_stride();
    if (s[2] % m != 0 || s[3] % m != 0)
      throw ShapeError("input " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                       " is not divisible by the largest stride " + std::to_string(m));
  }

  /// Backbone and FPN. Returns the last stage output and one shared-width map per level.
  std::pair<Var<T>, std::vector<Var<T>>> backbone_fpn_forward(const Var<T>& images) const {
    check_input(images.shape());
    std::vector<Var<T>> stage_out;
    Var<T> x = images;
    for (const auto& stage : stages_) {
      for (const auto& layer : stage) x = layer(x);
      stage_out.push_back(x);
    }
    const int L = cfg_.backbone.num_levels;
    std::vector<Var<T>> fpn(L);
    Var<T> top;
    for (int l = L - 1; l >= 0; --l) {
      Var<T> lat = lateral_[l](stage_out[4 - L + l]);
      top = top.defined() ? add(lat, upsample_nearest2x(top)) : lat;
      fpn[l] = output_[l](top);
    }
    return {stage_out.back(), std::move(fpn)};
  }

  /// Classification and regression towers of one branch.
  std::pair<Var<T>, Var<T>> branch_tower_forward(const Var<T>& f, size_t branch) const {
    if (branch >= heads_.size()) throw ConfigError("unknown branch index " + std::to_string(branch));
    if (f.dim(1) != cfg_.backbone.fpn_channels) throw ShapeError("tower input has wrong channel width");
    const auto& h = heads_[branch];
    Var<T> c = f, r = f;
    for (const auto& u : h.cls_tower) c = u(c);
    for (const auto& u : h.reg_tower) r = u(r);
    return {c, r};
  }

  /// Prediction layers. Distances are stride * exp(scale_l * raw); centerness reads the regression features.
  LevelOutputs<T> predict_heads(const Var<T>& cls_feat, const Var<T>& reg_feat, size_t branch, int level) const {
    if (cls_feat.shape() != reg_feat.shape()) throw ShapeError("predict_heads: tower outputs differ in shape");
    const auto& h = heads_.at(branch);
    LevelOutputs<T> o;
    o.cls = h.cls_pred(cls_feat);
    const T stride = static_cast<T>(cfg_.backbone.level_stride(level));
    o.reg = scale(exp(mul_scalar(h.reg_pred(reg_feat), h.scales.at(level))), stride);
    o.ctr = h.ctr_pred(reg_feat);
    return o;
  }

  ForwardResult<T> forward(const Var<T>& images) const {
    ForwardResult<T> out;
    std::tie(out.backbone_tap, out.fpn) = backbone_fpn_forward(images);
    const size_t K = heads_.size();
    out.branches.resize(K);
    for (size_t l = 0; l < out.fpn.size(); ++l) {
      std::vector<Var<T>> cls(K), reg(K);
      for (size_t k = 0; k < K; ++k) std::tie(cls[k], reg[k]) = branch_tower_forward(out.fpn[l], k);
      if (afi_) {
        cls = afi_->cls(cls);
        reg = afi_->reg(reg);
      }
      for (size_t k = 0; k < K; ++k)
        out.branches[k].levels.push_back(predict_heads(cls[k], reg[k], k, static_cast<int>(l)));
    }
    return out;
  }

 private:
  void build_backbone(std::mt19937_64& rng) {
    const auto& b = cfg_.backbone;
    int in = 3;
    stages_.resize(4);
    int stem_layers = std::countr_zero(static_cast<unsigned>(b.stem_stride()));
    for (int i = 0; i < stem_layers; ++i) {
      stages_[0].push_back(make_conv_norm_act(params_, "backbone.stem" + std::to_string(i),
                                              ConvSpec{in, b.stage_widths[0], 3, 2, 1, false, Init::kHe}, rng));
      in = b.stage_widths[0];
    }
    for (int s = 1; s < 4; ++s) {
      stages_[s].push_back(make_conv_norm_act(params_, "backbone.stage" + std::to_string(s),
                                              ConvSpec{in, b.stage_widths[s], 3, 2, 1, false, Init::kHe}, rng));
      in = b.stage_widths[s];
    }
    for (int l = 0; l < b.num_levels; ++l) {
      const int src = b.stage_widths[4 - b.num_levels + l];
      lateral_.push_back(make_conv(params_, "fpn.lateral" + std::to_string(l),
                                   ConvSpec{src, b.fpn_channels, 1, 1, 1, true, Init::kHe}, rng));
      output_.push_back(make_conv(params_, "fpn.output" + std::to_string(l),
                                  ConvSpec{b.fpn_channels, b.fpn_channels, 3, 1, 1, true, Init::kHe}, rng));
    }
  }

  void build_branch(size_t k, std::mt19937_64& rng) {
    const auto& b = cfg_.backbone;
    const auto& spec = cfg_.branches[k];
    if (spec.category_ids.empty()) throw ConfigError("branch " + spec.name + " has no categories");
    const std::string p = "head." + spec.name;
    BranchHead<T> h;
    h.num_classes = static_cast<int>(spec.category_ids.size());
    const int C = b.fpn_channels;
    for (int i = 0; i < b.tower_depth; ++i) {
      h.cls_tower.push_back(make_conv_norm_act(params_, p + ".cls_tower" + std::to_string(i),
                                               ConvSpec{C, C, 3, 1, 1, false, Init::kSmall}, rng));
      h.reg_tower.push_back(make_conv_norm_act(params_, p + ".reg_tower" + std::to_string(i),
                                               ConvSpec{C, C, 3, 1, 1, false, Init::kSmall}, rng));
    }
    h.cls_pred = make_conv(params_, p + ".cls_pred", ConvSpec{C, h.num_classes, 3, 1, 1, true, Init::kSmall}, rng);
    h.reg_pred = make_conv(params_, p + ".reg_pred", ConvSpec{C, 4, 3, 1, 1, true, Init::kSmall}, rng);
    h.ctr_pred = make_conv(params_, p + ".ctr_pred", ConvSpec{C, 1, 3, 1, 1, true, Init::kSmall}, rng);
    // Focal-loss prior: initial foreground probability 0.01.
    h.cls_pred.bias.mutable_value().fill(static_cast<T>(-std::log((1.0 - 0.01) / 0.01)));
    for (int l = 0; l < b.num_levels; ++l)
      h.scales.push_back(params_.add(p + ".scale" + std::to_string(l), Tensor<T>({1}, T(1))));
    heads_.push_back(std::move(h));
  }

  DetectorConfig cfg_;
  ParamSet<T> params_;
  std::vector<std::vector<ConvNormAct<T>>> stages_;
  std::vector<Conv2d<T>> lateral_;
  std::vector<Conv2d<T>> output_;
  std::vector<BranchHead<T>> heads_;
  std::optional<AfiPair<T>> afi_;
};

// ---------------------------------------------------------------------------
// FCOS target assignment.

/// Ground truth for one branch on one image: box plus 1-based class label.
struct LabeledBox {
  Box box;
  int label = 0;
};

/// Per-location targets, locations ordered level by level, row-major within a level.
struct AnchorTargets {
  std::vector<int> labels;                   // 0 = background
  std::vector<std::array<double, 4>> reg;    // (l, t, r, b), valid where labels > 0
  std::vector<double> centerness;            // valid where labels > 0
  int num_positive() const {
    return static_cast<int>(std::count_if(labels.begin(), labels.end(), [](int v) { return v > 0; }));
  }
  size_t size() const { return labels.size(); }
};

inline double centerness_target(double l, double t, double r, double b) {
  return std::sqrt((std::min(l, r) / std::max(l, r)) * (std::min(t, b) / std::max(t, b)));
}

/// Location (x, y) in image pixels of cell (i, j) on a level of the given stride.
inline std::pair<double, double> location_center(int stride, int row, int col) {
  return {static_cast<double>(col * stride + stride / 2), static_cast<double>(row * stride + stride / 2)};
}

/// A location is positive when it lies strictly inside a box whose largest side distance falls in the
/// level's [lo, hi) range; among several such boxes the one with the smallest area wins (first on ties).
inline AnchorTargets assign_fcos_targets(std::span<const LabeledBox> boxes, std::span<const LevelSpec> levels) {
  AnchorTargets t;
  for (const auto& lv : levels)
    for (int row = 0; row < lv.height; ++row)
      for (int col = 0; col < lv.width; ++col) {
        const auto [x, y] = location_center(lv.stride, row, col);
        int best = -1;
        double best_area = std::numeric_limits<double>::infinity();
        std::array<double, 4> best_reg{};
        for (size_t i = 0; i < boxes.size(); ++i) {
          const Box& b = boxes[i].box;
          const std::array<double, 4> d{x - b.x, y - b.y, b.x2() - x, b.y2() - y};
          if (*std::min_element(d.begin(), d.end()) <= 0) continue;
          const double m = *std::max_element(d.begin(), d.end());
          if (m < lv.lo || m >= lv.hi) continue;
          if (b.area() < best_area) {
            best = static_cast<int>(i);
            best_area = b.area();
            best_reg = d;
          }
        }
        if (best < 0) {
          t.labels.push_back(0);
          t.reg.push_back({0, 0, 0, 0});
          t.centerness.push_back(0);
        } else {
          t.labels.push_back(boxes[best].label);
          t.reg.push_back(best_reg);
          t.centerness.push_back(centerness_target(best_reg[0], best_reg[1], best_reg[2], best_reg[3]));
        }
      }
  return t;
}

/// Maps an image's annotations onto a branch's label space; categories outside the branch are ignored.
inline std::vector<LabeledBox> branch_boxes(const std::vector<BoxAnnotation>& anns, const std::vector<int>& cats) {
  std::vector<LabeledBox> out;
  for (const auto& a : anns) {
    auto it = std::find(cats.begin(), cats.end(), a.category_id);
    if (it != cats.end()) out.push_back({a.bbox, static_cast<int>(it - cats.begin()) + 1});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detection loss.

inline constexpr double kFocalAlpha = 0.25;
inline constexpr double kFocalGamma = 2.0;

namespace detail {

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// Sigmoid focal loss with gamma = 2 and its derivative with respect to the logit.
inline std::pair<double, double> focal_term(double x, bool positive, double alpha = kFocalAlpha) {
  const double p = 1.0 / (1.0 + std::exp(-x));
  if (positive) {
    const double logp = -softplus(-x);
    const double q = 1.0 - p;
    return {-alpha * q * q * logp, alpha * q * q * (2.0 * p * logp - q)};
  }
  const double log1mp = -softplus(x);
  return {-(1.0 - alpha) * p * p * log1mp, (1.0 - alpha) * p * p * (p - 2.0 * (1.0 - p) * log1mp)};
}

// -ln IoU between two (l, t, r, b) distance quadruples sharing an anchor point, with d/d(pred).
inline double iou_loss_term(const double* p, const std::array<double, 4>& g, double* grad) {
  const double wi = std::min(p[0], g[0]) + std::min(p[2], g[2]);
  const double hi = std::min(p[1], g[1]) + std::min(p[3], g[3]);
  const double inter = wi * hi;
  const double ap = (p[0] + p[2]) * (p[1] + p[3]);
  const double ag = (g[0] + g[2]) * (g[1] + g[3]);
  const double uni = ap + ag - inter;
  // dI/dp: horizontal sides scale with hi, vertical with wi.
  const double dI[4] = {p[0] <= g[0] ? hi : 0.0, p[1] <= g[1] ? wi : 0.0, p[2] <= g[2] ? hi : 0.0,
                        p[3] <= g[3] ? wi : 0.0};
  const double dA[4] = {p[1] + p[3], p[0] + p[2], p[1] + p[3], p[0] + p[2]};
  for (int i = 0; i < 4; ++i) grad[i] = (dA[i] - dI[i]) / uni - dI[i] / inter;
  return std::log(uni) - std::log(inter);
}

}  // namespace detail

template <class T>
struct DetectionLoss {
  Var<T> total;
  double cls = 0;
  double reg = 0;
  double ctr = 0;
  int num_positive = 0;
};

/// FCOS loss on the images listed in `images` (positions along the batch axis).
///
/// Classification: focal loss summed over every location and class, divided by max(1, n_pos).
/// Regression: mean -ln IoU over positives. Centerness: mean BCE over positives.
template <class T>
DetectionLoss<T> detection_loss(const FlatOutputs<T>& out, const std::vector<AnchorTargets>& targets,
                                const std::vector<size_t>& images) {
  const auto& cs = out.cls.shape();
  if (cs.size() != 3 || out.reg.shape() != Shape{cs[0], cs[1], 4} || out.ctr.shape() != Shape{cs[0], cs[1], 1})
    throw ShapeError("detection_loss: inconsistent head shapes");
  if (targets.size() != images.size()) throw ShapeError("detection_loss: one target set per image required");
  const int L = cs[1], K = cs[2];
  for (const auto& t : targets)
    if (t.size() != static_cast<size_t>(L))
      throw ShapeError("detection_loss: targets cover " + std::to_string(t.size()) + " locations, outputs " +
                       std::to_string(L));
  for (size_t n : images)
    if (n >= static_cast<size_t>(cs[0])) throw ShapeError("detection_loss: image index out of range");
  for (const Var<T>* v : {&out.cls, &out.reg, &out.ctr})
    if (!v->value().all_finite()) throw NumericalError("detection_loss: non-finite head output");

  int n_pos = 0;
  for (const auto& t : targets) n_pos += t.num_positive();
  const double cls_norm = std::max(1, n_pos);
  const auto& cv = out.cls.value();
  const auto& rv = out.reg.value();
  const auto& zv = out.ctr.value();
  Tensor<T> gc(cv.shape()), gr(rv.shape()), gz(zv.shape());
  double cls_sum = 0, reg_sum = 0, ctr_sum = 0;
  for (size_t i = 0; i < images.size(); ++i) {
    const size_t n = images[i];
    const auto& t = targets[i];
    for (int loc = 0; loc < L; ++loc) {
      const size_t base = (n * L + loc);
      const int label = t.labels[loc];
      for (int k = 0; k < K; ++k) {
        const auto [v, d] = detail::focal_term(cv[base * K + k], label == k + 1);
        cls_sum += v;
        gc[base * K + k] += static_cast<T>(d / cls_norm);
      }
      if (label <= 0) continue;
      double p[4], g[4];
      for (int j = 0; j < 4; ++j) p[j] = rv[base * 4 + j];
      reg_sum += detail::iou_loss_term(p, t.reg[loc], g);
      for (int j = 0; j < 4; ++j) gr[base * 4 + j] += static_cast<T>(g[j] / n_pos);
      const double z = zv[base], y = t.centerness[loc];
      ctr_sum += detail::softplus(z) - y * z;
      gz[base] += static_cast<T>((1.0 / (1.0 + std::exp(-z)) - y) / n_pos);
    }
  }
  DetectionLoss<T> res;
  res.num_positive = n_pos;
  res.cls = cls_sum / cls_norm;
  res.reg = n_pos ? reg_sum / n_pos : 0.0;
  res.ctr = n_pos ? ctr_sum / n_pos : 0.0;
  const double total = res.cls + res.reg + res.ctr;
  if (!std::isfinite(total)) throw NumericalError("detection_loss: non-finite loss value");
  auto cn = out.cls.node(), rn = out.reg.node(), zn = out.ctr.node();
  res.total = make_result<T>(
      Tensor<T>({1}, std::vector<T>{static_cast<T>(total)}), {out.cls, out.reg, out.ctr},
      [cn, rn, zn, gc = std::move(gc), gr = std::move(gr), gz = std::move(gz)](Node<T>& self) {
        const T s = self.grad[0];
        auto acc = [s](const std::shared_ptr<Node<T>>& n, const Tensor<T>& g) {
          if (!wants_grad(n)) return;
          auto& dst = n->ensure_grad();
          for (size_t i = 0; i < g.size(); ++i) dst[i] += s * g[i];
        };
        acc(cn, gc);
        acc(rn, gr);
        acc(zn, gz);
      });
  return res;
}

}  // namespace aimd
