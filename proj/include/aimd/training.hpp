#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "aimd/amalgamation.hpp"
#include "aimd/datasets.hpp"
#include "aimd/detector.hpp"
#include "aimd/evaluation.hpp"

namespace aimd {

struct AblationSwitches {
  bool afi = true;
  bool dis = true;
  bool fea = true;
  bool pse = true;

  std::string name() const {
    std::vector<std::string> on;
    if (afi) on.push_back("AFI");
    if (dis) on.push_back("dis");
    if (fea) on.push_back("fea");
    if (pse) on.push_back("pse");
    if (on.empty()) return "none";
    if (on.size() == 4) return "all";
    std::string s;
    for (size_t i = 0; i < on.size(); ++i) s += (i ? "+" : "") + on[i];
    return s;
  }
  bool any_teacher_term() const { return dis || fea || pse; }
  friend bool operator==(const AblationSwitches&, const AblationSwitches&) = default;
};

/// Rows of the ablation table: none, AFI, dis, fea, pse, AFI+dis+fea, all.
inline std::vector<AblationSwitches> standard_ablation_grid() {
  return {{false, false, false, false}, {true, false, false, false}, {false, true, false, false},
          {false, false, true, false},  {false, false, false, true},  {true, true, true, false},
          {true, true, true, true}};
}

struct TrainConfig {
  int iterations = 2000;
  int teacher_iterations = -1;  // < 0: same as iterations
  double base_lr = 0.01;
  std::vector<int> milestones;  // empty: 2/3 and 8/9 of the run
  double decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 8;
  uint64_t seed = 0;
  LossWeights weights;
  DistillConfig distill;
  AblationSwitches ablation;
  BackboneConfig backbone;
  DecodeConfig decode;
  double eval_fraction = 0.1;  // snapshot cadence; 0 disables
  int smoothing_window = 50;

  std::vector<int> resolved_milestones() const { return milestones_for(iterations); }

  std::vector<int> milestones_for(int iters) const {
    if (!milestones.empty() && iters == iterations) return milestones;
    if (iters < 9) return {};
    return {iters * 2 / 3, iters * 8 / 9};
  }

  double lr_at(int iter, int total_iters = -1) const {
    double lr = base_lr;
    for (int m : milestones_for(total_iters < 0 ? iterations : total_iters))
      if (iter >= m) lr *= decay;
    return lr;
  }

  void validate(size_t n_datasets) const {
    if (iterations < 0) throw ConfigError("iterations must be non-negative");
    if (!(base_lr > 0)) throw ConfigError("learning rate must be positive");
    if (!(decay > 0 && decay <= 1)) throw ConfigError("decay factor must lie in (0, 1]");
    const auto ms = resolved_milestones();
    for (size_t i = 0; i < ms.size(); ++i) {
      if (ms[i] >= iterations) throw ConfigError("milestones must be below the iteration count");
      if (i && ms[i] <= ms[i - 1]) throw ConfigError("milestones must be strictly increasing");
    }
    if (n_datasets == 0 || batch_size <= 0 || batch_size % static_cast<int>(n_datasets) != 0)
      throw ConfigError("batch size " + std::to_string(batch_size) + " is not divisible by dataset count " +
                        std::to_string(n_datasets));
    weights.validate();
    distill.validate();
    backbone.validate();
  }

  /// Canonical text form; hashed into every run record.
  std::string canonical() const {
    std::ostringstream os;
    os << std::setprecision(17) << "iterations=" << iterations << ";teacher_iterations=" << teacher_iterations
       << ";lr=" << base_lr << ";milestones=";
    for (int m : resolved_milestones()) os << m << ',';
    os << ";decay=" << decay << ";momentum=" << momentum << ";wd=" << weight_decay << ";batch=" << batch_size
       << ";seed=" << seed << ";w=" << weights.det << ',' << weights.fea << ',' << weights.dis << ',' << weights.pse
       << ";T=" << distill.temperature << ";That=" << distill.pseudo_temperature << ";theta=" << distill.threshold
       << ";ablation=" << ablation.name() << ";backbone=" << manifest_text({backbone, {}, false});
    return os.str();
  }
  std::string hash() const {
    const auto s = canonical();
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(s.data(), s.size());
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// Run records.

struct IterationRecord {
  int iteration = 0;
  double lr = 0;
  std::vector<std::array<double, 4>> terms;  // per branch: det, fea, dis, pse
  double total = 0;
  size_t pse_selected = 0;
  size_t pse_candidates = 0;
  friend bool operator==(const IterationRecord&, const IterationRecord&) = default;
};

struct EvalSnapshot {
  int iteration = 0;
  double map = 0;
  double map50 = 0;
  double map75 = 0;
  friend bool operator==(const EvalSnapshot&, const EvalSnapshot&) = default;
};

struct RunRecord {
  std::string config_hash;
  uint64_t seed = 0;
  std::vector<IterationRecord> iterations;
  std::vector<EvalSnapshot> evals;
  bool aborted = false;
  std::string abort_reason;
  friend bool operator==(const RunRecord&, const RunRecord&) = default;

  /// Mean over a trailing window of the per-iteration total.
  double smoothed_total(size_t end, size_t window) const {
    end = std::min(end, iterations.size());
    const size_t begin = end > window ? end - window : 0;
    if (end == begin) return 0;
    double s = 0;
    for (size_t i = begin; i < end; ++i) s += iterations[i].total;
    return s / static_cast<double>(end - begin);
  }

  std::optional<EvalSnapshot> best() const {
    if (evals.empty()) return std::nullopt;
    return *std::max_element(evals.begin(), evals.end(),
                             [](const EvalSnapshot& a, const EvalSnapshot& b) { return a.map < b.map; });
  }

  /// Line-delimited JSON: a header line, one line per iteration, one per evaluation snapshot.
  std::string to_jsonl() const {
    std::ostringstream os;
    os << nlohmann::json{{"config_hash", config_hash}, {"seed", seed}, {"aborted", aborted},
                         {"abort_reason", abort_reason}}
              .dump()
       << '\n';
    for (const auto& it : iterations)
      os << nlohmann::json{{"iter", it.iteration},          {"lr", it.lr},
                           {"terms", it.terms},             {"total", it.total},
                           {"pse_selected", it.pse_selected}, {"pse_candidates", it.pse_candidates}}
                .dump()
         << '\n';
    for (const auto& e : evals)
      os << nlohmann::json{{"eval_iter", e.iteration}, {"map", e.map}, {"map50", e.map50}, {"map75", e.map75}}.dump()
         << '\n';
    return os.str();
  }
};

struct TrainingAborted : NumericalError {
  TrainingAborted(const std::string& what, RunRecord r) : NumericalError(what), record(std::move(r)) {}
  RunRecord record;
};

// ---------------------------------------------------------------------------
// Optimizer.

/// SGD with momentum and L2 weight decay: v = m v + (g + wd w); w -= lr v.
template <class T>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), wd_(weight_decay) {}

  void add(ParamSet<T>& ps) {
    for (auto& [_, v] : ps.items()) {
      params_.push_back(v);
      velocity_.emplace_back(v.shape());
    }
  }

  void step(double lr) {
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      auto& w = p.mutable_value();
      auto& vel = velocity_[i];
      const bool has_g = p.has_grad();
      for (size_t j = 0; j < w.size(); ++j) {
        const double g = (has_g ? static_cast<double>(p.grad()[j]) : 0.0) + wd_ * w[j];
        vel[j] = static_cast<T>(momentum_ * vel[j] + g);
        w[j] = static_cast<T>(w[j] - lr * vel[j]);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  double momentum_;
  double wd_;
  std::vector<Var<T>> params_;
  std::vector<Tensor<T>> velocity_;
};

// ---------------------------------------------------------------------------
// Shared batch preparation.

using Scalar = float;
using Model = Detector<Scalar>;

namespace detail {

struct PreparedData {
  std::vector<const DetectionDataset*> sets;
  std::vector<std::vector<AnchorTargets>> targets;  // [dataset][image], in that dataset's own label space
  std::vector<LevelSpec> levels;
  int height = 0;
  int width = 0;
};

inline PreparedData prepare(const std::vector<DetectionDataset>& datasets, const BackboneConfig& bb) {
  PreparedData p;
  for (const auto& d : datasets) {
    if (d.images.empty()) throw ConfigError("dataset " + d.identifier + " is empty");
    p.sets.push_back(&d);
  }
  p.height = datasets[0].images[0].height;
  p.width = datasets[0].images[0].width;
  p.levels = level_specs(bb, p.height, p.width);
  for (const auto& d : datasets) {
    const auto cats = d.category_list();
    const auto per_image = d.annotations_by_image();
    std::vector<AnchorTargets> t;
    for (size_t i = 0; i < d.images.size(); ++i) {
      const auto& im = d.images[i];
      if (!im.pixels) throw ConfigError("dataset " + d.identifier + ": image " + std::to_string(im.id) + " has no pixels");
      if (im.height != p.height || im.width != p.width) throw ConfigError("all training images must share one size");
      const auto boxes = branch_boxes(per_image[i], cats);
      t.push_back(assign_fcos_targets(boxes, p.levels));
    }
    p.targets.push_back(std::move(t));
  }
  return p;
}

struct BatchView {
  Tensor<Scalar> images;
  std::vector<size_t> dataset_of;  // per batch position
  std::vector<size_t> image_of;
};

inline BatchView load_batch(const PreparedData& p, const Batch& batch) {
  BatchView v;
  std::vector<const RgbImage*> px;
  for (const auto& item : batch) {
    px.push_back(p.sets[item.dataset]->images[item.image].pixels.get());
    v.dataset_of.push_back(item.dataset);
    v.image_of.push_back(item.image);
  }
  v.images = images_to_tensor<Scalar>(px);
  return v;
}

inline std::vector<size_t> positions_of(const BatchView& b, size_t dataset, bool same) {
  std::vector<size_t> out;
  for (size_t i = 0; i < b.dataset_of.size(); ++i)
    if ((b.dataset_of[i] == dataset) == same) out.push_back(i);
  return out;
}

inline std::vector<AnchorTargets> targets_at(const PreparedData& p, const BatchView& b,
                                             const std::vector<size_t>& positions) {
  std::vector<AnchorTargets> out;
  for (size_t i : positions) out.push_back(p.targets[b.dataset_of[i]][b.image_of[i]]);
  return out;
}

inline double accumulate_total(const std::vector<std::array<double, 4>>& terms, const LossWeights& w) {
  double s = 0;
  for (const auto& t : terms) s += w.det * t[0] + w.fea * t[1] + w.dis * t[2] + w.pse * t[3];
  return s;
}

inline int eval_every(const TrainConfig& c, int iters) {
  if (c.eval_fraction <= 0) return 0;
  return std::max(1, static_cast<int>(std::lround(iters * c.eval_fraction)));
}

inline EvalSnapshot snapshot(const Model& m, const DetectionDataset& eval, const DecodeConfig& dc, int iter) {
  const auto r = coco_map(infer(m, eval.images, dc), eval);
  return {iter, r.map, r.map50, r.map75};
}

inline std::vector<BranchSpec> branches_for(const std::vector<DetectionDataset>& datasets) {
  std::vector<BranchSpec> b;
  for (const auto& d : datasets) b.push_back({d.identifier, d.category_list()});
  return b;
}

inline uint64_t sampler_seed(uint64_t seed) { return seed * 0x9E3779B97F4A7C15ULL + 0x5151; }

}  // namespace detail

struct TrainResult {
  std::unique_ptr<Model> model;
  RunRecord record;
};

/// Detection-loss-only training of a (possibly multi-branch, interactor-free) detector. Branch k is
/// supervised on images of dataset k only.
inline TrainResult train_detection_only(const std::vector<DetectionDataset>& datasets, const TrainConfig& cfg,
                                        int iterations, const DetectionDataset* eval = nullptr) {
  cfg.validate(datasets.size());
  const auto data = detail::prepare(datasets, cfg.backbone);
  TrainResult out;
  out.model = std::make_unique<Model>(DetectorConfig{cfg.backbone, detail::branches_for(datasets), false}, cfg.seed);
  Model& model = *out.model;
  out.record.config_hash = cfg.hash();
  out.record.seed = cfg.seed;
  Sgd<Scalar> opt(cfg.momentum, cfg.weight_decay);
  opt.add(model.params());
  auto sampler = make_sampler(datasets, cfg.batch_size, detail::sampler_seed(cfg.seed));
  const int every = eval ? detail::eval_every(cfg, iterations) : 0;
  for (int it = 0; it < iterations; ++it) {
    const auto batch = detail::load_batch(data, sampler.next());
    const auto res = model.forward(Var<Scalar>(batch.images));
    std::vector<BranchTerms<Scalar>> terms(datasets.size());
    IterationRecord rec;
    rec.iteration = it;
    rec.lr = cfg.lr_at(it, iterations);
    try {
      for (size_t k = 0; k < datasets.size(); ++k) {
        const auto own = detail::positions_of(batch, k, true);
        auto det = detection_loss(flatten(res.branches[k]), detail::targets_at(data, batch, own), own);
        terms[k].det = det.total;
        rec.terms.push_back({static_cast<double>(det.total.item()), 0.0, 0.0, 0.0});
      }
      LossWeights w;
      w.det = cfg.weights.det;
      w.fea = w.dis = w.pse = 0;
      const Var<Scalar> total = total_loss(terms, w);
      rec.total = detail::accumulate_total(rec.terms, w);
      out.record.iterations.push_back(rec);
      backward(total);
    } catch (const NumericalError& e) {
      out.record.aborted = true;
      out.record.abort_reason = e.what();
      throw TrainingAborted(std::string("training diverged at iteration ") + std::to_string(it) + ": " + e.what(),
                            out.record);
    }
    opt.step(rec.lr);
    opt.zero_grad();
    if (every && ((it + 1) % every == 0 || it + 1 == iterations))
      out.record.evals.push_back(detail::snapshot(model, *eval, cfg.decode, it + 1));
  }
  return out;
}

/// Single-branch expert trained with the detection loss only.
inline TrainResult train_teacher(const DetectionDataset& dataset, const TrainConfig& cfg,
                                 const DetectionDataset* eval = nullptr) {
  if (dataset.images.empty()) throw ConfigError("train_teacher: dataset " + dataset.identifier + " is empty");
  const int iters = cfg.teacher_iterations < 0 ? cfg.iterations : cfg.teacher_iterations;
  return train_detection_only({dataset}, cfg, iters, eval);
}

/// Plain multi-branch baseline: shared backbone, independent heads, detection loss only.
inline TrainResult train_multibranch_baseline(const std::vector<DetectionDataset>& datasets, const TrainConfig& cfg,
                                              const DetectionDataset* eval = nullptr) {
  return train_detection_only(datasets, cfg, cfg.iterations, eval);
}

/// Frozen per-dataset experts.
class TeacherBundle {
 public:
  explicit TeacherBundle(std::vector<std::unique_ptr<Model>> experts) : experts_(std::move(experts)) {
    for (auto& e : experts_) {
      if (!e || e->branch_count() != 1) throw ConfigError("teachers must be single-branch detectors");
      e->params().set_trainable(false);
    }
  }
  size_t size() const { return experts_.size(); }
  const Model& operator[](size_t k) const { return *experts_.at(k); }
  std::vector<uint64_t> fingerprints() const {
    std::vector<uint64_t> f;
    for (const auto& e : experts_) f.push_back(e->params().fingerprint());
    return f;
  }

 private:
  std::vector<std::unique_ptr<Model>> experts_;
};

struct TargetResult {
  std::unique_ptr<Model> model;
  ParamSet<Scalar> adaptor_params;
  RunRecord record;
};

/// Amalgamation training of the multi-branch target.
///
/// Per batch: equal-per-dataset sampling, one target forward over all images, teacher forwards,
/// then for branch k: L_fea against teacher k on every image, L_det and L_dis on dataset-k images,
/// L_pse on the remaining images. Ablation switches zero the matching weight or bypass the interactor.
inline TargetResult train_target(const std::vector<DetectionDataset>& datasets, const TeacherBundle* teachers,
                                 const TrainConfig& cfg, const DetectionDataset* eval = nullptr) {
  cfg.validate(datasets.size());
  LossWeights w = cfg.weights;
  if (!cfg.ablation.fea) w.fea = 0;
  if (!cfg.ablation.dis) w.dis = 0;
  if (!cfg.ablation.pse) w.pse = 0;
  const bool need_teachers = w.fea > 0 || w.dis > 0 || w.pse > 0;
  const size_t K = datasets.size();
  if (need_teachers) {
    if (!teachers || teachers->size() != K) throw ConfigError("train_target: one teacher per dataset required");
    for (size_t k = 0; k < K; ++k)
      if ((*teachers)[k].config().branches[0].category_ids != datasets[k].category_list())
        throw ConfigError("teacher " + std::to_string(k) + " category list does not match dataset " +
                          datasets[k].identifier);
  }
  const auto data = detail::prepare(datasets, cfg.backbone);
  TargetResult out;
  out.model = std::make_unique<Model>(DetectorConfig{cfg.backbone, detail::branches_for(datasets), cfg.ablation.afi},
                                      cfg.seed);
  Model& model = *out.model;
  std::vector<FeatureAdaptor<Scalar>> adaptors;
  if (w.fea > 0) {
    std::mt19937_64 arng(cfg.seed ^ 0xADA9702ULL);
    for (size_t k = 0; k < K; ++k) {
      const auto& tb = (*teachers)[k].config().backbone;
      adaptors.push_back(make_feature_adaptor(out.adaptor_params, "adaptor" + std::to_string(k),
                                              cfg.backbone.stage_widths[3], tb.stage_widths[3],
                                              cfg.backbone.fpn_channels, tb.fpn_channels, arng));
    }
  }
  out.record.config_hash = cfg.hash();
  out.record.seed = cfg.seed;
  Sgd<Scalar> opt(cfg.momentum, cfg.weight_decay);
  opt.add(model.params());
  opt.add(out.adaptor_params);
  auto sampler = make_sampler(datasets, cfg.batch_size, detail::sampler_seed(cfg.seed));
  const int every = eval ? detail::eval_every(cfg, cfg.iterations) : 0;

  for (int it = 0; it < cfg.iterations; ++it) {
    const auto batch = detail::load_batch(data, sampler.next());
    const Var<Scalar> input(batch.images);
    const auto res = model.forward(input);
    std::vector<ForwardResult<Scalar>> tea;
    if (need_teachers)
      for (size_t k = 0; k < K; ++k) tea.push_back((*teachers)[k].forward(input));

    std::vector<BranchTerms<Scalar>> terms(K);
    IterationRecord rec;
    rec.iteration = it;
    rec.lr = cfg.lr_at(it);
    try {
      for (size_t k = 0; k < K; ++k) {
        std::array<double, 4> vals{0, 0, 0, 0};
        const auto own = detail::positions_of(batch, k, true);
        const auto others = detail::positions_of(batch, k, false);
        const auto own_targets = detail::targets_at(data, batch, own);
        const auto flat = flatten(res.branches[k]);
        auto det = detection_loss(flat, own_targets, own);
        terms[k].det = det.total;
        vals[0] = det.total.item();
        if (w.fea > 0) {
          std::vector<Tensor<Scalar>> tea_fpn;
          for (const auto& f : tea[k].fpn) tea_fpn.push_back(f.value());
          terms[k].fea = feature_loss_taps(res.backbone_tap, res.fpn, tea[k].backbone_tap.value(), tea_fpn, adaptors[k]);
          vals[1] = terms[k].fea.item();
        }
        if (w.dis > 0 || w.pse > 0) {
          const auto tea_cls = flatten(tea[k].branches[0]).cls.value();
          if (w.dis > 0) {
            terms[k].dis = distillation_loss(flat.cls, tea_cls, own_targets, own, cfg.distill.temperature);
            vals[2] = terms[k].dis.item();
          }
          if (w.pse > 0) {
            auto pse = pseudo_loss(flat.cls, tea_cls, others, cfg.distill.threshold, cfg.distill.pseudo_temperature);
            terms[k].pse = pse.value;
            vals[3] = pse.value.item();
            rec.pse_selected += pse.selected;
            rec.pse_candidates += pse.candidates;
          }
        }
        rec.terms.push_back(vals);
      }
      const Var<Scalar> total = total_loss(terms, w);
      rec.total = detail::accumulate_total(rec.terms, w);
      out.record.iterations.push_back(rec);
      backward(total);
    } catch (const NumericalError& e) {
      out.record.aborted = true;
      out.record.abort_reason = e.what();
      throw TrainingAborted(std::string("target training diverged at iteration ") + std::to_string(it) + ": " +
                                e.what(),
                            out.record);
    }
    opt.step(rec.lr);
    opt.zero_grad();
    if (every && ((it + 1) % every == 0 || it + 1 == cfg.iterations))
      out.record.evals.push_back(detail::snapshot(model, *eval, cfg.decode, it + 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiments: ablation grid and sweeps.

/// Training splits, a fully annotated held-out set, and the two category groups.
struct ExperimentData {
  std::vector<DetectionDataset> train;
  DetectionDataset eval;
  std::set<int> cat_a;
  std::set<int> cat_b;
};

struct SplitMaps {
  double merged = 0;
  double a = 0;
  double b = 0;
};

inline SplitMaps evaluate_splits(const Model& m, const ExperimentData& data, const DecodeConfig& dc) {
  const auto preds = infer(m, data.eval.images, dc);
  return {coco_map(preds, data.eval).map, coco_map(preds, data.eval, data.cat_a).map,
          coco_map(preds, data.eval, data.cat_b).map};
}

/// Teachers are trained once per seed and reused across every configuration run with that seed.
class TeacherCache {
 public:
  const TeacherBundle& get(const ExperimentData& data, const TrainConfig& cfg) {
    auto it = cache_.find(cfg.seed);
    if (it != cache_.end()) return *it->second;
    std::vector<std::unique_ptr<Model>> experts;
    for (size_t k = 0; k < data.train.size(); ++k) {
      TrainConfig tc = cfg;
      tc.seed = cfg.seed * 131 + k + 1;
      experts.push_back(train_teacher(data.train[k], tc).model);
    }
    return *(cache_[cfg.seed] = std::make_unique<TeacherBundle>(std::move(experts)));
  }

 private:
  std::map<uint64_t, std::unique_ptr<TeacherBundle>> cache_;
};

struct ResultRow {
  std::string label;
  std::vector<SplitMaps> per_seed;

  SplitMaps mean() const {
    SplitMaps m;
    for (const auto& s : per_seed) {
      m.merged += s.merged / per_seed.size();
      m.a += s.a / per_seed.size();
      m.b += s.b / per_seed.size();
    }
    return m;
  }
  /// max - min over seeds.
  SplitMaps range() const {
    if (per_seed.empty()) return {};
    SplitMaps lo = per_seed[0], hi = per_seed[0];
    for (const auto& s : per_seed) {
      lo = {std::min(lo.merged, s.merged), std::min(lo.a, s.a), std::min(lo.b, s.b)};
      hi = {std::max(hi.merged, s.merged), std::max(hi.a, s.a), std::max(hi.b, s.b)};
    }
    return {hi.merged - lo.merged, hi.a - lo.a, hi.b - lo.b};
  }
};

struct ResultTable {
  std::string key_name;
  std::vector<ResultRow> rows;

  std::string to_text() const {
    std::ostringstream os;
    os << key_name << "\tmAP\tmAP_A\tmAP_B\tseeds\n" << std::fixed << std::setprecision(2);
    for (const auto& r : rows) {
      const auto m = r.mean(), g = r.range();
      auto cell = [&](double mean, double range) {
        std::ostringstream c;
        c << std::fixed << std::setprecision(2) << 100 * mean;
        if (r.per_seed.size() > 1) c << " ± " << 100 * range / 2;
        return c.str();
      };
      os << r.label << '\t' << cell(m.merged, g.merged) << '\t' << cell(m.a, g.a) << '\t' << cell(m.b, g.b) << '\t'
         << r.per_seed.size() << '\n';
    }
    return os.str();
  }
};

using ConfigRunner = std::function<SplitMaps(const TrainConfig&)>;

/// Default runner: teachers from the cache when needed, then train_target and split evaluation.
inline ConfigRunner make_target_runner(const ExperimentData& data, TeacherCache& cache) {
  return [&data, &cache](const TrainConfig& c) {
    const bool teachers = c.ablation.any_teacher_term();
    const TeacherBundle* tb = teachers ? &cache.get(data, c) : nullptr;
    auto r = train_target(data.train, tb, c);
    return evaluate_splits(*r.model, data, c.decode);
  };
}

inline ResultTable run_ablation_grid(const TrainConfig& base, const std::vector<AblationSwitches>& grid,
                                     const std::vector<uint64_t>& seeds, const ConfigRunner& run) {
  ResultTable t;
  t.key_name = "config";
  for (const auto& sw : grid) {
    ResultRow row;
    row.label = sw.name();
    for (uint64_t s : seeds) {
      TrainConfig c = base;
      c.ablation = sw;
      c.seed = s;
      row.per_seed.push_back(run(c));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

enum class SweepParameter { kThreshold, kPseudoTemperature };

inline SweepParameter parse_sweep_parameter(const std::string& s) {
  if (s == "theta" || s == "threshold") return SweepParameter::kThreshold;
  if (s == "T_hat" || s == "pseudo_temperature" || s == "that") return SweepParameter::kPseudoTemperature;
  throw ConfigError("unknown sweep parameter '" + s + "' (expected theta or T_hat)");
}

inline ResultTable run_sweep(SweepParameter p, const std::vector<double>& values, const TrainConfig& base,
                             const std::vector<uint64_t>& seeds, const ConfigRunner& run) {
  ResultTable t;
  t.key_name = p == SweepParameter::kThreshold ? "theta" : "T_hat";
  for (double v : values) {
    ResultRow row;
    std::ostringstream label;
    label << v;
    row.label = label.str();
    for (uint64_t s : seeds) {
      TrainConfig c = base;
      (p == SweepParameter::kThreshold ? c.distill.threshold : c.distill.pseudo_temperature) = v;
      c.seed = s;
      c.distill.validate();
      row.per_seed.push_back(run(c));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Run configuration file: INI sections [train] [loss] [distill] [ablation] [backbone] [decode].

namespace detail {

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  for (const auto& t : split_strings(s)) out.push_back(std::stoi(trim(t)));
  return out;
}

inline bool parse_bool(const std::string& s) {
  if (s == "1" || s == "true" || s == "on" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "off" || s == "no") return false;
  throw ConfigError("not a boolean: '" + s + "'");
}

}  // namespace detail

inline void apply_config(const boost::property_tree::ptree& pt, TrainConfig& c) {
  static const std::set<std::string> known{
      "train.iterations",     "train.teacher_iterations", "train.lr",          "train.milestones",
      "train.decay",          "train.momentum",           "train.weight_decay", "train.batch_size",
      "train.seed",           "train.eval_fraction",      "train.smoothing_window",
      "loss.det",             "loss.fea",                 "loss.dis",           "loss.pse",
      "distill.temperature",  "distill.pseudo_temperature", "distill.threshold",
      "ablation.afi",         "ablation.dis",             "ablation.fea",       "ablation.pse",
      "backbone.stage_widths", "backbone.num_levels",     "backbone.base_stride", "backbone.fpn_channels",
      "backbone.tower_depth", "backbone.range_scale",
      "decode.score_thresh",  "decode.pre_nms_top_k",     "decode.nms_iou",     "decode.max_per_image"};
  for (const auto& [section, body] : pt)
    for (const auto& [key, _] : body)
      if (!known.count(section + "." + key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
  auto str = [&](const char* k) { return pt.get_optional<std::string>(k); };
  try {
    if (auto v = str("train.iterations")) c.iterations = std::stoi(*v);
    if (auto v = str("train.teacher_iterations")) c.teacher_iterations = std::stoi(*v);
    if (auto v = str("train.lr")) c.base_lr = std::stod(*v);
    if (auto v = str("train.milestones")) c.milestones = detail::parse_int_list(*v);
    if (auto v = str("train.decay")) c.decay = std::stod(*v);
    if (auto v = str("train.momentum")) c.momentum = std::stod(*v);
    if (auto v = str("train.weight_decay")) c.weight_decay = std::stod(*v);
    if (auto v = str("train.batch_size")) c.batch_size = std::stoi(*v);
    if (auto v = str("train.seed")) c.seed = std::stoull(*v);
    if (auto v = str("train.eval_fraction")) c.eval_fraction = std::stod(*v);
    if (auto v = str("train.smoothing_window")) c.smoothing_window = std::stoi(*v);
    if (auto v = str("loss.det")) c.weights.det = std::stod(*v);
    if (auto v = str("loss.fea")) c.weights.fea = std::stod(*v);
    if (auto v = str("loss.dis")) c.weights.dis = std::stod(*v);
    if (auto v = str("loss.pse")) c.weights.pse = std::stod(*v);
    if (auto v = str("distill.temperature")) c.distill.temperature = std::stod(*v);
    if (auto v = str("distill.pseudo_temperature")) c.distill.pseudo_temperature = std::stod(*v);
    if (auto v = str("distill.threshold")) c.distill.threshold = std::stod(*v);
    if (auto v = str("ablation.afi")) c.ablation.afi = detail::parse_bool(*v);
    if (auto v = str("ablation.dis")) c.ablation.dis = detail::parse_bool(*v);
    if (auto v = str("ablation.fea")) c.ablation.fea = detail::parse_bool(*v);
    if (auto v = str("ablation.pse")) c.ablation.pse = detail::parse_bool(*v);
    if (auto v = str("backbone.stage_widths")) {
      const auto w = detail::parse_int_list(*v);
      if (w.size() != 4) throw ConfigError("backbone.stage_widths needs 4 values");
      std::copy(w.begin(), w.end(), c.backbone.stage_widths.begin());
    }
    if (auto v = str("backbone.num_levels")) c.backbone.num_levels = std::stoi(*v);
    if (auto v = str("backbone.base_stride")) c.backbone.base_stride = std::stoi(*v);
    if (auto v = str("backbone.fpn_channels")) c.backbone.fpn_channels = std::stoi(*v);
    if (auto v = str("backbone.tower_depth")) c.backbone.tower_depth = std::stoi(*v);
    if (auto v = str("backbone.range_scale")) c.backbone.range_scale = std::stod(*v);
    if (auto v = str("decode.score_thresh")) c.decode.score_thresh = std::stod(*v);
    if (auto v = str("decode.pre_nms_top_k")) c.decode.pre_nms_top_k = std::stoi(*v);
    if (auto v = str("decode.nms_iou")) c.decode.nms_iou = std::stod(*v);
    if (auto v = str("decode.max_per_image")) c.decode.max_per_image = std::stoi(*v);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("malformed config value: ") + e.what());
  } catch (const std::out_of_range& e) {
    throw ConfigError(std::string("config value out of range: ") + e.what());
  }
  c.weights.validate();
  c.distill.validate();
  c.backbone.validate();
}

inline TrainConfig parse_config(std::istream& is, TrainConfig base = {}) {
  boost::property_tree::ptree pt;
  try {
    boost::property_tree::read_ini(is, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  apply_config(pt, base);
  return base;
}

inline TrainConfig load_config(const std::filesystem::path& p, TrainConfig base = {}) {
  std::ifstream is(p);
  if (!is) throw ConfigError("cannot open config file " + p.string());
  return parse_config(is, std::move(base));
}

// ---------------------------------------------------------------------------
// Toy shapes benchmark used by the direction test and the CLI defaults.

struct ToyBenchmark {
  int train_images = 400;
  int eval_images = 100;
  int image_size = 64;
  int min_objects = 2;
  int max_objects = 4;
  uint64_t data_seed = 7;
  uint64_t eval_seed = 99;
  uint64_t split_seed = 1;
};

inline ExperimentData make_toy_experiment(const ToyBenchmark& t = {}) {
  SyntheticSceneConfig sc;
  sc.shape_vocabulary = default_shape_vocabulary();
  sc.image_size = t.image_size;
  sc.n_images = t.train_images;
  sc.min_objects = t.min_objects;
  sc.max_objects = t.max_objects;
  sc.rng_seed = t.data_seed;
  const auto full = generate_synthetic(sc);
  auto [ca, cb] = divide_categories(synthetic_categories(sc), synthetic_grouping(sc));
  auto split = assign_and_erase(full, ca, cb, t.split_seed);
  sc.n_images = t.eval_images;
  sc.rng_seed = t.eval_seed;
  sc.first_image_id = 1000000;
  sc.identifier = "eval";
  return {{std::move(split.a), std::move(split.b)}, generate_synthetic(sc), ca, cb};
}

/// Training configuration sized for single-core toy runs (about a minute per target run).
inline TrainConfig toy_train_config() {
  TrainConfig c;
  c.iterations = 800;
  c.batch_size = 8;
  c.base_lr = 0.01;
  c.backbone.stage_widths = {8, 16, 32, 32};
  c.backbone.base_stride = 4;
  c.backbone.fpn_channels = 16;
  c.backbone.range_scale = 4;
  c.weights.pse = 0.1;
  c.eval_fraction = 0;
  return c;
}

}  // namespace aimd
