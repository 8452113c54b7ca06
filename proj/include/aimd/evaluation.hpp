#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aimd/checkpoint.hpp"
#include "aimd/datasets.hpp"
#include "aimd/detector.hpp"
#include "aimd/image_io.hpp"

namespace aimd {

struct Detection {
  int64_t image_id = 0;
  int category_id = 0;
  Box box;
  double score = 0;
  friend bool operator==(const Detection&, const Detection&) = default;
};

struct DecodeConfig {
  double score_thresh = 0.05;
  int pre_nms_top_k = 1000;
  double nms_iou = 0.6;
  int max_per_image = 100;
};

/// Boxes from one image of one branch. score = sqrt(sigmoid(cls) * sigmoid(ctr)).
template <class T>
std::vector<Detection> decode_branch(const HeadOutputs<T>& out, size_t image, int64_t image_id,
                                     const std::vector<int>& category_ids, const std::vector<LevelSpec>& levels,
                                     int image_w, int image_h, double score_thresh, int pre_nms_top_k) {
  if (out.levels.size() != levels.size()) throw ShapeError("decode_branch: level count mismatch");
  std::vector<Detection> all;
  for (size_t l = 0; l < levels.size(); ++l) {
    const auto& lv = levels[l];
    const auto& cls = out.levels[l].cls.value();
    const auto& reg = out.levels[l].reg.value();
    const auto& ctr = out.levels[l].ctr.value();
    const int K = cls.dim(1);
    if (K != static_cast<int>(category_ids.size())) throw ShapeError("decode_branch: class count mismatch");
    if (cls.dim(2) != lv.height || cls.dim(3) != lv.width) throw ShapeError("decode_branch: level size mismatch");
    std::vector<Detection> level_dets;
    const int n = static_cast<int>(image);
    for (int row = 0; row < lv.height; ++row)
      for (int col = 0; col < lv.width; ++col) {
        const double pc = sigmoid_scalar<double>(ctr.at(n, 0, row, col));
        for (int k = 0; k < K; ++k) {
          const double s = std::sqrt(sigmoid_scalar<double>(cls.at(n, k, row, col)) * pc);
          if (!(s > score_thresh)) continue;
          const auto [x, y] = location_center(lv.stride, row, col);
          double x0 = x - reg.at(n, 0, row, col), y0 = y - reg.at(n, 1, row, col);
          double x1 = x + reg.at(n, 2, row, col), y1 = y + reg.at(n, 3, row, col);
          x0 = std::clamp(x0, 0.0, static_cast<double>(image_w));
          x1 = std::clamp(x1, 0.0, static_cast<double>(image_w));
          y0 = std::clamp(y0, 0.0, static_cast<double>(image_h));
          y1 = std::clamp(y1, 0.0, static_cast<double>(image_h));
          level_dets.push_back({image_id, category_ids[k], Box{x0, y0, x1 - x0, y1 - y0}, s});
        }
      }
    if (pre_nms_top_k >= 0 && level_dets.size() > static_cast<size_t>(pre_nms_top_k)) {
      std::stable_sort(level_dets.begin(), level_dets.end(),
                       [](const Detection& a, const Detection& b) { return a.score > b.score; });
      level_dets.resize(pre_nms_top_k);
    }
    all.insert(all.end(), level_dets.begin(), level_dets.end());
  }
  return all;
}

/// Greedy class-wise (per image and category) NMS. Order: higher score first, then lower input index.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });
  std::map<std::pair<int64_t, int>, std::vector<size_t>> kept_by_key;
  std::vector<size_t> kept;
  for (size_t i : order) {
    auto& bucket = kept_by_key[{dets[i].image_id, dets[i].category_id}];
    const bool suppressed = std::any_of(bucket.begin(), bucket.end(),
                                        [&](size_t j) { return iou(dets[i].box, dets[j].box) > iou_threshold; });
    if (suppressed) continue;
    bucket.push_back(i);
    kept.push_back(i);
  }
  std::vector<Detection> out;
  out.reserve(kept.size());
  for (size_t i : kept) out.push_back(dets[i]);
  return out;
}

/// Keeps the highest-scoring `cap` detections of every image.
inline std::vector<Detection> cap_per_image(std::vector<Detection> dets, int cap) {
  if (cap < 0) return dets;
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::map<int64_t, int> count;
  std::vector<Detection> out;
  for (auto& d : dets)
    if (count[d.image_id]++ < cap) out.push_back(d);
  return out;
}

/// Merged predictions of all branches: per-branch decode + NMS, then a plain union.
template <class T>
std::vector<Detection> infer(const Detector<T>& model, const std::vector<ImageRecord>& images,
                             const DecodeConfig& dc = {}, int batch_size = 8) {
  std::vector<Detection> out;
  for (size_t start = 0; start < images.size(); start += batch_size) {
    const size_t end = std::min(images.size(), start + batch_size);
    std::vector<const RgbImage*> px;
    for (size_t i = start; i < end; ++i) {
      if (!images[i].pixels) throw ConfigError("image " + std::to_string(images[i].id) + " has no pixel data");
      px.push_back(images[i].pixels.get());
    }
    const auto res = model.forward(Var<T>(images_to_tensor<T>(px)));
    const auto levels = level_specs(model.config().backbone, px[0]->height, px[0]->width);
    for (size_t i = start; i < end; ++i) {
      std::vector<Detection> merged;
      for (size_t k = 0; k < model.branch_count(); ++k) {
        auto d = decode_branch(res.branches[k], i - start, images[i].id, model.config().branches[k].category_ids,
                               levels, images[i].width, images[i].height, dc.score_thresh, dc.pre_nms_top_k);
        auto kept = nms(d, dc.nms_iou);
        merged.insert(merged.end(), kept.begin(), kept.end());
      }
      merged = cap_per_image(std::move(merged), dc.max_per_image);
      out.insert(out.end(), merged.begin(), merged.end());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// COCO-protocol average precision.

struct EvalResult {
  double map = 0;
  double map50 = 0;
  double map75 = 0;
  std::map<int, double> per_category_ap;                   // averaged over IoU thresholds
  std::map<int, std::array<double, 10>> per_category_thr;  // AP at each IoU threshold
};

inline double coco_iou_threshold(int i) { return 0.5 + 0.05 * i; }

/// AP over IoU thresholds .50:.05:.95 with 101-point interpolated precision.
///
/// Categories are those present in the ground truth (after `category_filter`); predictions are
/// filtered by the same set. Crowd ground truth is left out.
inline EvalResult coco_map(const std::vector<Detection>& predictions, const DetectionDataset& gt,
                           const std::optional<std::set<int>>& category_filter = std::nullopt) {
  std::set<int64_t> image_ids;
  for (const auto& im : gt.images) image_ids.insert(im.id);
  for (const auto& p : predictions)
    if (!image_ids.count(p.image_id))
      throw ConfigError("prediction references unknown image " + std::to_string(p.image_id));
  auto keep = [&](int c) { return !category_filter || category_filter->count(c); };

  // (category, image) -> boxes
  std::map<int, std::map<int64_t, std::vector<Box>>> gts;
  std::map<int, size_t> npos;
  for (const auto& a : gt.annotations) {
    if (a.iscrowd || !keep(a.category_id)) continue;
    gts[a.category_id][a.image_id].push_back(a.bbox);
    ++npos[a.category_id];
  }
  std::map<int, std::vector<size_t>> dets_by_cat;
  for (size_t i = 0; i < predictions.size(); ++i)
    if (gts.count(predictions[i].category_id)) dets_by_cat[predictions[i].category_id].push_back(i);

  EvalResult r;
  if (gts.empty()) return r;
  for (const auto& [cat, per_image] : gts) {
    auto order = dets_by_cat[cat];
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return predictions[a].score > predictions[b].score; });
    std::array<double, 10> ap{};
    for (int ti = 0; ti < 10; ++ti) {
      const double thr = coco_iou_threshold(ti);
      std::map<int64_t, std::vector<bool>> used;
      for (const auto& [img, boxes] : per_image) used[img].assign(boxes.size(), false);
      std::vector<double> tp_cum, fp_cum;
      double tp = 0, fp = 0;
      for (size_t idx : order) {
        const auto& d = predictions[idx];
        int best = -1;
        double best_iou = std::min(thr, 1.0 - 1e-10);
        auto it = per_image.find(d.image_id);
        if (it != per_image.end()) {
          const auto& boxes = it->second;
          auto& u = used[d.image_id];
          for (size_t g = 0; g < boxes.size(); ++g) {
            if (u[g]) continue;
            const double v = iou(d.box, boxes[g]);
            if (v < best_iou) continue;
            best_iou = v;
            best = static_cast<int>(g);
          }
          if (best >= 0) u[best] = true;
        }
        (best >= 0 ? tp : fp) += 1;
        tp_cum.push_back(tp);
        fp_cum.push_back(fp);
      }
      const size_t n = tp_cum.size();
      std::vector<double> rc(n), pr(n);
      for (size_t i = 0; i < n; ++i) {
        rc[i] = tp_cum[i] / static_cast<double>(npos[cat]);
        pr[i] = tp_cum[i] / (tp_cum[i] + fp_cum[i]);
      }
      for (size_t i = n; i-- > 1;) pr[i - 1] = std::max(pr[i - 1], pr[i]);
      double s = 0;
      for (int ri = 0; ri <= 100; ++ri) {
        const double rthr = ri / 100.0;
        const auto pos = std::lower_bound(rc.begin(), rc.end(), rthr) - rc.begin();
        if (static_cast<size_t>(pos) < n) s += pr[pos];
      }
      ap[ti] = s / 101.0;
    }
    r.per_category_thr[cat] = ap;
    r.per_category_ap[cat] = std::accumulate(ap.begin(), ap.end(), 0.0) / 10.0;
  }
  const double nc = static_cast<double>(r.per_category_ap.size());
  for (const auto& [cat, ap] : r.per_category_thr) {
    r.map += r.per_category_ap[cat] / nc;
    r.map50 += ap[0] / nc;
    r.map75 += ap[5] / nc;
  }
  return r;
}

inline nlohmann::json results_to_json(const std::vector<Detection>& dets) {
  auto j = nlohmann::json::array();
  for (const auto& d : dets)
    j.push_back({{"image_id", d.image_id},
                 {"category_id", d.category_id},
                 {"bbox", {d.box.x, d.box.y, d.box.w, d.box.h}},
                 {"score", d.score}});
  return j;
}

inline std::vector<Detection> results_from_json(const nlohmann::json& j) {
  std::vector<Detection> out;
  for (const auto& e : j) {
    const auto& b = e.at("bbox");
    out.push_back({e.at("image_id").get<int64_t>(), e.at("category_id").get<int>(),
                   Box{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()},
                   e.at("score").get<double>()});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Confidence heatmaps.

struct Heatmap {
  int width = 0;
  int height = 0;
  std::vector<double> confidence;  // per pixel, max over levels of the nearest cell
  RgbImage image;                  // color map blended over the input, boxes drawn
  std::vector<Detection> boxes;    // detections of the category above the display threshold
};

inline constexpr double kHeatmapBoxThreshold = 0.5;

/// Per-pixel confidence of one category, colored blue (low) to red (high) and blended 50/50 over the input.
template <class T>
Heatmap make_heatmap(const Detector<T>& model, const ImageRecord& image, int category_id) {
  size_t branch = model.branch_count();
  int cls = -1;
  std::vector<int> valid;
  for (size_t k = 0; k < model.branch_count(); ++k) {
    const auto& ids = model.config().branches[k].category_ids;
    valid.insert(valid.end(), ids.begin(), ids.end());
    auto it = std::find(ids.begin(), ids.end(), category_id);
    if (it != ids.end()) {
      branch = k;
      cls = static_cast<int>(it - ids.begin());
    }
  }
  if (cls < 0)
    throw ConfigError("unknown category " + std::to_string(category_id) + "; valid ids: " + detail::join(valid));
  if (!image.pixels) throw ConfigError("image " + std::to_string(image.id) + " has no pixel data");
  const RgbImage& src = *image.pixels;
  const auto res = model.forward(Var<T>(images_to_tensor<T>({&src})));
  const auto levels = level_specs(model.config().backbone, src.height, src.width);

  Heatmap hm;
  hm.width = src.width;
  hm.height = src.height;
  hm.confidence.assign(static_cast<size_t>(src.width) * src.height, 0.0);
  for (size_t l = 0; l < levels.size(); ++l) {
    const auto& lo = res.branches[branch].levels[l];
    const int s = levels[l].stride;
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x) {
        const int row = std::min(y / s, levels[l].height - 1), col = std::min(x / s, levels[l].width - 1);
        const double c = std::sqrt(sigmoid_scalar<double>(lo.cls.value().at(0, cls, row, col)) *
                                   sigmoid_scalar<double>(lo.ctr.value().at(0, 0, row, col)));
        auto& dst = hm.confidence[static_cast<size_t>(y) * src.width + x];
        dst = std::max(dst, c);
      }
  }
  hm.image = RgbImage(src.width, src.height);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      const double v = std::clamp(hm.confidence[static_cast<size_t>(y) * src.width + x], 0.0, 1.0);
      const double heat[3] = {255.0 * v, 0.0, 255.0 * (1.0 - v)};
      const uint8_t* in = src.px(x, y);
      uint8_t* out = hm.image.px(x, y);
      for (int c = 0; c < 3; ++c) out[c] = static_cast<uint8_t>(std::lround(0.5 * heat[c] + 0.5 * in[c]));
    }
  auto dets = decode_branch(res.branches[branch], 0, image.id, model.config().branches[branch].category_ids, levels,
                            src.width, src.height, kHeatmapBoxThreshold, 1000);
  dets.erase(std::remove_if(dets.begin(), dets.end(), [&](const Detection& d) { return d.category_id != category_id; }),
             dets.end());
  hm.boxes = nms(dets, 0.6);
  for (const auto& d : hm.boxes) {
    const int x0 = std::clamp(static_cast<int>(d.box.x), 0, src.width - 1);
    const int y0 = std::clamp(static_cast<int>(d.box.y), 0, src.height - 1);
    const int x1 = std::clamp(static_cast<int>(d.box.x2()), 0, src.width - 1);
    const int y1 = std::clamp(static_cast<int>(d.box.y2()), 0, src.height - 1);
    for (int x = x0; x <= x1; ++x)
      for (int y : {y0, y1}) std::fill_n(hm.image.px(x, y), 3, uint8_t{255});
    for (int y = y0; y <= y1; ++y)
      for (int x : {x0, x1}) std::fill_n(hm.image.px(x, y), 3, uint8_t{255});
  }
  return hm;
}

template <class T>
Heatmap emit_heatmap(const Detector<T>& model, const ImageRecord& image, int category_id,
                     const std::filesystem::path& out) {
  Heatmap hm = make_heatmap(model, image, category_id);
  write_ppm(out.string(), hm.image);
  return hm;
}

}  // namespace aimd
