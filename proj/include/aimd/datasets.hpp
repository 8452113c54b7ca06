#pragma once

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "aimd/image_io.hpp"
#include "aimd/tensor.hpp"

namespace aimd {

enum class Group { kUnassigned, kA, kB };

inline std::string group_name(Group g) {
  switch (g) {
    case Group::kA:
      return "A";
    case Group::kB:
      return "B";
    default:
      return "?";
  }
}

inline Group parse_group(const std::string& s) {
  if (s == "A" || s == "a") return Group::kA;
  if (s == "B" || s == "b") return Group::kB;
  throw ConfigError("unknown group '" + s + "' (expected A or B)");
}

struct CategorySpec {
  int id = 0;
  std::string name;
  Group group = Group::kUnassigned;
};

/// Axis-aligned box, (x, y, w, h) in pixels with a top-left origin.
struct Box {
  double x = 0, y = 0, w = 0, h = 0;
  double area() const { return w * h; }
  double x2() const { return x + w; }
  double y2() const { return y + h; }
  friend bool operator==(const Box&, const Box&) = default;
};

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x, b.x);
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y, b.y);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct BoxAnnotation {
  int64_t id = 0;
  int64_t image_id = 0;
  int category_id = 0;
  Box bbox;
  bool iscrowd = false;
  bool erased = false;  // bookkeeping only
  friend bool operator==(const BoxAnnotation&, const BoxAnnotation&) = default;
};

struct ImageRecord {
  int64_t id = 0;
  int width = 0;
  int height = 0;
  std::string file_name;
  std::shared_ptr<const RgbImage> pixels;  // null when only a file reference is known
};

/// One data source: images, the boxes annotated on them, and the category set those boxes cover.
struct DetectionDataset {
  std::string identifier;
  std::vector<ImageRecord> images;
  std::vector<BoxAnnotation> annotations;
  std::set<int> annotated_categories;
  std::optional<std::set<int>> all_categories_hint;
  std::map<int, std::string> category_names;
  /// Annotations removed during construction, kept for auditing. Never used for training.
  std::vector<BoxAnnotation> erased_annotations;

  size_t image_index(int64_t image_id) const {
    for (size_t i = 0; i < images.size(); ++i)
      if (images[i].id == image_id) return i;
    throw ConfigError("dataset " + identifier + ": unknown image id " + std::to_string(image_id));
  }

  /// annotations grouped by position in `images`.
  std::vector<std::vector<BoxAnnotation>> annotations_by_image() const {
    std::map<int64_t, size_t> pos;
    for (size_t i = 0; i < images.size(); ++i) pos[images[i].id] = i;
    std::vector<std::vector<BoxAnnotation>> out(images.size());
    for (const auto& a : annotations) {
      auto it = pos.find(a.image_id);
      if (it == pos.end())
        throw ConfigError("dataset " + identifier + ": annotation " + std::to_string(a.id) +
                          " references unknown image " + std::to_string(a.image_id));
      out[it->second].push_back(a);
    }
    return out;
  }

  void validate() const {
    std::set<int64_t> ids;
    for (const auto& im : images)
      if (!ids.insert(im.id).second) throw ConfigError("dataset " + identifier + ": duplicate image id");
    for (const auto& a : annotations) {
      if (!annotated_categories.count(a.category_id))
        throw ConfigError("dataset " + identifier + ": annotation category " + std::to_string(a.category_id) +
                          " is not annotated in this dataset");
      if (!ids.count(a.image_id))
        throw ConfigError("dataset " + identifier + ": annotation references unknown image " +
                          std::to_string(a.image_id));
      if (!(a.bbox.w > 0 && a.bbox.h > 0)) throw ConfigError("dataset " + identifier + ": non-positive box size");
    }
  }

  /// Sorted category ids; position + 1 is the class label used by a detector branch.
  std::vector<int> category_list() const { return {annotated_categories.begin(), annotated_categories.end()}; }
};

// ---------------------------------------------------------------------------
// Category division and the divide / assign / erase construction.

inline std::pair<std::set<int>, std::set<int>> divide_categories(const std::vector<CategorySpec>& categories,
                                                                 const std::map<std::string, Group>& grouping) {
  std::set<int> a, b, seen;
  for (const auto& c : categories) {
    if (!seen.insert(c.id).second) throw ConfigError("duplicate category id " + std::to_string(c.id));
    auto it = grouping.find(c.name);
    if (it == grouping.end() || it->second == Group::kUnassigned)
      throw ConfigError("category '" + c.name + "' has no group assignment");
    (it->second == Group::kA ? a : b).insert(c.id);
  }
  return {a, b};
}

struct SplitRow {
  std::string name;
  size_t n_categories = 0;
  size_t n_images = 0;
  size_t n_annotations_retained = 0;
  size_t n_annotations_original = 0;
  double erased_fraction = 0.0;
};

struct SplitReport {
  std::vector<SplitRow> rows;

  /// Tab-separated table: name, n_cat, n_img, n_anno, n_anno_orig, erased_pct.
  std::string to_text() const {
    std::ostringstream os;
    os << "name\tn_cat\tn_img\tn_anno\tn_anno_orig\terased_pct\n";
    for (const auto& r : rows)
      os << r.name << '\t' << r.n_categories << '\t' << r.n_images << '\t' << r.n_annotations_retained << '\t'
         << r.n_annotations_original << '\t' << std::fixed << std::setprecision(2) << 100.0 * r.erased_fraction
         << "%\n";
    return os.str();
  }
};

inline double erased_fraction(size_t retained, size_t original) {
  return original == 0 ? 0.0 : static_cast<double>(original - retained) / static_cast<double>(original);
}

struct SplitResult {
  DetectionDataset a;
  DetectionDataset b;
  SplitReport report;
};

/// Routes every source image to exactly one split and erases the other group's boxes.
///
/// Pure-A and pure-B images go to their own split. Images without annotations are placed by a seeded
/// coin flip. Mixed images are then visited in source order and each goes to whichever split currently
/// holds fewer images, with ties decided by the same coin.
inline SplitResult assign_and_erase(const DetectionDataset& source, const std::set<int>& cat_a,
                                    const std::set<int>& cat_b, uint64_t rng_seed) {
  for (int c : cat_a)
    if (cat_b.count(c)) throw ConfigError("category " + std::to_string(c) + " is in both groups");
  std::mt19937_64 rng(rng_seed);
  std::bernoulli_distribution coin(0.5);

  const auto per_image = source.annotations_by_image();
  enum class Dest { kA, kB, kPending };
  std::vector<Dest> dest(source.images.size(), Dest::kPending);
  size_t n_a = 0, n_b = 0;
  std::vector<size_t> mixed;
  for (size_t i = 0; i < source.images.size(); ++i) {
    bool has_a = false, has_b = false;
    for (const auto& an : per_image[i]) {
      if (cat_a.count(an.category_id)) has_a = true;
      else if (cat_b.count(an.category_id)) has_b = true;
      else
        throw ConfigError("annotation " + std::to_string(an.id) + " has category " +
                          std::to_string(an.category_id) + " outside both groups");
    }
    if (has_a && has_b) {
      mixed.push_back(i);
      continue;
    }
    bool to_a = has_a || (!has_b && coin(rng));
    dest[i] = to_a ? Dest::kA : Dest::kB;
    ++(to_a ? n_a : n_b);
  }
  for (size_t i : mixed) {
    bool to_a = n_a < n_b || (n_a == n_b && coin(rng));
    dest[i] = to_a ? Dest::kA : Dest::kB;
    ++(to_a ? n_a : n_b);
  }

  SplitResult out;
  auto init = [&](DetectionDataset& d, const std::string& id, const std::set<int>& cats) {
    d.identifier = id;
    d.annotated_categories = cats;
    std::set<int> all = cat_a;
    all.insert(cat_b.begin(), cat_b.end());
    d.all_categories_hint = all;
    for (int c : cats)
      if (auto it = source.category_names.find(c); it != source.category_names.end()) d.category_names[c] = it->second;
  };
  init(out.a, "A", cat_a);
  init(out.b, "B", cat_b);
  std::array<size_t, 2> original{0, 0};
  for (size_t i = 0; i < source.images.size(); ++i) {
    const bool to_a = dest[i] == Dest::kA;
    DetectionDataset& d = to_a ? out.a : out.b;
    const auto& keep = to_a ? cat_a : cat_b;
    d.images.push_back(source.images[i]);
    original[to_a ? 0 : 1] += per_image[i].size();
    for (auto an : per_image[i]) {
      if (keep.count(an.category_id)) {
        d.annotations.push_back(an);
      } else {
        an.erased = true;
        d.erased_annotations.push_back(an);
      }
    }
  }
  auto row = [](const DetectionDataset& d, size_t orig) {
    SplitRow r;
    r.name = d.identifier;
    r.n_categories = d.annotated_categories.size();
    r.n_images = d.images.size();
    r.n_annotations_retained = d.annotations.size();
    r.n_annotations_original = orig;
    r.erased_fraction = erased_fraction(r.n_annotations_retained, orig);
    return r;
  };
  out.report.rows = {row(out.a, original[0]), row(out.b, original[1])};
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic shapes benchmark.

struct ShapeVocabEntry {
  std::string kind;
  Group group = Group::kUnassigned;
};

struct SyntheticSceneConfig {
  int image_size = 64;
  std::vector<ShapeVocabEntry> shape_vocabulary;
  int min_objects = 1;
  int max_objects = 4;
  int n_images = 100;
  uint64_t rng_seed = 0;
  int min_object_size = 10;
  int max_object_size = 28;
  std::string identifier = "full";
  /// 1-based offset added to image and annotation ids; lets train and test sets coexist.
  int64_t first_image_id = 1;
};

inline const std::vector<std::string>& known_shape_kinds() {
  static const std::vector<std::string> kinds{"circle", "square", "triangle", "diamond",
                                              "cross",  "ring",   "star",     "hbar"};
  return kinds;
}

/// Two shape families of three kinds each: group A is round/pointed, group B is axis-aligned.
inline std::vector<ShapeVocabEntry> default_shape_vocabulary() {
  return {{"circle", Group::kA}, {"triangle", Group::kA}, {"diamond", Group::kA},
          {"square", Group::kB}, {"cross", Group::kB},    {"ring", Group::kB}};
}

namespace detail {

// Membership test in normalized box coordinates u, v in [0, 1].
inline bool shape_contains(const std::string& kind, double u, double v) {
  const double cu = u - 0.5, cv = v - 0.5;
  if (kind == "circle") return cu * cu + cv * cv <= 0.25;
  if (kind == "square") return true;
  if (kind == "triangle") return std::abs(cu) <= 0.5 * v;
  if (kind == "diamond") return std::abs(cu) + std::abs(cv) <= 0.5;
  if (kind == "cross") return std::abs(cu) <= 0.17 || std::abs(cv) <= 0.17;
  if (kind == "ring") {
    const double r2 = cu * cu + cv * cv;
    return r2 <= 0.25 && r2 >= 0.09;
  }
  if (kind == "star") {
    const double r = std::sqrt(cu * cu + cv * cv);
    const double a = std::atan2(cv, cu);
    const double lim = 0.5 * (0.55 + 0.45 * std::pow(std::abs(std::cos(2.5 * a)), 3.0));
    return r <= lim;
  }
  if (kind == "hbar") return std::abs(cv) <= 0.5 && (std::abs(cv) >= 0.3 || std::abs(cu) <= 0.12);
  throw ConfigError("unknown shape kind '" + kind + "'");
}

}  // namespace detail

inline DetectionDataset generate_synthetic(const SyntheticSceneConfig& cfg) {
  if (cfg.n_images <= 0) throw ConfigError("synthetic config: n_images must be positive");
  if (cfg.min_objects < 0 || cfg.max_objects < cfg.min_objects)
    throw ConfigError("synthetic config: empty object count range");
  if (cfg.shape_vocabulary.empty()) throw ConfigError("synthetic config: empty shape vocabulary");
  if (cfg.min_object_size < 2 || cfg.max_object_size < cfg.min_object_size)
    throw ConfigError("synthetic config: invalid object size range");
  if (cfg.max_objects > 0 && cfg.min_object_size > cfg.image_size)
    throw DomainError("image of size " + std::to_string(cfg.image_size) + " cannot hold objects of size " +
                      std::to_string(cfg.min_object_size));
  for (const auto& e : cfg.shape_vocabulary) detail::shape_contains(e.kind, 0.5, 0.5);

  DetectionDataset ds;
  ds.identifier = cfg.identifier;
  for (size_t k = 0; k < cfg.shape_vocabulary.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    ds.annotated_categories.insert(id);
    ds.category_names[id] = cfg.shape_vocabulary[k].kind;
  }
  std::mt19937_64 rng(cfg.rng_seed);
  auto uni = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  const int S = cfg.image_size;
  int64_t ann_id = cfg.first_image_id * 1000;
  for (int n = 0; n < cfg.n_images; ++n) {
    ImageRecord rec;
    rec.id = cfg.first_image_id + n;
    rec.width = rec.height = S;
    std::ostringstream fname;
    fname << cfg.identifier << '_' << std::setw(6) << std::setfill('0') << rec.id << ".ppm";
    rec.file_name = fname.str();
    auto img = std::make_shared<RgbImage>(S, S);
    const int bg = uni(20, 90);
    for (auto& p : img->pixels) p = static_cast<uint8_t>(std::clamp(bg + uni(-12, 12), 0, 255));

    const int count = uni(cfg.min_objects, cfg.max_objects);
    std::vector<Box> placed;
    for (int o = 0; o < count; ++o) {
      bool ok = false;
      for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
        const int w = uni(cfg.min_object_size, std::min(cfg.max_object_size, S));
        const int h = std::clamp(static_cast<int>(std::lround(w * (0.8 + 0.4 * uni(0, 100) / 100.0))),
                                 cfg.min_object_size, S);
        const Box b{static_cast<double>(uni(0, S - w)), static_cast<double>(uni(0, S - h)), static_cast<double>(w),
                    static_cast<double>(h)};
        if (std::all_of(placed.begin(), placed.end(), [&](const Box& p) { return iou(p, b) < 0.3; })) {
          placed.push_back(b);
          ok = true;
        }
      }
      if (!ok)
        throw DomainError("image " + std::to_string(rec.id) + " of size " + std::to_string(S) + " cannot fit " +
                          std::to_string(count) + " non-overlapping objects");
      const size_t kind_idx = static_cast<size_t>(uni(0, static_cast<int>(cfg.shape_vocabulary.size()) - 1));
      const std::string& kind = cfg.shape_vocabulary[kind_idx].kind;
      const std::array<int, 3> color{uni(150, 255), uni(60, 255), uni(60, 255)};
      const int rot = uni(0, 2);
      const Box& b = placed.back();
      for (int y = static_cast<int>(b.y); y < static_cast<int>(b.y2()); ++y)
        for (int x = static_cast<int>(b.x); x < static_cast<int>(b.x2()); ++x) {
          const double u = (x + 0.5 - b.x) / b.w, v = (y + 0.5 - b.y) / b.h;
          if (!detail::shape_contains(kind, u, v)) continue;
          uint8_t* p = img->px(x, y);
          for (int c = 0; c < 3; ++c) p[c] = static_cast<uint8_t>(color[(c + rot) % 3]);
        }
      BoxAnnotation an;
      an.id = ++ann_id;
      an.image_id = rec.id;
      an.category_id = static_cast<int>(kind_idx) + 1;
      an.bbox = b;
      ds.annotations.push_back(an);
    }
    rec.pixels = std::move(img);
    ds.images.push_back(std::move(rec));
  }
  return ds;
}

/// Category specs for a synthetic vocabulary (ids 1..K in vocabulary order).
inline std::vector<CategorySpec> synthetic_categories(const SyntheticSceneConfig& cfg) {
  std::vector<CategorySpec> out;
  for (size_t k = 0; k < cfg.shape_vocabulary.size(); ++k)
    out.push_back({static_cast<int>(k) + 1, cfg.shape_vocabulary[k].kind, cfg.shape_vocabulary[k].group});
  return out;
}

inline std::map<std::string, Group> synthetic_grouping(const SyntheticSceneConfig& cfg) {
  std::map<std::string, Group> g;
  for (const auto& e : cfg.shape_vocabulary) g[e.kind] = e.group;
  return g;
}

// ---------------------------------------------------------------------------
// Equal-per-dataset batch sampling.

struct BatchItem {
  size_t dataset = 0;
  size_t image = 0;
  std::string identifier;
  friend bool operator==(const BatchItem&, const BatchItem&) = default;
};
using Batch = std::vector<BatchItem>;

/// Endless stream of batches holding batch_size / k images from each of k datasets.
/// An epoch spans the largest dataset; smaller ones wrap around their own permutation.
class BatchSampler {
 public:
  BatchSampler(std::vector<size_t> sizes, std::vector<std::string> identifiers, int batch_size, uint64_t seed)
      : sizes_(std::move(sizes)), ids_(std::move(identifiers)), rng_(seed) {
    if (sizes_.empty()) throw ConfigError("batch sampler: no datasets");
    if (batch_size <= 0 || batch_size % static_cast<int>(sizes_.size()) != 0)
      throw ConfigError("batch size " + std::to_string(batch_size) + " is not divisible by dataset count " +
                        std::to_string(sizes_.size()));
    for (size_t s : sizes_)
      if (s == 0) throw ConfigError("batch sampler: empty dataset");
    per_dataset_ = static_cast<size_t>(batch_size) / sizes_.size();
    const size_t largest = *std::max_element(sizes_.begin(), sizes_.end());
    batches_per_epoch_ = (largest + per_dataset_ - 1) / per_dataset_;
    ids_.resize(sizes_.size());
    start_epoch();
  }

  size_t batches_per_epoch() const { return batches_per_epoch_; }

  Batch next() {
    if (batch_in_epoch_ == batches_per_epoch_) start_epoch();
    Batch b;
    for (size_t k = 0; k < sizes_.size(); ++k)
      for (size_t j = 0; j < per_dataset_; ++j) {
        const size_t pos = batch_in_epoch_ * per_dataset_ + j;
        b.push_back({k, perms_[k][pos % sizes_[k]], ids_[k]});
      }
    ++batch_in_epoch_;
    return b;
  }

 private:
  void start_epoch() {
    perms_.assign(sizes_.size(), {});
    for (size_t k = 0; k < sizes_.size(); ++k) {
      perms_[k].resize(sizes_[k]);
      std::iota(perms_[k].begin(), perms_[k].end(), size_t{0});
      std::shuffle(perms_[k].begin(), perms_[k].end(), rng_);
    }
    batch_in_epoch_ = 0;
  }

  std::vector<size_t> sizes_;
  std::vector<std::string> ids_;
  std::mt19937_64 rng_;
  size_t per_dataset_ = 0;
  size_t batches_per_epoch_ = 0;
  size_t batch_in_epoch_ = 0;
  std::vector<std::vector<size_t>> perms_;
};

inline BatchSampler make_sampler(const std::vector<DetectionDataset>& datasets, int batch_size, uint64_t seed) {
  std::vector<size_t> sizes;
  std::vector<std::string> ids;
  for (const auto& d : datasets) {
    sizes.push_back(d.images.size());
    ids.push_back(d.identifier);
  }
  return BatchSampler(std::move(sizes), std::move(ids), batch_size, seed);
}

/// One epoch of batches.
inline std::vector<Batch> make_batches(const std::vector<DetectionDataset>& datasets, int batch_size, uint64_t seed) {
  auto s = make_sampler(datasets, batch_size, seed);
  std::vector<Batch> out;
  for (size_t i = 0; i < s.batches_per_epoch(); ++i) out.push_back(s.next());
  return out;
}

/// Normalized [N,3,H,W] tensor for a list of same-sized images.
template <class T>
Tensor<T> images_to_tensor(const std::vector<const RgbImage*>& imgs) {
  if (imgs.empty()) throw ShapeError("images_to_tensor: empty batch");
  const int H = imgs[0]->height, W = imgs[0]->width;
  Tensor<T> t({static_cast<int>(imgs.size()), 3, H, W});
  for (size_t n = 0; n < imgs.size(); ++n) {
    if (imgs[n]->height != H || imgs[n]->width != W) throw ShapeError("images_to_tensor: mixed image sizes");
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c)
          t.at(static_cast<int>(n), c, y, x) = static_cast<T>((imgs[n]->px(x, y)[c] / 255.0 - 0.5) / 0.25);
  }
  return t;
}

// ---------------------------------------------------------------------------
// COCO JSON interchange and grouping files.

inline nlohmann::json to_coco_json(const DetectionDataset& d) {
  using nlohmann::json;
  json j;
  j["info"] = {{"identifier", d.identifier}};
  if (d.all_categories_hint)
    j["info"]["all_categories"] = std::vector<int>(d.all_categories_hint->begin(), d.all_categories_hint->end());
  j["images"] = json::array();
  for (const auto& im : d.images)
    j["images"].push_back({{"id", im.id}, {"width", im.width}, {"height", im.height}, {"file_name", im.file_name}});
  j["annotations"] = json::array();
  for (const auto& a : d.annotations)
    j["annotations"].push_back({{"id", a.id},
                                {"image_id", a.image_id},
                                {"category_id", a.category_id},
                                {"bbox", {a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h}},
                                {"area", a.bbox.area()},
                                {"iscrowd", a.iscrowd ? 1 : 0}});
  j["categories"] = json::array();
  for (int c : d.annotated_categories) {
    auto it = d.category_names.find(c);
    j["categories"].push_back({{"id", c}, {"name", it == d.category_names.end() ? std::to_string(c) : it->second}});
  }
  return j;
}

/// Parses COCO JSON. Boxes with w <= 1 or h <= 1 are dropped and counted in the log.
inline DetectionDataset from_coco_json(const nlohmann::json& j, const std::string& identifier = "") {
  DetectionDataset d;
  d.identifier = identifier;
  if (j.contains("info") && j["info"].contains("identifier") && identifier.empty())
    d.identifier = j["info"]["identifier"].get<std::string>();
  if (j.contains("info") && j["info"].contains("all_categories"))
    d.all_categories_hint = j["info"]["all_categories"].get<std::set<int>>();
  for (const auto& c : j.at("categories")) {
    const int id = c.at("id").get<int>();
    d.annotated_categories.insert(id);
    d.category_names[id] = c.value("name", std::to_string(id));
  }
  for (const auto& im : j.at("images")) {
    ImageRecord r;
    r.id = im.at("id").get<int64_t>();
    r.width = im.at("width").get<int>();
    r.height = im.at("height").get<int>();
    r.file_name = im.value("file_name", "");
    d.images.push_back(std::move(r));
  }
  size_t dropped = 0;
  for (const auto& a : j.at("annotations")) {
    BoxAnnotation an;
    an.id = a.at("id").get<int64_t>();
    an.image_id = a.at("image_id").get<int64_t>();
    an.category_id = a.at("category_id").get<int>();
    const auto& bb = a.at("bbox");
    an.bbox = {bb.at(0).get<double>(), bb.at(1).get<double>(), bb.at(2).get<double>(), bb.at(3).get<double>()};
    an.iscrowd = a.value("iscrowd", 0) != 0;
    if (an.bbox.w <= 1.0 || an.bbox.h <= 1.0) {
      ++dropped;
      continue;
    }
    d.annotations.push_back(an);
  }
  if (dropped) spdlog::info("dataset {}: dropped {} degenerate boxes (w or h <= 1px)", d.identifier, dropped);
  d.validate();
  return d;
}

/// Writes `<dir>/annotations.json` plus one PPM per image that carries pixels.
inline void save_dataset(const DetectionDataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "annotations.json");
  if (!os) throw std::runtime_error("cannot write " + (dir / "annotations.json").string());
  os << to_coco_json(d).dump(1) << '\n';
  for (const auto& im : d.images)
    if (im.pixels && !im.file_name.empty() && !std::filesystem::exists(dir / im.file_name))
      write_ppm((dir / im.file_name).string(), *im.pixels);
}

/// Loads COCO JSON; image pixels are read from `image_dir` (default: the JSON's directory) when present.
inline DetectionDataset load_dataset(const std::filesystem::path& json_path, const std::string& identifier = "",
                                     std::optional<std::filesystem::path> image_dir = std::nullopt) {
  std::ifstream is(json_path);
  if (!is) throw ConfigError("cannot open " + json_path.string());
  nlohmann::json j;
  is >> j;
  DetectionDataset d = from_coco_json(j, identifier);
  const auto dir = image_dir.value_or(json_path.parent_path());
  for (auto& im : d.images) {
    const auto p = dir / im.file_name;
    if (!im.file_name.empty() && p.extension() == ".ppm" && std::filesystem::exists(p)) {
      auto px = std::make_shared<RgbImage>(read_ppm(p.string()));
      if (px->width != im.width || px->height != im.height)
        throw ConfigError("image " + p.string() + " does not match its declared size");
      im.pixels = std::move(px);
    }
  }
  return d;
}

inline std::vector<CategorySpec> categories_of(const DetectionDataset& d) {
  std::vector<CategorySpec> out;
  for (int c : d.annotated_categories) {
    auto it = d.category_names.find(c);
    out.push_back({c, it == d.category_names.end() ? std::to_string(c) : it->second, Group::kUnassigned});
  }
  return out;
}

/// Grouping file: one `category_name<TAB>group` per line; blank lines and '#' comments ignored.
inline std::map<std::string, Group> parse_grouping(std::istream& is) {
  std::map<std::string, Group> g;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ConfigError("grouping line " + std::to_string(lineno) + ": missing TAB");
    const std::string name = line.substr(0, tab);
    if (g.count(name)) throw ConfigError("grouping line " + std::to_string(lineno) + ": duplicate '" + name + "'");
    g[name] = parse_group(line.substr(tab + 1));
  }
  return g;
}

inline std::map<std::string, Group> load_grouping(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw ConfigError("cannot open grouping file " + p.string());
  return parse_grouping(is);
}

}  // namespace aimd
