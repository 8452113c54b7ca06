#pragma once

// Independent reference implementations used by the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "aimd/autograd.hpp"
#include "aimd/datasets.hpp"
#include "aimd/evaluation.hpp"

namespace oracle {

using LD = long double;

inline std::vector<LD> softmax(const std::vector<LD>& z, LD temperature) {
  std::vector<LD> e(z.size());
  LD m = *std::max_element(z.begin(), z.end());
  LD s = 0;
  for (size_t i = 0; i < z.size(); ++i) s += e[i] = std::exp((z[i] - m) / temperature);
  for (auto& v : e) v /= s;
  return e;
}

/// sum_i p_i ln(p_i / q_i)
inline LD kl(const std::vector<LD>& p, const std::vector<LD>& q) {
  LD s = 0;
  for (size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

inline double rel_err(LD got, LD want) {
  const LD d = std::fabs(got - want);
  const LD m = std::max(std::fabs(want), std::fabs(got));
  return static_cast<double>(m == 0 ? d : d / m);
}

/// Central-difference check of every parameter element against reverse-mode gradients.
/// Returns ||g_analytic - g_numeric|| / (||g_analytic|| + ||g_numeric||), or 0 when both vanish.
inline double gradient_check(std::vector<aimd::Var<double>> params,
                             const std::function<aimd::Var<double>()>& loss, double step = 1e-5) {
  for (auto& p : params) p.zero_grad();
  aimd::backward(loss());
  LD diff = 0, na = 0, nn = 0;
  for (auto& p : params) {
    std::vector<double> analytic(p.value().size(), 0.0);
    if (p.has_grad())
      for (size_t i = 0; i < analytic.size(); ++i) analytic[i] = p.grad()[i];
    for (size_t i = 0; i < analytic.size(); ++i) {
      double& x = p.mutable_value()[i];
      const double keep = x;
      x = keep + step;
      const LD up = loss().item();
      x = keep - step;
      const LD down = loss().item();
      x = keep;
      const LD num = (up - down) / (2 * step);
      diff += (analytic[i] - num) * (analytic[i] - num);
      na += static_cast<LD>(analytic[i]) * analytic[i];
      nn += num * num;
    }
  }
  const LD den = std::sqrt(na) + std::sqrt(nn);
  return den == 0 ? 0.0 : static_cast<double>(std::sqrt(diff) / den);
}

/// Greedy NMS written as a quadratic scan: a box survives iff no higher-priority surviving box of the
/// same image and category overlaps it by more than the threshold.
inline std::vector<aimd::Detection> nms(const std::vector<aimd::Detection>& d, double thr) {
  const size_t n = d.size();
  auto before = [&](size_t a, size_t b) { return d[a].score > d[b].score || (d[a].score == d[b].score && a < b); };
  std::vector<int> alive(n, -1);  // -1 undecided, 0 suppressed, 1 kept
  for (size_t round = 0; round < n; ++round) {
    // pick the highest-priority undecided box
    size_t best = n;
    for (size_t i = 0; i < n; ++i)
      if (alive[i] < 0 && (best == n || before(i, best))) best = i;
    bool sup = false;
    for (size_t j = 0; j < n; ++j)
      if (alive[j] == 1 && d[j].image_id == d[best].image_id && d[j].category_id == d[best].category_id &&
          aimd::iou(d[j].box, d[best].box) > thr)
        sup = true;
    alive[best] = sup ? 0 : 1;
  }
  std::vector<size_t> kept;
  for (size_t i = 0; i < n; ++i)
    if (alive[i] == 1) kept.push_back(i);
  std::sort(kept.begin(), kept.end(), before);
  std::vector<aimd::Detection> out;
  for (size_t i : kept) out.push_back(d[i]);
  return out;
}

inline double box_iou(const aimd::Box& a, const aimd::Box& b) {
  const double x0 = std::max(a.x, b.x), y0 = std::max(a.y, b.y);
  const double x1 = std::min(a.x + a.w, b.x + b.w), y1 = std::min(a.y + a.h, b.y + b.h);
  const double inter = std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0);
  const double u = a.w * a.h + b.w * b.h - inter;
  return u > 0 ? inter / u : 0.0;
}

/// AP at one IoU threshold for one category, evaluated directly from the definition:
/// predictions in descending score order (input order on ties) each claim the best still-free ground
/// truth box of their image, then precision at each of 101 recall levels is the best precision
/// reached at any recall at or above it.
inline double ap_at(const std::vector<aimd::Detection>& preds, const std::vector<aimd::BoxAnnotation>& gt, int cat,
                    double thr) {
  std::vector<const aimd::BoxAnnotation*> g;
  for (const auto& a : gt)
    if (a.category_id == cat && !a.iscrowd) g.push_back(&a);
  if (g.empty()) return -1;
  std::vector<size_t> idx;
  for (size_t i = 0; i < preds.size(); ++i)
    if (preds[i].category_id == cat) idx.push_back(i);
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return preds[a].score > preds[b].score; });
  std::vector<bool> taken(g.size(), false);
  std::vector<std::pair<double, double>> pr;  // (recall, precision)
  int tp = 0, seen = 0;
  const double eff = std::min(thr, 1.0 - 1e-10);
  for (size_t i : idx) {
    ++seen;
    int pick = -1;
    double best = eff;
    for (size_t j = 0; j < g.size(); ++j) {
      if (taken[j] || g[j]->image_id != preds[i].image_id) continue;
      const double v = box_iou(preds[i].box, g[j]->bbox);
      if (v >= best) {
        best = v;
        pick = static_cast<int>(j);
      }
    }
    if (pick >= 0) {
      taken[pick] = true;
      ++tp;
    }
    pr.push_back({static_cast<double>(tp) / g.size(), static_cast<double>(tp) / seen});
  }
  double sum = 0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r * 0.01;
    double p = 0;
    for (const auto& [rc, pc] : pr)
      if (rc >= level) p = std::max(p, pc);
    sum += p;
  }
  return sum / 101.0;
}

struct MapTriple {
  double map = 0, map50 = 0, map75 = 0;
};

inline MapTriple coco_map(const std::vector<aimd::Detection>& preds, const std::vector<aimd::BoxAnnotation>& gt) {
  std::set<int> cats;
  for (const auto& a : gt)
    if (!a.iscrowd) cats.insert(a.category_id);
  MapTriple m;
  if (cats.empty()) return m;
  for (int c : cats) {
    double s = 0;
    for (int t = 0; t < 10; ++t) {
      const double ap = ap_at(preds, gt, c, 0.5 + 0.05 * t);
      s += ap;
      if (t == 0) m.map50 += ap / cats.size();
      if (t == 5) m.map75 += ap / cats.size();
    }
    m.map += s / 10.0 / cats.size();
  }
  return m;
}

}  // namespace oracle
