#pragma once

#include <Eigen/Core>

#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "aimd/tensor.hpp"

namespace aimd {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& ensure_grad() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool has_grad() const { return !grad.empty() && grad.size() == value.size(); }
};

/// Handle to a node in the reverse-mode graph. Copies share the node.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> v, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(v);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_->has_grad(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(size_t i) const { return node_->value.dim(i); }
  T item() const { return node_->value[0]; }
  void zero_grad() {
    if (node_->has_grad()) node_->grad.zero();
  }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds a result node; the backward closure only runs if some parent needs a gradient.
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (auto& p : parents) {
    if (p.defined() && p.requires_grad()) n->requires_grad = true;
    if (p.defined()) n->parents.push_back(p.node());
  }
  if (n->requires_grad) n->backward = std::move(backward);
  else n->parents.clear();
  return Var<T>(std::move(n));
}

template <class T>
inline bool wants_grad(const std::shared_ptr<Node<T>>& n) {
  return n && n->requires_grad;
}

/// Runs reverse accumulation from a scalar root.
template <class T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->has_grad()) n->backward(*n);
  }
}

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeom {
  int n, cin, h, w, cout, k, stride, pad, groups, hout, wout;
  int cin_g() const { return cin / groups; }
  int cout_g() const { return cout / groups; }
  int col_rows() const { return cin_g() * k * k; }
  int col_cols() const { return hout * wout; }
};

template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const int hw = g.hout * g.wout;
  for (int c = 0; c < g.cin_g(); ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = cols + static_cast<size_t>((c * g.k + ky) * g.k + kx) * hw;
        const T* plane = x + static_cast<size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.hout; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          T* out = row + oy * g.wout;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + g.wout, T(0));
            continue;
          }
          const T* src = plane + static_cast<size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wout; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            out[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx) {
  const int hw = g.hout * g.wout;
  for (int c = 0; c < g.cin_g(); ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = cols + static_cast<size_t>((c * g.k + ky) * g.k + kx) * hw;
        T* plane = dx + static_cast<size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.hout; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = plane + static_cast<size_t>(iy) * g.w;
          const T* in = row + oy * g.wout;
          for (int ox = 0; ox < g.wout; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.w) dst[ix] += in[ox];
          }
        }
      }
}

inline void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected [N,C,H,W], got " + shape_str(s));
}

}  // namespace detail

/// 2-D convolution, NCHW. `w` is [Cout, Cin/groups, k, k]; `b` may be undefined.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1, int pad = 0, int groups = 1) {
  using namespace detail;
  require_rank4(x.shape(), "conv2d");
  require_rank4(w.shape(), "conv2d weight");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (groups <= 0 || xs[1] % groups != 0 || ws[0] % groups != 0)
    throw ShapeError("conv2d: channels " + std::to_string(xs[1]) + "->" + std::to_string(ws[0]) +
                     " not divisible by groups " + std::to_string(groups));
  if (ws[1] != xs[1] / groups || ws[2] != ws[3])
    throw ShapeError("conv2d: weight " + shape_str(ws) + " incompatible with input " + shape_str(xs));
  if (b.defined() && (b.value().size() != static_cast<size_t>(ws[0])))
    throw ShapeError("conv2d: bias size mismatch");
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad, groups, 0, 0};
  g.hout = (g.h + 2 * pad - g.k) / stride + 1;
  g.wout = (g.w + 2 * pad - g.k) / stride + 1;
  if (g.hout <= 0 || g.wout <= 0) throw ShapeError("conv2d: empty output for input " + shape_str(xs));

  const bool direct = g.k == 1 && stride == 1 && pad == 0;
  Tensor<T> out({g.n, g.cout, g.hout, g.wout});
  std::vector<T> cols(direct ? 0 : static_cast<size_t>(g.col_rows()) * g.col_cols());
  const T* xd = x.value().data();
  const T* wd = w.value().data();
  const size_t in_img = static_cast<size_t>(g.cin) * g.h * g.w;
  const size_t out_img = static_cast<size_t>(g.cout) * g.hout * g.wout;
  for (int n = 0; n < g.n; ++n)
    for (int gi = 0; gi < groups; ++gi) {
      const T* xin = xd + n * in_img + static_cast<size_t>(gi) * g.cin_g() * g.h * g.w;
      const T* colp = xin;
      if (!direct) {
        im2col(xin, g, cols.data());
        colp = cols.data();
      }
      CMapMat<T> cm(colp, g.col_rows(), g.col_cols());
      CMapMat<T> wm(wd + static_cast<size_t>(gi) * g.cout_g() * g.col_rows(), g.cout_g(), g.col_rows());
      MapMat<T> om(out.data() + n * out_img + static_cast<size_t>(gi) * g.cout_g() * g.col_cols(), g.cout_g(),
                   g.col_cols());
      om.noalias() = wm * cm;
    }
  if (b.defined()) {
    const T* bd = b.value().data();
    const int hw = g.hout * g.wout;
    for (int n = 0; n < g.n; ++n)
      for (int c = 0; c < g.cout; ++c) {
        T* o = out.data() + n * out_img + static_cast<size_t>(c) * hw;
        for (int i = 0; i < hw; ++i) o[i] += bd[c];
      }
  }

  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.defined() ? b.node() : nullptr;
  return make_result<T>(std::move(out), {x, w, b}, [xn, wn, bn, g, direct, in_img, out_img](Node<T>& self) {
    const T* go = self.grad.data();
    const int hw = g.hout * g.wout;
    if (wants_grad(bn)) {
      T* db = bn->ensure_grad().data();
      for (int n = 0; n < g.n; ++n)
        for (int c = 0; c < g.cout; ++c) {
          const T* gp = go + n * out_img + static_cast<size_t>(c) * hw;
          T s = 0;
          for (int i = 0; i < hw; ++i) s += gp[i];
          db[c] += s;
        }
    }
    const bool need_w = wants_grad(wn), need_x = wants_grad(xn);
    if (!need_w && !need_x) return;
    std::vector<T> cols(static_cast<size_t>(g.col_rows()) * g.col_cols());
    T* dw = need_w ? wn->ensure_grad().data() : nullptr;
    T* dx = need_x ? xn->ensure_grad().data() : nullptr;
    const T* xd = xn->value.data();
    const T* wd = wn->value.data();
    for (int n = 0; n < g.n; ++n)
      for (int gi = 0; gi < g.groups; ++gi) {
        const size_t in_off = n * in_img + static_cast<size_t>(gi) * g.cin_g() * g.h * g.w;
        CMapMat<T> gm(go + n * out_img + static_cast<size_t>(gi) * g.cout_g() * g.col_cols(), g.cout_g(),
                      g.col_cols());
        const size_t woff = static_cast<size_t>(gi) * g.cout_g() * g.col_rows();
        if (need_w) {
          const T* colp = xd + in_off;
          if (!direct) {
            im2col(xd + in_off, g, cols.data());
            colp = cols.data();
          }
          CMapMat<T> cm(colp, g.col_rows(), g.col_cols());
          MapMat<T> dwm(dw + woff, g.cout_g(), g.col_rows());
          dwm.noalias() += gm * cm.transpose();
        }
        if (need_x) {
          CMapMat<T> wm(wd + woff, g.cout_g(), g.col_rows());
          if (direct) {
            MapMat<T> dxm(dx + in_off, g.col_rows(), g.col_cols());
            dxm.noalias() += wm.transpose() * gm;
          } else {
            MapMat<T> dcm(cols.data(), g.col_rows(), g.col_cols());
            dcm.noalias() = wm.transpose() * gm;
            col2im_add(cols.data(), g, dx + in_off);
          }
        }
      }
  });
}

namespace detail {
template <class T, class Fwd, class Bwd>
Var<T> unary(const Var<T>& x, Fwd f, Bwd dfdx_from_xy) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  for (size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  auto xn = x.node();
  return make_result<T>(std::move(out), {x}, [xn, dfdx_from_xy](Node<T>& self) {
    auto& gx = xn->ensure_grad();
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * dfdx_from_xy(xn->value[i], self.value[i]);
  });
}
}  // namespace detail

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
T sigmoid_scalar(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> exp(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Var<T> scale(const Var<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "add");
  Tensor<T> out = a.value();
  out += b.value();
  auto an = a.node(), bn = b.node();
  return make_result<T>(std::move(out), {a, b}, [an, bn](Node<T>& self) {
    if (wants_grad(an)) an->ensure_grad() += self.grad;
    if (wants_grad(bn)) bn->ensure_grad() += self.grad;
  });
}

/// Elementwise product where `s` broadcasts along any axis on which it has extent 1.
template <class T>
Var<T> mul(const Var<T>& x, const Var<T>& s) {
  const auto& xs = x.shape();
  const auto& ss = s.shape();
  if (xs.size() != ss.size()) throw ShapeError("mul: rank mismatch " + shape_str(xs) + " vs " + shape_str(ss));
  for (size_t i = 0; i < xs.size(); ++i)
    if (ss[i] != xs[i] && ss[i] != 1) throw ShapeError("mul: cannot broadcast " + shape_str(ss) + " to " + shape_str(xs));
  const size_t r = xs.size();
  std::vector<size_t> sstride(r, 0);
  {
    size_t acc = 1;
    for (size_t i = r; i-- > 0;) {
      sstride[i] = ss[i] == 1 ? 0 : acc;
      acc *= static_cast<size_t>(ss[i]);
    }
  }
  std::vector<size_t> map(x.value().size());
  {
    std::vector<int> idx(r, 0);
    for (size_t flat = 0; flat < map.size(); ++flat) {
      size_t o = 0;
      for (size_t i = 0; i < r; ++i) o += idx[i] * sstride[i];
      map[flat] = o;
      for (size_t i = r; i-- > 0;) {
        if (++idx[i] < xs[i]) break;
        idx[i] = 0;
      }
    }
  }
  Tensor<T> out(xs);
  for (size_t i = 0; i < map.size(); ++i) out[i] = x.value()[i] * s.value()[map[i]];
  auto xn = x.node(), sn = s.node();
  return make_result<T>(std::move(out), {x, s}, [xn, sn, map = std::move(map)](Node<T>& self) {
    if (wants_grad(xn)) {
      auto& gx = xn->ensure_grad();
      for (size_t i = 0; i < map.size(); ++i) gx[i] += self.grad[i] * sn->value[map[i]];
    }
    if (wants_grad(sn)) {
      auto& gs = sn->ensure_grad();
      for (size_t i = 0; i < map.size(); ++i) gs[map[i]] += self.grad[i] * xn->value[i];
    }
  });
}

/// Group normalization with per-channel affine parameters.
template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps = T(1e-5)) {
  detail::require_rank4(x.shape(), "group_norm");
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (groups <= 0 || C % groups != 0)
    throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible by " + std::to_string(groups));
  if (gamma.value().size() != static_cast<size_t>(C) || beta.value().size() != static_cast<size_t>(C))
    throw ShapeError("group_norm: affine size mismatch");
  const int cg = C / groups;
  const size_t m = static_cast<size_t>(cg) * HW;
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(static_cast<size_t>(N) * groups);
  Tensor<T> out(x.shape());
  for (int n = 0; n < N; ++n)
    for (int g = 0; g < groups; ++g) {
      const size_t off = (static_cast<size_t>(n) * C + g * cg) * HW;
      const T* xp = x.value().data() + off;
      double mean = 0;
      for (size_t i = 0; i < m; ++i) mean += xp[i];
      mean /= static_cast<double>(m);
      double var = 0;
      for (size_t i = 0; i < m; ++i) var += (xp[i] - mean) * (xp[i] - mean);
      var /= static_cast<double>(m);
      const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      inv_std[n * groups + g] = is;
      for (int c = 0; c < cg; ++c) {
        const int ch = g * cg + c;
        for (int i = 0; i < HW; ++i) {
          const size_t k = off + static_cast<size_t>(c) * HW + i;
          xhat[k] = static_cast<T>((x.value()[k] - mean) * is);
          out[k] = xhat[k] * gamma.value()[ch] + beta.value()[ch];
        }
      }
    }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_result<T>(
      std::move(out), {x, gamma, beta},
      [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), N, C, HW, groups, cg, m](Node<T>& self) {
        const auto& gy = self.grad;
        if (wants_grad(gn) || wants_grad(bn)) {
          std::vector<T> dg(C, T(0)), db(C, T(0));
          for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
              const size_t off = (static_cast<size_t>(n) * C + c) * HW;
              for (int i = 0; i < HW; ++i) {
                dg[c] += gy[off + i] * xhat[off + i];
                db[c] += gy[off + i];
              }
            }
          if (wants_grad(gn))
            for (int c = 0; c < C; ++c) gn->ensure_grad()[c] += dg[c];
          if (wants_grad(bn))
            for (int c = 0; c < C; ++c) bn->ensure_grad()[c] += db[c];
        }
        if (!wants_grad(xn)) return;
        auto& gx = xn->ensure_grad();
        const auto& gam = gn->value;
        for (int n = 0; n < N; ++n)
          for (int g = 0; g < groups; ++g) {
            const size_t off = (static_cast<size_t>(n) * C + g * cg) * HW;
            T sum_d = 0, sum_dx = 0;
            for (int c = 0; c < cg; ++c)
              for (int i = 0; i < HW; ++i) {
                const size_t k = off + static_cast<size_t>(c) * HW + i;
                const T d = gy[k] * gam[g * cg + c];
                sum_d += d;
                sum_dx += d * xhat[k];
              }
            const T is = inv_std[n * groups + g];
            const T inv_m = T(1) / static_cast<T>(m);
            for (int c = 0; c < cg; ++c)
              for (int i = 0; i < HW; ++i) {
                const size_t k = off + static_cast<size_t>(c) * HW + i;
                const T d = gy[k] * gam[g * cg + c];
                gx[k] += is * (d - inv_m * sum_d - xhat[k] * inv_m * sum_dx);
              }
          }
      });
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  detail::require_rank4(x.shape(), "upsample_nearest2x");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> out({N, C, 2 * H, 2 * W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < 2 * H; ++y)
        for (int xw = 0; xw < 2 * W; ++xw) out.at(n, c, y, xw) = x.value().at(n, c, y / 2, xw / 2);
  auto xn = x.node();
  return make_result<T>(std::move(out), {x}, [xn, N, C, H, W](Node<T>& self) {
    auto& gx = xn->ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < 2 * H; ++y)
          for (int xw = 0; xw < 2 * W; ++xw) gx.at(n, c, y / 2, xw / 2) += self.grad.at(n, c, y, xw);
  });
}

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& s0 = xs[0].shape();
  detail::require_rank4(s0, "concat_channels");
  int ctot = 0;
  for (auto& v : xs) {
    const auto& s = v.shape();
    if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw ShapeError("concat_channels: " + shape_str(s) + " incompatible with " + shape_str(s0));
    ctot += s[1];
  }
  const int N = s0[0], HW = s0[2] * s0[3];
  Tensor<T> out({N, ctot, s0[2], s0[3]});
  std::vector<int> coff;
  int c = 0;
  for (auto& v : xs) {
    coff.push_back(c);
    const int cv = v.dim(1);
    for (int n = 0; n < N; ++n)
      std::copy_n(v.value().data() + static_cast<size_t>(n) * cv * HW, static_cast<size_t>(cv) * HW,
                  out.data() + (static_cast<size_t>(n) * ctot + c) * HW);
    c += cv;
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (auto& v : xs) nodes.push_back(v.node());
  return make_result<T>(std::move(out), xs, [nodes, coff, N, ctot, HW](Node<T>& self) {
    for (size_t j = 0; j < nodes.size(); ++j) {
      if (!wants_grad(nodes[j])) continue;
      auto& gx = nodes[j]->ensure_grad();
      const int cv = nodes[j]->value.dim(1);
      for (int n = 0; n < N; ++n) {
        const T* src = self.grad.data() + (static_cast<size_t>(n) * ctot + coff[j]) * HW;
        T* dst = gx.data() + static_cast<size_t>(n) * cv * HW;
        for (size_t i = 0; i < static_cast<size_t>(cv) * HW; ++i) dst[i] += src[i];
      }
    }
  });
}

/// Spatial average pool to [N,C,1,1].
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  detail::require_rank4(x.shape(), "global_avg_pool");
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out({N, C, 1, 1});
  for (int i = 0; i < N * C; ++i) {
    T s = 0;
    for (int k = 0; k < HW; ++k) s += x.value()[static_cast<size_t>(i) * HW + k];
    out[i] = s / static_cast<T>(HW);
  }
  auto xn = x.node();
  return make_result<T>(std::move(out), {x}, [xn, N, C, HW](Node<T>& self) {
    auto& gx = xn->ensure_grad();
    for (int i = 0; i < N * C; ++i)
      for (int k = 0; k < HW; ++k) gx[static_cast<size_t>(i) * HW + k] += self.grad[i] / static_cast<T>(HW);
  });
}

/// Spatial max pool to [N,C,1,1]; the gradient goes to the first maximal element.
template <class T>
Var<T> global_max_pool(const Var<T>& x) {
  detail::require_rank4(x.shape(), "global_max_pool");
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out({N, C, 1, 1});
  std::vector<size_t> arg(static_cast<size_t>(N) * C);
  for (int i = 0; i < N * C; ++i) {
    size_t best = static_cast<size_t>(i) * HW;
    for (int k = 1; k < HW; ++k)
      if (x.value()[static_cast<size_t>(i) * HW + k] > x.value()[best]) best = static_cast<size_t>(i) * HW + k;
    arg[i] = best;
    out[i] = x.value()[best];
  }
  auto xn = x.node();
  return make_result<T>(std::move(out), {x}, [xn, arg = std::move(arg)](Node<T>& self) {
    auto& gx = xn->ensure_grad();
    for (size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += self.grad[i];
  });
}

/// Mean over channels to [N,1,H,W].
template <class T>
Var<T> channel_mean(const Var<T>& x) {
  detail::require_rank4(x.shape(), "channel_mean");
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out({N, 1, x.dim(2), x.dim(3)});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int k = 0; k < HW; ++k) out[static_cast<size_t>(n) * HW + k] += x.value()[(static_cast<size_t>(n) * C + c) * HW + k];
  for (auto& v : out.vec()) v /= static_cast<T>(C);
  auto xn = x.node();
  return make_result<T>(std::move(out), {x}, [xn, N, C, HW](Node<T>& self) {
    auto& gx = xn->ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int k = 0; k < HW; ++k)
          gx[(static_cast<size_t>(n) * C + c) * HW + k] += self.grad[static_cast<size_t>(n) * HW + k] / static_cast<T>(C);
  });
}

/// Max over channels to [N,1,H,W]; ties go to the lowest channel.
template <class T>
Var<T> channel_max(const Var<T>& x) {
  detail::require_rank4(x.shape(), "channel_max");
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out({N, 1, x.dim(2), x.dim(3)});
  std::vector<size_t> arg(static_cast<size_t>(N) * HW);
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < HW; ++k) {
      size_t best = static_cast<size_t>(n) * C * HW + k;
      for (int c = 1; c < C; ++c) {
        const size_t idx = (static_cast<size_t>(n) * C + c) * HW + k;
        if (x.value()[idx] > x.value()[best]) best = idx;
      }
      arg[static_cast<size_t>(n) * HW + k] = best;
      out[static_cast<size_t>(n) * HW + k] = x.value()[best];
    }
  auto xn = x.node();
  return make_result<T>(std::move(out), {x}, [xn, arg = std::move(arg)](Node<T>& self) {
    auto& gx = xn->ensure_grad();
    for (size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += self.grad[i];
  });
}

/// Multiplies every element by a learnable scalar held in a one-element tensor.
template <class T>
Var<T> mul_scalar(const Var<T>& x, const Var<T>& s) {
  if (s.value().size() != 1) throw ShapeError("mul_scalar: scale must hold one element");
  Tensor<T> out(x.shape());
  const T sv = s.value()[0];
  for (size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * sv;
  auto xn = x.node(), sn = s.node();
  return make_result<T>(std::move(out), {x, s}, [xn, sn](Node<T>& self) {
    if (wants_grad(xn)) {
      auto& gx = xn->ensure_grad();
      const T sv = sn->value[0];
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * sv;
    }
    if (wants_grad(sn)) {
      T acc = 0;
      for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xn->value[i];
      sn->ensure_grad()[0] += acc;
    }
  });
}

/// Stacks per-level [N,K,H,W] maps into a location-major [N,L,K] tensor, levels in order.
template <class T>
Var<T> flatten_levels(const std::vector<Var<T>>& levels) {
  if (levels.empty()) throw ShapeError("flatten_levels: no levels");
  const int N = levels[0].dim(0), K = levels[0].dim(1);
  int L = 0;
  for (auto& v : levels) {
    detail::require_rank4(v.shape(), "flatten_levels");
    if (v.dim(0) != N || v.dim(1) != K) throw ShapeError("flatten_levels: inconsistent level " + shape_str(v.shape()));
    L += v.dim(2) * v.dim(3);
  }
  Tensor<T> out({N, L, K});
  std::vector<int> loff;
  int off = 0;
  for (auto& v : levels) {
    loff.push_back(off);
    const int HW = v.dim(2) * v.dim(3);
    for (int n = 0; n < N; ++n)
      for (int k = 0; k < K; ++k)
        for (int i = 0; i < HW; ++i)
          out[(static_cast<size_t>(n) * L + off + i) * K + k] = v.value()[(static_cast<size_t>(n) * K + k) * HW + i];
    off += HW;
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (auto& v : levels) nodes.push_back(v.node());
  return make_result<T>(std::move(out), levels, [nodes, loff, N, L, K](Node<T>& self) {
    for (size_t j = 0; j < nodes.size(); ++j) {
      if (!wants_grad(nodes[j])) continue;
      auto& gx = nodes[j]->ensure_grad();
      const int HW = nodes[j]->value.dim(2) * nodes[j]->value.dim(3);
      for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k)
          for (int i = 0; i < HW; ++i)
            gx[(static_cast<size_t>(n) * K + k) * HW + i] += self.grad[(static_cast<size_t>(n) * L + loff[j] + i) * K + k];
    }
  });
}

/// Σ w_i · s_i over scalar nodes; terms with weight exactly 0 are skipped.
template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  if (terms.size() != weights.size()) throw ShapeError("weighted_sum: term/weight count mismatch");
  T total = 0;
  std::vector<Var<T>> used;
  std::vector<T> uw;
  for (size_t i = 0; i < terms.size(); ++i) {
    if (weights[i] == T(0)) continue;
    if (terms[i].value().size() != 1) throw ShapeError("weighted_sum: terms must be scalar");
    total += weights[i] * terms[i].item();
    used.push_back(terms[i]);
    uw.push_back(weights[i]);
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (auto& v : used) nodes.push_back(v.node());
  return make_result<T>(Tensor<T>({1}, std::vector<T>{total}), used, [nodes, uw](Node<T>& self) {
    for (size_t i = 0; i < nodes.size(); ++i)
      if (wants_grad(nodes[i])) nodes[i]->ensure_grad()[0] += uw[i] * self.grad[0];
  });
}

template <class T>
Var<T> constant_scalar(T v) {
  return Var<T>(Tensor<T>({1}, std::vector<T>{v}));
}

}  // namespace aimd
