#include <gtest/gtest.h>

#include "aimd/autograd.hpp"
#include "support.hpp"

using namespace aimd;
using V = Var<double>;

namespace {

V rand_var(Shape s, std::mt19937_64& rng, double sd = 1.0) { return V(Tensor<double>::randn(std::move(s), sd, rng), true); }

V sum_weighted(const V& x, const Tensor<double>& w) {
  // <x, w> as a scalar node; keeps the checks sensitive to every output element.
  auto xn = x.node();
  double s = 0;
  for (size_t i = 0; i < w.size(); ++i) s += x.value()[i] * w[i];
  return make_result<double>(Tensor<double>({1}, std::vector<double>{s}), {x}, [xn, w](Node<double>& self) {
    auto& g = xn->ensure_grad();
    for (size_t i = 0; i < w.size(); ++i) g[i] += self.grad[0] * w[i];
  });
}

double check_unary(const std::function<V(const V&)>& op, Shape s, uint64_t seed) {
  std::mt19937_64 rng(seed);
  V x = rand_var(s, rng);
  const auto probe = Tensor<double>::randn(op(x).shape(), 1.0, rng);
  return oracle::gradient_check({x}, [&] { return sum_weighted(op(x), probe); });
}

double naive_conv_at(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b, int n, int co, int oy,
                     int ox, int stride, int pad, int groups) {
  const int Cin = x.dim(1), Cout = w.dim(0), k = w.dim(2);
  const int cin_g = Cin / groups, cout_g = Cout / groups, g = co / cout_g;
  double s = b ? (*b)[co] : 0.0;
  for (int ci = 0; ci < cin_g; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
        if (iy < 0 || ix < 0 || iy >= x.dim(2) || ix >= x.dim(3)) continue;
        s += x.at(n, g * cin_g + ci, iy, ix) * w.at(co, ci, ky, kx);
      }
  return s;
}

}  // namespace

TEST(Conv2d, MatchesDirectSummation) {
  std::mt19937_64 rng(1);
  for (auto [stride, pad, groups, k] : std::vector<std::array<int, 4>>{{1, 1, 1, 3}, {2, 1, 2, 3}, {1, 0, 1, 1},
                                                                      {1, 3, 1, 7}, {2, 0, 4, 1}}) {
    V x = rand_var({2, 4, 7, 6}, rng);
    V w = rand_var({8, 4 / groups, k, k}, rng);
    V b = rand_var({8}, rng);
    const auto y = conv2d(x, w, b, stride, pad, groups).value();
    for (int n = 0; n < y.dim(0); ++n)
      for (int c = 0; c < y.dim(1); ++c)
        for (int i = 0; i < y.dim(2); ++i)
          for (int j = 0; j < y.dim(3); ++j)
            ASSERT_NEAR(y.at(n, c, i, j), naive_conv_at(x.value(), w.value(), &b.value(), n, c, i, j, stride, pad, groups),
                        1e-12);
  }
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(2);
  for (auto [stride, pad, groups, k] : std::vector<std::array<int, 4>>{{1, 1, 1, 3}, {2, 1, 2, 3}, {1, 0, 1, 1}}) {
    V x = rand_var({2, 4, 5, 5}, rng);
    V w = rand_var({4, 4 / groups, k, k}, rng);
    V b = rand_var({4}, rng);
    const auto probe = Tensor<double>::randn(conv2d(x, w, b, stride, pad, groups).shape(), 1.0, rng);
    EXPECT_LT(oracle::gradient_check({x, w, b}, [&] { return sum_weighted(conv2d(x, w, b, stride, pad, groups), probe); }),
              1e-7);
  }
}

TEST(Conv2d, RejectsChannelMismatch) {
  std::mt19937_64 rng(3);
  V x = rand_var({1, 3, 4, 4}, rng), w = rand_var({2, 4, 3, 3}, rng);
  EXPECT_THROW(conv2d(x, w, V(), 1, 1, 1), ShapeError);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  EXPECT_LT(check_unary([](const V& x) { return relu(x); }, {2, 3, 4, 4}, 10), 1e-7);
  EXPECT_LT(check_unary([](const V& x) { return sigmoid(x); }, {2, 3, 4, 4}, 11), 1e-7);
  EXPECT_LT(check_unary([](const V& x) { return aimd::exp(x); }, {2, 3, 4, 4}, 12), 1e-7);
  EXPECT_LT(check_unary([](const V& x) { return scale(x, 2.5); }, {2, 3, 4, 4}, 13), 1e-7);
  EXPECT_LT(check_unary([](const V& x) { return upsample_nearest2x(x); }, {2, 3, 3, 2}, 14), 1e-7);
  EXPECT_LT(check_unary([](const V& x) { return global_avg_pool(x); }, {2, 3, 4, 4}, 15), 1e-7);
  EXPECT_LT(check_unary([](const V& x) { return global_max_pool(x); }, {2, 3, 4, 4}, 16), 1e-7);
  EXPECT_LT(check_unary([](const V& x) { return channel_mean(x); }, {2, 3, 4, 4}, 17), 1e-7);
  EXPECT_LT(check_unary([](const V& x) { return channel_max(x); }, {2, 3, 4, 4}, 18), 1e-7);
}

TEST(Binary, BroadcastMultiplyAndAdd) {
  std::mt19937_64 rng(20);
  V x = rand_var({2, 3, 4, 5}, rng);
  for (Shape s : std::vector<Shape>{{2, 3, 1, 1}, {2, 1, 4, 5}, {1, 3, 4, 5}, {2, 3, 4, 5}}) {
    V g = rand_var(s, rng);
    const auto probe = Tensor<double>::randn(x.shape(), 1.0, rng);
    EXPECT_LT(oracle::gradient_check({x, g}, [&] { return sum_weighted(mul(x, g), probe); }), 1e-7);
  }
  V y = rand_var({2, 3, 4, 5}, rng);
  const auto probe = Tensor<double>::randn(x.shape(), 1.0, rng);
  EXPECT_LT(oracle::gradient_check({x, y}, [&] { return sum_weighted(add(x, y), probe); }), 1e-7);
  EXPECT_THROW(add(x, rand_var({2, 3, 4, 4}, rng)), ShapeError);
}

TEST(GroupNorm, NormalizesEachGroupAndMatchesFiniteDifferences) {
  std::mt19937_64 rng(30);
  V x = rand_var({2, 8, 3, 3}, rng, 2.0);
  V gamma(Tensor<double>({8}, 1.0), true), beta(Tensor<double>({8}, 0.0), true);
  const auto y = group_norm(x, gamma, beta, 4).value();
  for (int n = 0; n < 2; ++n)
    for (int g = 0; g < 4; ++g) {
      double m = 0, v = 0;
      for (int c = 2 * g; c < 2 * g + 2; ++c)
        for (int i = 0; i < 9; ++i) m += y[(n * 8 + c) * 9 + i] / 18;
      for (int c = 2 * g; c < 2 * g + 2; ++c)
        for (int i = 0; i < 9; ++i) v += std::pow(y[(n * 8 + c) * 9 + i] - m, 2) / 18;
      EXPECT_NEAR(m, 0.0, 1e-12);
      EXPECT_NEAR(v, 1.0, 1e-3);
    }
  gamma = rand_var({8}, rng);
  beta = rand_var({8}, rng);
  const auto probe = Tensor<double>::randn(x.shape(), 1.0, rng);
  EXPECT_LT(oracle::gradient_check({x, gamma, beta}, [&] { return sum_weighted(group_norm(x, gamma, beta, 4), probe); }),
            1e-6);
}

TEST(Structural, ConcatFlattenAndScalarMultiply) {
  std::mt19937_64 rng(40);
  V a = rand_var({2, 3, 2, 2}, rng), b = rand_var({2, 5, 2, 2}, rng);
  const auto c = concat_channels<double>({a, b});
  EXPECT_EQ(c.shape(), (Shape{2, 8, 2, 2}));
  EXPECT_EQ(c.value().at(1, 4, 1, 0), b.value().at(1, 1, 1, 0));
  auto probe = Tensor<double>::randn(c.shape(), 1.0, rng);
  EXPECT_LT(oracle::gradient_check({a, b}, [&] { return sum_weighted(concat_channels<double>({a, b}), probe); }), 1e-7);

  V l0 = rand_var({2, 3, 4, 4}, rng), l1 = rand_var({2, 3, 2, 2}, rng);
  const auto f = flatten_levels<double>({l0, l1});
  EXPECT_EQ(f.shape(), (Shape{2, 20, 3}));
  EXPECT_EQ(f.value()[(1 * 20 + 16 + 3) * 3 + 2], l1.value().at(1, 2, 1, 1));
  probe = Tensor<double>::randn(f.shape(), 1.0, rng);
  EXPECT_LT(oracle::gradient_check({l0, l1}, [&] { return sum_weighted(flatten_levels<double>({l0, l1}), probe); }),
            1e-7);

  V s = rand_var({1}, rng);
  probe = Tensor<double>::randn(a.shape(), 1.0, rng);
  EXPECT_LT(oracle::gradient_check({a, s}, [&] { return sum_weighted(mul_scalar(a, s), probe); }), 1e-7);
}

TEST(WeightedSum, SkipsZeroWeightsAndPropagatesTheRest) {
  V a(Tensor<double>({1}, 2.0), true), b(Tensor<double>({1}, 3.0), true), c(Tensor<double>({1}, 1e300), true);
  auto s = weighted_sum<double>({a, b, c}, {0.5, 2.0, 0.0});
  EXPECT_EQ(s.item(), 7.0);
  backward(s);
  EXPECT_EQ(a.grad()[0], 0.5);
  EXPECT_EQ(b.grad()[0], 2.0);
  EXPECT_FALSE(c.has_grad() && c.grad()[0] != 0.0);
}

TEST(Backward, RequiresScalarRootAndSkipsConstants) {
  std::mt19937_64 rng(50);
  V x = rand_var({2, 2, 2, 2}, rng);
  EXPECT_THROW(backward(relu(x)), ShapeError);
  V c(Tensor<double>({1}, 1.0), false);
  auto y = scale(c, 3.0);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, SharedSubgraphAccumulates) {
  V x(Tensor<double>({1}, 1.5), true);
  auto y = add(mul(x, x), x);  // x^2 + x
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 1.5 + 1);
}
