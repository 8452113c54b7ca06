#include <gtest/gtest.h>

#include "aimd/amalgamation.hpp"
#include "oracles.hpp"

using namespace aimd;
using V = Var<double>;
using oracle::kl_oracle;
using oracle::labels_only;
using oracle::select_oracle;
using oracle::LD;

TEST(Softmax, ClosedFormsAndExtendedPrecision) {
  const auto u = softmax_temp(std::vector<double>{2, 2, 2, 2}, 3.0);
  for (double p : u) EXPECT_DOUBLE_EQ(p, 0.25);
  const auto q = softmax_temp(std::vector<double>{0, std::log(3.0)}, 1.0);
  EXPECT_NEAR(q[0], 0.25, 1e-15);
  EXPECT_NEAR(q[1], 0.75, 1e-15);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 4);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> z(5);
    for (auto& v : z) v = n(rng);
    const auto p = softmax_temp(z, 5.0);
    const auto o = oracle::softmax(std::vector<LD>(z.begin(), z.end()), 5);
    double s = 0;
    for (int i = 0; i < 5; ++i) {
      EXPECT_LT(oracle::rel_err(p[i], o[i]), 1e-13);
      EXPECT_GT(p[i], 0.0);
      s += p[i];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_THROW(softmax_temp(std::vector<double>{1, 2}, 0.0), DomainError);
  EXPECT_THROW(softmax_temp(std::vector<double>{1, 2}, -1.0), DomainError);
  // large logits stay finite thanks to max subtraction
  const auto big = softmax_temp(std::vector<double>{1000, 999}, 1.0);
  EXPECT_NEAR(big[0], 1 / (1 + std::exp(-1.0)), 1e-14);
}

TEST(KlDiv, ClosedFormsOracleAndClamp) {
  EXPECT_EQ(kl_div(std::vector<double>{0.2, 0.8}, std::vector<double>{0.2, 0.8}), 0.0);
  EXPECT_NEAR(kl_div(std::vector<double>{1, 0}, std::vector<double>{0.5, 0.5}), std::log(2.0), 1e-15);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.01, 1);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> p(4), q(4);
    double sp = 0, sq = 0;
    for (int i = 0; i < 4; ++i) sp += p[i] = u(rng), sq += q[i] = u(rng);
    for (int i = 0; i < 4; ++i) p[i] /= sp, q[i] /= sq;
    const auto o = oracle::kl(std::vector<LD>(p.begin(), p.end()), std::vector<LD>(q.begin(), q.end()));
    EXPECT_LT(oracle::rel_err(kl_div(p, q), o), 1e-12);
    EXPECT_GE(kl_div(p, q), 0.0);
  }
  const auto before = kl_clamp_count().load();
  const double v = kl_div(std::vector<double>{0.5, 0.5}, std::vector<double>{1.0, 0.0});
  EXPECT_EQ(kl_clamp_count().load(), before + 1);
  EXPECT_NEAR(v, 0.5 * std::log(0.5) + 0.5 * std::log(0.5 / 1e-12), 1e-12);
  EXPECT_THROW(kl_div(std::vector<double>{1}, std::vector<double>{0.5, 0.5}), ShapeError);
}

TEST(FeatureLoss, IdentityZeroAndHandCase) {
  std::mt19937_64 rng(3);
  const V f(Tensor<double>::randn({2, 4, 3, 3}, 1.0, rng));
  Conv2d<double> id;
  id.weight = V(Tensor<double>({4, 4, 1, 1}), true);
  for (int c = 0; c < 4; ++c) id.weight.mutable_value()[c * 4 + c] = 1;
  id.bias = V(Tensor<double>({4}), true);
  EXPECT_EQ(feature_loss(f, f.value(), id).item(), 0.0);
  EXPECT_NEAR(feature_loss(f, Tensor<double>({2, 4, 3, 3}), id).item(), [&] {
    LD s = 0;
    for (size_t i = 0; i < f.value().size(); ++i) s += static_cast<LD>(f.value()[i]) * f.value()[i];
    return static_cast<double>(s / f.value().size());
  }(), 1e-14);

  // 2x2 spatial, 1 channel in, 1 channel out: adapted = 2 x + 1
  Conv2d<double> a;
  a.weight = V(Tensor<double>({1, 1, 1, 1}, std::vector<double>{2}), true);
  a.bias = V(Tensor<double>({1}, std::vector<double>{1}), true);
  const V x(Tensor<double>({1, 1, 2, 2}, std::vector<double>{0, 1, -1, 0.5}));
  const Tensor<double> tea({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  const double want = (std::pow(1 - 1, 2) + std::pow(3 - 2, 2) + std::pow(-1 - 3, 2) + std::pow(2 - 4, 2)) / 4;
  EXPECT_DOUBLE_EQ(feature_loss(x, tea, a).item(), want);

  EXPECT_THROW(feature_loss(f, Tensor<double>({2, 4, 3, 4}), id), ShapeError);
  EXPECT_THROW(feature_loss(f, Tensor<double>({2, 5, 3, 3}), id), ShapeError);
}

TEST(FeatureLoss, GradientsReachTargetAndAdaptorOnly) {
  std::mt19937_64 rng(4);
  ParamSet<double> ps;
  const auto ad = make_feature_adaptor(ps, "ad", 6, 8, 4, 5, rng);
  V tb(Tensor<double>::randn({2, 6, 2, 2}, 1.0, rng), true);
  V t0(Tensor<double>::randn({2, 4, 4, 4}, 1.0, rng), true), t1(Tensor<double>::randn({2, 4, 2, 2}, 1.0, rng), true);
  const auto eb = Tensor<double>::randn({2, 8, 2, 2}, 1.0, rng);
  const std::vector<Tensor<double>> ef{Tensor<double>::randn({2, 5, 4, 4}, 1.0, rng),
                                       Tensor<double>::randn({2, 5, 2, 2}, 1.0, rng)};
  auto loss = [&] { return feature_loss_taps<double>(tb, {t0, t1}, eb, ef, ad); };
  std::vector<V> params{tb, t0, t1};
  for (auto& [n, v] : ps.items()) params.push_back(v);
  EXPECT_LT(oracle::gradient_check(params, loss), 1e-6);

  // backbone term plus the mean of the level terms
  const double want = feature_loss(tb, eb, ad.backbone).item() +
                      (feature_loss(t0, ef[0], ad.fpn).item() + feature_loss(t1, ef[1], ad.fpn).item()) / 2;
  EXPECT_NEAR(loss().item(), want, 1e-12);
  EXPECT_THROW(feature_loss_taps<double>(tb, {t0}, eb, ef, ad), ShapeError);
}

TEST(Distillation, OnePositiveTwoClassesHandLogits) {
  const V tar(Tensor<double>({1, 3, 2}, std::vector<double>{0.3, -1.0, 9, 9, 2.0, 0.5}), true);
  const Tensor<double> tea({1, 3, 2}, std::vector<double>{2.5, 0.0, -9, 9, 2.0, 0.5});
  const auto l = distillation_loss(tar, tea, {labels_only({1, 0, 0})}, {0}, 5.0);
  const auto p = softmax_temp(std::vector<double>{2.5, 0.0}, 5.0), q = softmax_temp(std::vector<double>{0.3, -1.0}, 5.0);
  EXPECT_NEAR(l.item(), kl_div(p, q), 1e-15);
  EXPECT_NEAR(l.item(), p[0] * std::log(p[0] / q[0]) + p[1] * std::log(p[1] / q[1]), 1e-15);
}

TEST(Distillation, KlDirectionIsTeacherFirst) {
  // with asymmetric distributions the two directions differ; the loss must equal KL(p_tea || q_tar)
  const V tar(Tensor<double>({1, 1, 3}, std::vector<double>{4, 0, 0}), true);
  const Tensor<double> tea({1, 1, 3}, std::vector<double>{0, 1, 2});
  const auto l = softened_kl_loss(tar, tea, {{0, 0}}, 1.0).item();
  const auto pt = oracle::softmax({0, 1, 2}, 1), qt = oracle::softmax({4, 0, 0}, 1);
  EXPECT_LT(oracle::rel_err(l, oracle::kl(pt, qt)), 1e-13);
  EXPECT_GT(std::fabs(l - static_cast<double>(oracle::kl(qt, pt))), 0.1);
}

TEST(Distillation, EmptyPositivesAndIdentityAreZero) {
  std::mt19937_64 rng(5);
  const auto tea = Tensor<double>::randn({2, 4, 3}, 2.0, rng);
  const V same(tea, true);
  EXPECT_EQ(distillation_loss(same, tea, {labels_only({1, 0, 2, 0}), labels_only({0, 0, 0, 3})}, {0, 1}, 5.0).item(),
            0.0);
  const V other(Tensor<double>::randn({2, 4, 3}, 2.0, rng), true);
  const auto l = distillation_loss(other, tea, {labels_only({0, 0, 0, 0}), labels_only({0, 0, 0, 0})}, {0, 1}, 5.0);
  EXPECT_EQ(l.item(), 0.0);
  backward(l);
  for (size_t i = 0; i < other.grad().size(); ++i) ASSERT_EQ(other.grad()[i], 0.0);
  EXPECT_THROW(distillation_loss(other, Tensor<double>({2, 4, 2}), {labels_only({1, 0, 0, 0}), labels_only({0, 0, 0, 0})},
                                 {0, 1}, 5.0),
               ShapeError);
  EXPECT_THROW(distillation_loss(other, tea, {labels_only({1, 0, 0})}, {0}, 5.0), ShapeError);
  EXPECT_THROW(distillation_loss(other, tea, {labels_only({1, 0, 0, 0})}, {0}, 0.0), DomainError);
}

TEST(Distillation, MatchesOracleAndFiniteDifferences) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> lab(-1, 3);
  for (int t = 0; t < 30; ++t) {
    V tar(Tensor<double>::randn({3, 6, 3}, 2.0, rng), true);
    const auto tea = Tensor<double>::randn({3, 6, 3}, 2.0, rng);
    std::vector<AnchorTargets> targets;
    std::vector<LocationRef> pos;
    const std::vector<size_t> images{2, 0};
    for (size_t i = 0; i < images.size(); ++i) {
      std::vector<int> l(6);
      for (int j = 0; j < 6; ++j) {
        l[j] = std::max(0, lab(rng));
        if (l[j] > 0) pos.push_back({images[i], static_cast<size_t>(j)});
      }
      targets.push_back(labels_only(l));
    }
    const double T = 0.5 + t % 6;
    auto loss = [&] { return distillation_loss(tar, tea, targets, images, T); };
    EXPECT_LT(oracle::rel_err(loss().item(), kl_oracle(tar.value(), tea, pos, T)), 1e-12);
    EXPECT_GE(loss().item(), 0.0);
    EXPECT_LT(oracle::gradient_check({tar}, loss), 1e-6);
  }
}

TEST(PseudoLoss, ThresholdEndpoints) {
  std::mt19937_64 rng(7);
  // small logits keep every q above the clamp floor at T = 0.1
  V tar(Tensor<double>::randn({3, 5, 4}, 0.2, rng), true);
  const auto tea = Tensor<double>::randn({3, 5, 4}, 0.2, rng);
  const auto none = pseudo_loss(tar, tea, {1, 2}, 1.0, 0.1);
  EXPECT_EQ(none.value.item(), 0.0);
  EXPECT_EQ(none.selected, 0u);
  EXPECT_EQ(none.candidates, 10u);
  const auto all = pseudo_loss(tar, tea, {1, 2}, 0.0, 0.1);
  EXPECT_EQ(all.selected, 10u);
  std::vector<LocationRef> every;
  for (size_t n : {1, 2})
    for (size_t l = 0; l < 5; ++l) every.push_back({n, l});
  EXPECT_LT(oracle::rel_err(all.value.item(), kl_oracle(tar.value(), tea, every, 0.1)), 1e-10);
  EXPECT_THROW(pseudo_loss(tar, tea, {0}, 1.5, 0.1), DomainError);
  EXPECT_THROW(pseudo_loss(tar, tea, {0}, -0.1, 0.1), DomainError);
  EXPECT_THROW(pseudo_loss(tar, tea, {0}, 0.4, 0.0), DomainError);
  EXPECT_THROW(pseudo_loss(tar, Tensor<double>({3, 5, 3}), {0}, 0.4, 0.1), ShapeError);
}

TEST(PseudoLoss, ThreeLocationEnumeration) {
  // two classes, teacher max-probabilities 0.3 / 0.5 / 0.9 are impossible for the first with K=2, so use K=4:
  // logits chosen so the max softmax entries are exactly 0.3, 0.5, 0.9
  auto logits_for = [](double pmax) {
    const double rest = (1 - pmax) / 3;
    return std::vector<double>{std::log(pmax), std::log(rest), std::log(rest), std::log(rest)};
  };
  std::vector<double> tv;
  for (double p : {0.3, 0.5, 0.9})
    for (double z : logits_for(p)) tv.push_back(z);
  const Tensor<double> tea({1, 3, 4}, tv);
  const V tar(Tensor<double>({1, 3, 4}, std::vector<double>{1, 0, 0, 0, 0, 1, 0, 0, 0.5, 0.5, 0, -1}), true);
  const auto r = pseudo_loss(tar, tea, {0}, 0.4, 0.1);
  EXPECT_EQ(r.selected, 2u);
  EXPECT_EQ(r.candidates, 3u);
  const LD want = kl_oracle(tar.value(), tea, {{0, 1}, {0, 2}}, 0.1);
  EXPECT_LT(oracle::rel_err(r.value.item(), want), 1e-12);
  // the filter is strict: a max probability equal to the threshold is excluded
  EXPECT_EQ(pseudo_loss(tar, tea, {0}, 0.5 + 1e-12, 0.1).selected, 1u);
}

TEST(PseudoLoss, FilterUsesTeacherUnitTemperature) {
  // two-class teacher logits (0, 0.5): p_max = sigmoid(0.5) ~ 0.622 at T=1 but ~0.5 at large T
  const Tensor<double> tea({1, 1, 2}, std::vector<double>{0, 0.5});
  const V tar(Tensor<double>({1, 1, 2}), true);
  EXPECT_EQ(pseudo_loss(tar, tea, {0}, 0.6, 100.0).selected, 1u);
  EXPECT_EQ(pseudo_loss(tar, tea, {0}, 0.63, 0.01).selected, 0u);
}

TEST(PseudoLoss, FilterIsMonotoneInTheta) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 20; ++t) {
    const auto tea = Tensor<double>::randn({2, 30, 3}, 1.0 + t * 0.3, rng);
    size_t prev = std::numeric_limits<size_t>::max();
    for (int i = 0; i <= 20; ++i) {
      const double theta = i / 20.0;
      const auto s = pseudo_label_locations(tea, {0, 1}, theta);
      EXPECT_LE(s.size(), prev);
      const auto o = select_oracle(tea, {0, 1}, theta);
      ASSERT_EQ(s.size(), o.size());
      for (size_t j = 0; j < s.size(); ++j) EXPECT_EQ(s[j].location, o[j].location);
      prev = s.size();
    }
  }
}

TEST(PseudoLoss, MatchesOracleAndFiniteDifferences) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 30; ++t) {
    V tar(Tensor<double>::randn({3, 8, 3}, 1.5, rng), true);
    const auto tea = Tensor<double>::randn({3, 8, 3}, 1.5, rng);
    const double theta = 0.35 + 0.02 * t, That = 0.5 + 0.1 * t;
    const std::vector<size_t> images{0, 2};
    auto loss = [&] { return pseudo_loss(tar, tea, images, theta, That).value; };
    EXPECT_LT(oracle::rel_err(loss().item(), kl_oracle(tar.value(), tea, select_oracle(tea, images, theta), That)),
              1e-11);
    EXPECT_GE(loss().item(), 0.0);
    EXPECT_LT(oracle::gradient_check({tar}, loss), 1e-5);
  }
}

TEST(PseudoLoss, ZeroWhenTargetReproducesTeacher) {
  std::mt19937_64 rng(10);
  const auto tea = Tensor<double>::randn({2, 6, 3}, 3.0, rng);
  const V tar(tea, true);
  EXPECT_EQ(pseudo_loss(tar, tea, {0, 1}, 0.0, 0.1).value.item(), 0.0);
}

TEST(TotalLoss, WeightedSumLinearityAndErrors) {
  auto s = [](double v) { return V(Tensor<double>({1}, std::vector<double>{v}), true); };
  std::vector<BranchTerms<double>> br{{s(1.0), s(2.0), s(3.0), s(4.0)}, {s(0.5), s(0.25), s(0.125), V()}};
  EXPECT_DOUBLE_EQ(total_loss(br, LossWeights{}).item(), 1 + 2 + 3 + 4 + 0.5 + 0.25 + 0.125);
  EXPECT_EQ(total_loss(br, LossWeights{0, 0, 0, 0}).item(), 0.0);
  const LossWeights w{0.7, 1.3, 0.4, 2.0};
  LossWeights w2 = w;
  w2.dis *= 2;
  const double delta = total_loss(br, w2).item() - total_loss(br, w).item();
  EXPECT_NEAR(delta, 0.4 * (3.0 + 0.125), 1e-14);

  auto t = total_loss(br, w);
  backward(t);
  EXPECT_DOUBLE_EQ(br[0].dis.grad()[0], 0.4);
  EXPECT_DOUBLE_EQ(br[1].fea.grad()[0], 1.3);

  EXPECT_THROW(total_loss(br, LossWeights{1, -1, 1, 1}), ConfigError);
  br[1].fea = s(std::numeric_limits<double>::infinity());
  try {
    total_loss(br, LossWeights{});
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("L_fea in branch 1"), std::string::npos);
  }
}

TEST(DistillConfig, Validation) {
  DistillConfig c;
  EXPECT_EQ(c.temperature, 5.0);
  EXPECT_EQ(c.pseudo_temperature, 0.1);
  EXPECT_EQ(c.threshold, 0.4);
  EXPECT_NO_THROW(c.validate());
  c.threshold = 1.01;
  EXPECT_THROW(c.validate(), DomainError);
  c = DistillConfig{};
  c.temperature = 0;
  EXPECT_THROW(c.validate(), DomainError);
  LossWeights w;
  EXPECT_EQ(w.det + w.fea + w.dis + w.pse, 4.0);
  w.pse = std::nan("");
  EXPECT_THROW(w.validate(), ConfigError);
}
