#include "nucleisam/objective.hpp"

#include "oracles.hpp"
#include "test_support.hpp"

using namespace nucleisam;
using nucleisam::testing::gradient_rel_error;
using namespace nucleisam::oracles;

namespace {

TEST(FocalTversky, MatchesArbitraryPrecisionOracle) {
  std::mt19937_64 rng(2024);
  LossSpec spec;
  double worst = 0;
  for (int c = 0; c < 200; ++c) {
    auto t = random_mask({1, 1, 8, 8}, rng, std::uniform_real_distribution<double>(0.02, 0.6)(rng));
    auto p = nucleisam::testing::random_tensor({1, 1, 8, 8}, rng, 1e-4, 1 - 1e-4);
    const double got = focal_tversky(Var<double>::constant(p), t, spec).value()[0];
    worst = std::max(worst, std::abs(got - oracle_loss(p, t, spec)));
  }
  EXPECT_LE(worst, 1e-6);
  EXPECT_LE(worst, 1e-12);  // in double we actually land far tighter
}

TEST(FocalTversky, SinglePixelExample) {
  LossSpec spec;
  Tensor<double> p({1, 1, 1, 1}, 0.8), t({1, 1, 1, 1}, 1.0);
  const auto terms = tversky_terms(p, t, 0, spec);
  EXPECT_DOUBLE_EQ(terms.tp, 0.8);
  EXPECT_DOUBLE_EQ(terms.fp, 0.0);
  EXPECT_NEAR(terms.fn, 0.2, 1e-15);
  EXPECT_NEAR(terms.index, 0.8 / 0.88, 1e-6);
  const double oracle = oracle_loss(p, t, spec);
  EXPECT_NEAR(oracle, 2.49e-3, 5e-6);
  EXPECT_NEAR(focal_tversky_value(p, t, spec), oracle, 1e-15);
}

TEST(FocalTversky, PerfectPredictionIsExactlyZero) {
  std::mt19937_64 rng(1);
  for (int c = 0; c < 20; ++c) {
    auto t = random_mask({2, 1, 4, 4}, rng, 0.4);
    t[0] = 1.0;
    t[16] = 1.0;
    EXPECT_EQ(focal_tversky_value(t, t, LossSpec{}), 0.0);
    Tensor<float> tf = t.cast<float>();
    EXPECT_EQ(focal_tversky(Var<float>::constant(tf), tf, LossSpec{}).value()[0], 0.0f);
  }
}

TEST(FocalTversky, TotalMissApproachesOne) {
  Tensor<double> p({1, 1, 4, 4}, 0.0), t({1, 1, 4, 4}, 1.0);
  EXPECT_NEAR(focal_tversky_value(p, t, LossSpec{}), 1.0, 1e-5);
}

TEST(FocalTversky, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (auto exponent : {TverskyExponent::power, TverskyExponent::inverse}) {
    LossSpec spec;
    spec.exponent = exponent;
    for (int c = 0; c < 10; ++c) {
      auto t = random_mask({2, 1, 6, 6}, rng, 0.3);
      auto p = Var<double>::leaf(nucleisam::testing::random_tensor({2, 1, 6, 6}, rng, 0.05, 0.95), true);
      auto f = [&] { return focal_tversky(p, t, spec); };
      EXPECT_LT(gradient_rel_error(f, p), 1e-4);
    }
  }
}

TEST(FocalTversky, SaturatedPixelsPassNoGradient) {
  Tensor<double> t({1, 1, 1, 3}, std::vector<double>{1, 0, 1});
  auto p = Var<double>::leaf(Tensor<double>({1, 1, 1, 3}, std::vector<double>{1.0, 0.0, 0.5}), true);
  backward(focal_tversky(p, t, LossSpec{}));
  EXPECT_EQ(p.grad()[0], 0.0);
  EXPECT_EQ(p.grad()[1], 0.0);
  EXPECT_LT(p.grad()[2], 0.0);
}

TEST(FocalTversky, Monotonicity) {
  std::mt19937_64 rng(6);
  LossSpec spec;
  for (int c = 0; c < 50; ++c) {
    auto t = random_mask({1, 1, 8, 8}, rng, 0.3);
    auto p = nucleisam::testing::random_tensor({1, 1, 8, 8}, rng, 0.01, 0.99);
    const double base = focal_tversky_value(p, t, spec);
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, 63)(rng);
    auto q = p;
    q[i] *= 0.5;
    const double moved = focal_tversky_value(q, t, spec);
    if (t[i] == 1.0) {
      EXPECT_GE(moved, base);
    } else {
      EXPECT_LE(moved, base);
    }
  }
}

TEST(FocalTversky, FocusingSharpensWithGamma) {
  const double u = 0.5, v = 0.9;
  auto ratio = [&](double g) { return std::pow(1 - u, g) / std::pow(1 - v, g); };
  EXPECT_GT(ratio(2.5), ratio(1.0));
  // through the loss itself: two single-image batches with those indices
  LossSpec s1, s25;
  s1.gamma = 1.0;
  s1.epsilon = 1e-12;
  s25.epsilon = 1e-12;
  // p = 1 on a foreground pixel plus background mass giving TI = 1/(1 + 0.6 FP)
  auto make = [](double fp) { return Tensor<double>({1, 1, 1, 2}, std::vector<double>{1.0, fp}); };
  Tensor<double> t({1, 1, 1, 2}, std::vector<double>{1, 0});
  const double fp_u = (1 / u - 1) / 0.6, fp_v = (1 / v - 1) / 0.6;
  ASSERT_LE(fp_u, 1.7);
  auto loss_ratio = [&](const LossSpec& s) {
    return focal_tversky_value(make(std::min(fp_u, 1.0)), t, s) / focal_tversky_value(make(fp_v), t, s);
  };
  EXPECT_GT(loss_ratio(s25), loss_ratio(s1));
}

TEST(FocalTversky, BatchIsMeanOfImages) {
  std::mt19937_64 rng(7);
  auto t = random_mask({3, 1, 5, 5}, rng, 0.4);
  auto p = nucleisam::testing::random_tensor({3, 1, 5, 5}, rng, 0.01, 0.99);
  double sum = 0;
  for (std::size_t b = 0; b < 3; ++b) sum += tversky_terms(p, t, b, LossSpec{}).loss;
  EXPECT_NEAR(focal_tversky_value(p, t, LossSpec{}), sum / 3, 1e-15);
}

TEST(FocalTversky, InputValidation) {
  Tensor<double> p({1, 1, 2, 2}, 0.5);
  EXPECT_THROW(focal_tversky_value(p, Tensor<double>({1, 1, 2, 3}), LossSpec{}), ShapeError);
  EXPECT_THROW(focal_tversky_value(Tensor<double>({1, 2, 2, 2}), Tensor<double>({1, 2, 2, 2}), LossSpec{}), ShapeError);
  EXPECT_THROW(focal_tversky_value(p, Tensor<double>({1, 1, 2, 2}, 0.5), LossSpec{}), std::invalid_argument);
}

}  // namespace
