#include "nucleisam/autograd.hpp"

#include "test_support.hpp"

using namespace nucleisam;
using nucleisam::testing::gradient_rel_error;
using nucleisam::testing::random_tensor;

namespace {

constexpr double kTol = 1e-6;

class OpGradients : public ::testing::Test {
 protected:
  std::mt19937_64 rng{7};
  Var<double> leaf(Shape s, double lo = -1, double hi = 1) { return Var<double>::leaf(random_tensor(std::move(s), rng, lo, hi), true); }
  Tensor<double> probe(const Shape& s) { return random_tensor(s, rng); }
};

TEST_F(OpGradients, Linear) {
  auto x = leaf({5, 4}), w = leaf({3, 4}), b = leaf({3});
  auto p = probe({5, 3});
  auto f = [&] { return ops::weighted_sum(ops::linear(x, w, &b), p); };
  EXPECT_LT(gradient_rel_error(f, x), kTol);
  EXPECT_LT(gradient_rel_error(f, w), kTol);
  EXPECT_LT(gradient_rel_error(f, b), kTol);
}

TEST_F(OpGradients, AddIntoColumnsAndScale) {
  auto base = leaf({3, 6}), d = leaf({3, 2});
  auto p = probe({3, 6});
  auto f = [&] { return ops::weighted_sum(ops::add_into_columns(base, ops::scale(d, 0.5), 4), p); };
  EXPECT_LT(gradient_rel_error(f, base), kTol);
  EXPECT_LT(gradient_rel_error(f, d), kTol);
}

TEST_F(OpGradients, LayerNorm) {
  auto x = leaf({4, 6}), g = leaf({6}), b = leaf({6});
  auto p = probe({4, 6});
  auto f = [&] { return ops::weighted_sum(ops::layer_norm(x, g, b, 1e-6), p); };
  EXPECT_LT(gradient_rel_error(f, x), kTol);
  EXPECT_LT(gradient_rel_error(f, g), kTol);
  EXPECT_LT(gradient_rel_error(f, b), kTol);
}

TEST_F(OpGradients, GeluReluSigmoid) {
  auto x = leaf({10}, -2, 2);
  auto p = probe({10});
  EXPECT_LT(gradient_rel_error([&] { return ops::weighted_sum(ops::gelu(x), p); }, x), kTol);
  EXPECT_LT(gradient_rel_error([&] { return ops::weighted_sum(ops::sigmoid(x), p); }, x), kTol);
  EXPECT_LT(gradient_rel_error([&] { return ops::weighted_sum(ops::relu(x), p); }, x), kTol);
}

TEST_F(OpGradients, Attention) {
  const std::size_t B = 2, L = 5, heads = 2, C = 4;
  auto qkv = leaf({B * L, 3 * C}, -1.5, 1.5);
  auto p = probe({B * L, C});
  auto f = [&] { return ops::weighted_sum(ops::multi_head_attention(qkv, B, L, heads), p); };
  EXPECT_LT(gradient_rel_error(f, qkv), kTol);
}

TEST_F(OpGradients, AttentionRowsAreConvexCombinationsOfValues) {
  const std::size_t L = 3, C = 2;
  Tensor<double> t({L, 3 * C});
  for (std::size_t i = 0; i < L; ++i) {
    t[i * 3 * C + 2 * C] = static_cast<double>(i);  // v channel 0 = token index
    t[i * 3 * C + 2 * C + 1] = 1.0;
  }
  auto out = ops::multi_head_attention(Var<double>::constant(t), 1, L, 1).value();
  // q = k = 0 gives uniform weights
  for (std::size_t i = 0; i < L; ++i) {
    EXPECT_NEAR(out[i * C], 1.0, 1e-12);
    EXPECT_NEAR(out[i * C + 1], 1.0, 1e-12);
  }
}

TEST_F(OpGradients, PositionalAndGrid) {
  auto x = leaf({2 * 6, 3}), pos = leaf({1, 2, 3, 3});
  auto p = probe({2, 3, 2, 3});
  auto f = [&] { return ops::weighted_sum(ops::tokens_to_grid(ops::add_positional(x, pos, 2), 2, 2, 3), p); };
  EXPECT_LT(gradient_rel_error(f, x), kTol);
  EXPECT_LT(gradient_rel_error(f, pos), kTol);
}

TEST_F(OpGradients, Conv3x3And1x1) {
  auto x = leaf({2, 3, 5, 4}), w3 = leaf({2, 3, 3, 3}), w1 = leaf({2, 3, 1, 1}), b = leaf({2});
  auto p = probe({2, 2, 5, 4});
  auto f3 = [&] { return ops::weighted_sum(ops::conv2d(x, w3, &b, 1), p); };
  auto f1 = [&] { return ops::weighted_sum(ops::conv2d(x, w1, &b, 0), p); };
  EXPECT_LT(gradient_rel_error(f3, x), kTol);
  EXPECT_LT(gradient_rel_error(f3, w3), kTol);
  EXPECT_LT(gradient_rel_error(f3, b), kTol);
  EXPECT_LT(gradient_rel_error(f1, x), kTol);
  EXPECT_LT(gradient_rel_error(f1, w1), kTol);
}

TEST_F(OpGradients, ConvMatchesDirectSum) {
  auto x = random_tensor({1, 2, 4, 4}, rng), w = random_tensor({3, 2, 3, 3}, rng);
  auto y = ops::conv2d<double>(Var<double>::constant(x), Var<double>::constant(w), nullptr, 1).value();
  for (std::size_t o = 0; o < 3; ++o)
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) {
        double s = 0;
        for (std::size_t i = 0; i < 2; ++i)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int yy = r + ky - 1, xx = c + kx - 1;
              if (yy < 0 || yy >= 4 || xx < 0 || xx >= 4) continue;
              s += w.at4(o, i, ky, kx) * x.at4(0, i, yy, xx);
            }
        EXPECT_NEAR(y.at4(0, o, r, c), s, 1e-12);
      }
}

TEST_F(OpGradients, BatchNormTrainAndEval) {
  auto x = leaf({3, 2, 3, 3}), g = leaf({2}, 0.5, 1.5), b = leaf({2});
  auto p = probe({3, 2, 3, 3});
  ops::BatchNormBuffers<double> buf{Tensor<double>({2}), Tensor<double>({2}, 1.0)};
  auto ftrain = [&] { return ops::weighted_sum(ops::batch_norm(x, g, b, buf, true, 0.1, 1e-5), p); };
  auto feval = [&] { return ops::weighted_sum(ops::batch_norm(x, g, b, buf, false, 0.1, 1e-5), p); };
  EXPECT_LT(gradient_rel_error(ftrain, x), kTol);
  EXPECT_LT(gradient_rel_error(ftrain, g), kTol);
  EXPECT_LT(gradient_rel_error(ftrain, b), kTol);
  EXPECT_LT(gradient_rel_error(feval, x), kTol);
}

TEST_F(OpGradients, BatchNormRunningStatistics) {
  Tensor<double> t({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 4});
  ops::BatchNormBuffers<double> buf{Tensor<double>({1}), Tensor<double>({1}, 1.0)};
  ops::batch_norm(Var<double>::constant(t), Var<double>::constant(Tensor<double>({1}, 1.0)),
                  Var<double>::constant(Tensor<double>({1})), buf, true, 0.1, 1e-5);
  EXPECT_NEAR(buf.running_mean[0], 0.1 * 2.5, 1e-12);
  EXPECT_NEAR(buf.running_var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-12);  // unbiased variance 5/3
}

TEST_F(OpGradients, ConcatAndUpsample) {
  auto a = leaf({2, 1, 3, 3}), b = leaf({2, 2, 3, 3});
  auto p = probe({2, 3, 7, 5});
  auto f = [&] { return ops::weighted_sum(ops::upsample_bilinear(ops::concat_channels<double>({a, b}), 7, 5), p); };
  EXPECT_LT(gradient_rel_error(f, a), kTol);
  EXPECT_LT(gradient_rel_error(f, b), kTol);
}

TEST_F(OpGradients, UpsampleKnownValues) {
  // 2 -> 4 with half-pixel centres: outputs at src -0.25 (clamped), 0.25, 0.75, 1.25 (clamped index)
  Tensor<double> t({1, 1, 1, 2}, std::vector<double>{0.0, 1.0});
  auto y = ops::upsample_bilinear(Var<double>::constant(t), 1, 4).value();
  EXPECT_DOUBLE_EQ(y[0], 0.0);
  EXPECT_DOUBLE_EQ(y[1], 0.25);
  EXPECT_DOUBLE_EQ(y[2], 0.75);
  EXPECT_DOUBLE_EQ(y[3], 1.0);
}

TEST(Autograd, FrozenLeavesReceiveNoGradient) {
  auto w = Var<double>::leaf(Tensor<double>({2, 2}, 1.0), false);
  auto x = Var<double>::leaf(Tensor<double>({1, 2}, 1.0), true);
  auto y = ops::weighted_sum(ops::linear(x, w), Tensor<double>({1, 2}, 1.0));
  backward(y);
  EXPECT_FALSE(w.has_grad());
  ASSERT_TRUE(x.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  auto x = Var<double>::leaf(Tensor<double>({1}, std::vector<double>{3.0}), true);
  auto y = ops::add(x, x);
  auto z = ops::weighted_sum(ops::add(y, x), Tensor<double>({1}, 1.0));
  backward(z);
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
}

TEST(Autograd, ShapeErrors) {
  auto a = Var<double>::constant(Tensor<double>({2, 3}));
  auto b = Var<double>::constant(Tensor<double>({3, 2}));
  EXPECT_THROW(ops::add(a, b), ShapeError);
  EXPECT_THROW(ops::linear(a, b), ShapeError);
  EXPECT_THROW(backward(a), ShapeError);
}

}  // namespace
