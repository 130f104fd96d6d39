#include "nucleisam/lora.hpp"
#include "nucleisam/model.hpp"

#include "test_support.hpp"

using namespace nucleisam;
using nucleisam::testing::random_tensor;
using nucleisam::testing::TempDir;
using nucleisam::testing::tiny_config;

namespace {

BackboneSpec small_backbone() { return tiny_config().backbone; }

LoraSpec qv(int rank) {
  LoraSpec s;
  s.rank = rank;
  return s;
}

TEST(Lora, ZeroInitLeavesEncoderOutputUnchanged) {
  for (int trial = 0; trial < 5; ++trial) {
    auto spec = small_backbone();
    spec.init_seed = 100 + trial;
    ViTEncoder<double> enc(spec);
    enc.freeze();
    std::mt19937_64 rng(trial);
    auto x = random_tensor({2, 3, 16, 16}, rng);
    auto before = enc.forward_with_taps(x);
    auto adapters = inject(enc, qv(2), trial);
    auto after = enc.forward_with_taps(x);
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_LE(max_abs_diff(before.maps[i].value(), after.maps[i].value()), 1e-6);
    for (const auto& a : adapters) {
      for (double v : a.B.value().data) EXPECT_EQ(v, 0.0);
      EXPECT_EQ(a.A.shape(), (Shape{2, 8}));
      EXPECT_EQ(a.B.shape(), (Shape{8, 2}));
    }
  }
}

TEST(Lora, AdapterNamesFollowBlocksAndTargets) {
  ViTEncoder<float> enc(small_backbone());
  enc.freeze();
  auto adapters = inject(enc, qv(2), 0);
  ASSERT_EQ(adapters.size(), 6u);
  EXPECT_EQ(adapters[0].name(), "lora.blocks.0.query");
  EXPECT_EQ(adapters[1].name(), "lora.blocks.0.value");
  EXPECT_EQ(adapters[5].name(), "lora.blocks.2.value");
}

TEST(Lora, InjectionPreconditions) {
  ViTEncoder<double> enc(small_backbone());
  EXPECT_THROW(inject(enc, qv(2), 0), LoraError);  // not frozen
  enc.freeze();
  EXPECT_THROW(inject(enc, qv(0), 0), LoraError);
  EXPECT_THROW(inject(enc, qv(9), 0), LoraError);
  LoraSpec off = qv(2);
  off.enabled = false;
  EXPECT_THROW(inject(enc, off, 0), LoraError);
  inject(enc, qv(2), 0);
  EXPECT_THROW(inject(enc, qv(2), 0), LoraError);
  LoraSpec k = qv(2);
  k.target_projections = {Projection::key};
  EXPECT_NO_THROW(inject(enc, k, 0));  // a different projection is free
}

TEST(Lora, EffectiveWeightCases) {
  LoraAdapter<double> a;
  a.A = Var<double>::leaf(Tensor<double>({1, 2}, std::vector<double>{1, 2}), true);
  a.B = Var<double>::leaf(Tensor<double>({2, 1}, std::vector<double>{3, -1}), true);
  a.scale = 0.5;
  Tensor<double> W({2, 2}, std::vector<double>{1, 0, 0, 1});
  auto out = effective_weight(W, a);
  EXPECT_EQ(out.data, (std::vector<double>{1 + 1.5, 3.0, -0.5, 1 - 1.0}));

  a.B.mutable_value().fill(0.0);
  EXPECT_EQ(effective_weight(W, a), W);
  EXPECT_THROW(effective_weight(Tensor<double>({3, 2}), a), ShapeError);
}

// Factored forward path equals running the block with merged weights.
TEST(Lora, FactoredPathMatchesMergedWeights) {
  auto spec = small_backbone();
  ViTEncoder<double> enc(spec), merged(spec);
  enc.freeze();
  auto adapters = inject(enc, qv(2), 5);
  std::mt19937_64 rng(7);
  for (auto& a : adapters) fill_normal(a.B.mutable_value(), rng, 0.3);
  const std::size_t E = 8;
  for (const auto& a : adapters) {
    auto& qkv = merged.blocks()[a.block].qkv_weight.mutable_value();
    const std::size_t off = a.projection == Projection::query ? 0 : 2 * E;
    Tensor<double> W({E, E});
    std::copy(qkv.data.begin() + off * E, qkv.data.begin() + (off + E) * E, W.data.begin());
    auto Wp = effective_weight(W, a);
    std::copy(Wp.data.begin(), Wp.data.end(), qkv.data.begin() + off * E);
  }
  auto x = random_tensor({1, 3, 16, 16}, rng);
  EXPECT_LT(max_abs_diff(enc.forward(x).value(), merged.forward(x).value()), 1e-12);
}

TEST(Lora, DeltaIsLinearInInput) {
  ViTEncoder<double> enc(small_backbone());
  enc.freeze();
  auto adapters = inject(enc, qv(2), 1);
  auto& a = adapters[0];
  std::mt19937_64 rng(3);
  fill_normal(a.B.mutable_value(), rng, 1.0);
  auto x = random_tensor({4, 8}, rng), y = random_tensor({4, 8}, rng);
  const double s = 1.7;
  Tensor<double> comb({4, 8});
  for (std::size_t i = 0; i < comb.numel(); ++i) comb[i] = x[i] + s * y[i];
  auto lhs = a.delta(Var<double>::constant(comb)).value();
  auto dx = a.delta(Var<double>::constant(x)).value(), dy = a.delta(Var<double>::constant(y)).value();
  for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs[i], dx[i] + s * dy[i], 1e-12);
}

TEST(Lora, AlphaScalesDelta) {
  LoraSpec s = qv(4);
  EXPECT_DOUBLE_EQ(s.scale(), 1.0);
  s.lora_alpha = 8;
  EXPECT_DOUBLE_EQ(s.scale(), 2.0);
}

TEST(Lora, StateRoundTripAndStrictLoading) {
  TempDir dir;
  auto spec = small_backbone();
  ViTEncoder<double> enc(spec);
  enc.freeze();
  auto adapters = inject(enc, qv(2), 11);
  std::mt19937_64 rng(4);
  for (auto& a : adapters) fill_normal(a.B.mutable_value(), rng, 1.0);
  const auto path = dir.path() / "adapters.safetensors";
  adapter_state(adapters).save(path);

  ViTEncoder<double> enc2(spec);
  enc2.freeze();
  auto fresh = inject(enc2, qv(2), 99);
  load_adapter_state(fresh, Archive::load(path));
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    EXPECT_EQ(fresh[i].A.value(), adapters[i].A.value());
    EXPECT_EQ(fresh[i].B.value(), adapters[i].B.value());
  }
  auto x = random_tensor({1, 3, 16, 16}, rng);
  EXPECT_EQ(enc.forward(x).value(), enc2.forward(x).value());

  Archive extra = adapter_state(adapters);
  extra.put("lora.blocks.9.query.A", Tensor<double>({2, 8}));
  EXPECT_THROW(load_adapter_state(fresh, extra), LoraError);
  Archive missing = adapter_state(adapters);
  missing.erase("lora.blocks.1.value.B");
  EXPECT_THROW(load_adapter_state(fresh, missing), LoraError);
  Archive wrong = adapter_state(adapters);
  wrong.put("lora.blocks.0.query.A", Tensor<double>({3, 8}));
  EXPECT_THROW(load_adapter_state(fresh, wrong), LoraError);
}

TEST(Lora, AdapterFileIsMuchSmallerThanEncoder) {
  TempDir dir;
  auto spec = toy_config().backbone;
  ViTEncoder<float> enc(spec);
  enc.state().save(dir.path() / "enc.safetensors");
  enc.freeze();
  auto adapters = inject(enc, toy_config().lora, 0);
  adapter_state(adapters).save(dir.path() / "ad.safetensors");
  const auto big = std::filesystem::file_size(dir.path() / "enc.safetensors");
  const auto small = std::filesystem::file_size(dir.path() / "ad.safetensors");
  EXPECT_GE(big, 10 * small) << big << " vs " << small;
}

// Gradients reach adapters and decoder only; frozen encoder weights never
// receive a gradient buffer.
TEST(Lora, GradientsFlowOnlyToTrainableParameters) {
  SegmentationModel<double> model(tiny_config());
  std::mt19937_64 rng(8);
  for (auto& a : model.adapters()) fill_normal(a.B.mutable_value(), rng, 0.1);
  auto x = random_tensor({2, 3, 16, 16}, rng);
  auto loss = ops::weighted_sum(model.forward(x, Mode::train), Tensor<double>({2, 1, 16, 16}, 1.0));
  backward(loss);
  for (const auto& p : model.encoder().parameters()) EXPECT_FALSE(p.var.has_grad()) << p.name;
  for (const auto& p : model.trainable_parameters()) {
    ASSERT_TRUE(p.var.has_grad()) << p.name;
    double norm = 0;
    for (double g : p.var.grad()) norm += g * g;
    EXPECT_GT(norm, 0.0) << p.name;
  }
}

// Query gradients are small next to the loss, so a wider step keeps
// roundoff out of the central difference.
TEST(Lora, AdapterGradientMatchesFiniteDifferences) {
  SegmentationModel<double> model(tiny_config());
  std::mt19937_64 rng(9);
  for (auto& a : model.adapters()) fill_normal(a.B.mutable_value(), rng, 0.1);
  auto x = random_tensor({2, 3, 16, 16}, rng);
  Tensor<double> wf({2, 8, 4, 4}), wp({2, 1, 16, 16});
  fill_uniform(wf, rng, -1, 1);
  fill_uniform(wp, rng, -1, 1);
  auto features = [&] { return ops::weighted_sum(model.encoder().forward(x), wf); };
  auto probs = [&] { return ops::weighted_sum(model.forward(x, Mode::eval), wp); };
  for (auto& a : model.adapters()) {
    EXPECT_LT(nucleisam::testing::gradient_rel_error(features, a.A, 1e-4), 1e-4) << a.name();
    EXPECT_LT(nucleisam::testing::gradient_rel_error(features, a.B, 1e-4), 1e-4) << a.name();
    EXPECT_LT(nucleisam::testing::gradient_rel_error(probs, a.A, 1e-4), 1e-4) << a.name();
    EXPECT_LT(nucleisam::testing::gradient_rel_error(probs, a.B, 1e-4), 1e-4) << a.name();
  }
}

}  // namespace
