#include "nucleisam/evaluator.hpp"

#include <fstream>

#include "test_support.hpp"

using namespace nucleisam;
using nucleisam::testing::TempDir;
using nucleisam::testing::tiny_config;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double max_abs_diff(const cv::Mat& a, const cv::Mat& b) {
  double m = 0;
  cv::minMaxLoc(cv::abs(a - b), nullptr, &m);
  return m;
}

ExperimentConfig untrained_config() {
  auto c = tiny_config();
  c.decoder.foreground_prior = 0.2;
  return c;
}

// One short training run on 32 px blobs, shared by the suite.
class Trained : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir;
    synth_blobs(dir_->path() / "data", BlobOptions{.count = 10, .image_size = 32, .seed = 5});
    auto c = tiny_config();
    c.data.manifest = (dir_->path() / "data" / "manifest.json").string();
    c.data.name = "blobs";
    c.train.epochs = 2;
    c.train.learning_rate = 3e-3;
    checkpoint_ = train<double>(c, {.out_dir = dir_->path() / "run"}).best_checkpoint;
  }
  static void TearDownTestSuite() { delete dir_; }
  static DatasetManifest manifest() { return DatasetManifest::load(dir_->path() / "data" / "manifest.json"); }

  static TempDir* dir_;
  static std::filesystem::path checkpoint_;
};
TempDir* Trained::dir_ = nullptr;
std::filesystem::path Trained::checkpoint_;

TEST(Predict, SingleTileEqualsDirectForward) {
  SegmentationModel<double> model(untrained_config());
  cv::Mat img(16, 16, CV_8UC3);
  cv::randu(img, 0, 256);
  const cv::Mat tiled = predict_probabilities(model, img);
  const auto planes = normalize_tile(img, model.config().backbone);
  Tensor<double> x({1, 3, 16, 16}, std::vector<double>(planes.begin(), planes.end()));
  const auto direct = model.forward(x, Mode::eval).value();
  double worst = 0;
  for (int i = 0; i < 256; ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(tiled.at<float>(i / 16, i % 16)) -
                                     static_cast<double>(static_cast<float>(direct[i]))));
  }
  EXPECT_EQ(worst, 0.0);
}

TEST(Predict, NonDivisibleImageKeepsShapeAndInteriorTiles) {
  SegmentationModel<double> model(untrained_config());
  cv::Mat img(35, 25, CV_8UC3);
  cv::randu(img, 0, 256);
  const cv::Mat prob = predict_probabilities(model, img, 3);
  EXPECT_EQ(prob.rows, 35);
  EXPECT_EQ(prob.cols, 25);
  EXPECT_EQ(prob.type(), CV_32F);
  // the tile at (16, 0) lies fully inside the image
  const cv::Mat alone = predict_probabilities(model, img(cv::Rect(0, 16, 16, 16)).clone());
  EXPECT_EQ(max_abs_diff(prob(cv::Rect(0, 16, 16, 16)), alone), 0.0);
  double lo = 0, hi = 0;
  cv::minMaxLoc(prob, &lo, &hi);
  EXPECT_GE(lo, 0.0);
  EXPECT_LE(hi, 1.0);
  EXPECT_THROW(predict_probabilities(model, cv::Mat(3, 40, CV_8UC3, cv::Scalar::all(0))), EvaluationError);
}

TEST(Predict, ThresholdIsInclusive) {
  cv::Mat p = (cv::Mat_<float>(1, 4) << 0.0f, 0.4999f, 0.5f, 1.0f);
  const cv::Mat m = threshold_mask(p);
  EXPECT_EQ(m.at<std::uint8_t>(0, 1), 0);
  EXPECT_EQ(m.at<std::uint8_t>(0, 2), 1);
  EXPECT_EQ(m.at<std::uint8_t>(0, 3), 1);
}

TEST_F(Trained, MetricsMatchDirectComputation) {
  auto model = restore_model<double>(checkpoint_);
  const auto m = manifest();
  const auto r = evaluate(model, m, Split::test);
  ASSERT_EQ(r.rows.size(), m.count(Split::test));
  for (const auto& row : r.rows) {
    const auto it = std::find_if(m.samples.begin(), m.samples.end(), [&](const Sample& s) { return s.id == row.sample_id; });
    ASSERT_NE(it, m.samples.end());
    const auto loaded = load_sample(m, *it);
    const cv::Mat pred = threshold_mask(predict_probabilities(model, loaded.image));
    const auto tp = cv::countNonZero(pred & loaded.mask);
    const auto ps = cv::countNonZero(pred), ts = cv::countNonZero(loaded.mask);
    const double d = ps + ts == 0 ? 1.0 : 2.0 * tp / (ps + ts);
    const double j = ps + ts - tp == 0 ? 1.0 : static_cast<double>(tp) / (ps + ts - tp);
    EXPECT_DOUBLE_EQ(row.dice, d);
    EXPECT_DOUBLE_EQ(row.iou, j);
  }
}

TEST_F(Trained, EvaluationIsDeterministicAcrossWorkers) {
  auto model = restore_model<double>(checkpoint_);
  const auto m = manifest();
  const auto a = evaluate(model, m, std::nullopt, 1);
  const auto b = evaluate(model, m, std::nullopt, 4);
  EXPECT_EQ(a, b);
  EXPECT_EQ(report_csv(a), report_csv(b));
  EXPECT_EQ(a.rows.size(), m.samples.size());
}

TEST_F(Trained, EmptySplitIsAnError) {
  auto model = restore_model<double>(checkpoint_);
  auto m = manifest();
  for (auto& s : m.samples) s.split = Split::train;
  try {
    evaluate(model, m, Split::test);
    FAIL() << "expected an error";
  } catch (const EvaluationError& e) {
    EXPECT_NE(std::string(e.what()).find("test split is empty"), std::string::npos) << e.what();
  }
}

TEST_F(Trained, OverlayCountsAndContent) {
  auto model = restore_model<double>(checkpoint_);
  const auto m = manifest();
  TempDir out;
  EXPECT_TRUE(export_overlays(model, m, Split::test, 0, out.path()).empty());
  EXPECT_FALSE(std::filesystem::exists(out.path() / "overlays"));
  const auto all = export_overlays(model, m, std::nullopt, 1000, out.path());
  ASSERT_EQ(all.size(), m.samples.size());
  const auto loaded = load_sample(m, m.samples[0]);
  const cv::Mat panel = read_image(all[0]);
  ASSERT_EQ(panel.rows, 3 * loaded.image.rows);
  ASSERT_EQ(panel.cols, loaded.image.cols);
  const int h = loaded.image.rows;
  const cv::Mat pred = threshold_mask(predict_probabilities(model, loaded.image)) * 255;
  cv::Mat channels[3];
  cv::split(panel(cv::Rect(0, 2 * h, panel.cols, h)), channels);
  EXPECT_EQ(cv::countNonZero(channels[0] != pred), 0);
  cv::split(panel(cv::Rect(0, h, panel.cols, h)), channels);
  EXPECT_EQ(cv::countNonZero(channels[1] != loaded.mask * 255), 0);
  EXPECT_EQ(cv::countNonZero(cv::Mat(panel(cv::Rect(0, 0, panel.cols, h)) != loaded.image).reshape(1)), 0);
}

TEST_F(Trained, SingleCellTransferEqualsEvaluate) {
  auto model = restore_model<double>(checkpoint_);
  const auto m = manifest();
  const auto r = evaluate(model, m, Split::test);
  const auto t = cross_eval<double>({{"blobs", checkpoint_}}, {{"blobs", m}});
  ASSERT_EQ(t.cells.size(), 1u);
  EXPECT_EQ(t.cells.at({"blobs", "blobs"}), std::make_pair(r.mean_dice, r.mean_iou));
  const auto back = ResultTable::from_csv(t.csv(), t.title);
  EXPECT_EQ(back.cells, t.cells);
  EXPECT_EQ(back.row_labels, t.row_labels);
  EXPECT_THROW(cross_eval<double>({{"gone", dir_->path() / "missing.ckpt"}}, {{"blobs", m}}), EvaluationError);
  const auto everything = cross_eval<double>({{"blobs", checkpoint_}}, {{"blobs", m}}, true);
  const auto full = evaluate(model, m, std::nullopt);
  EXPECT_EQ(everything.cells.at({"blobs", "blobs"}).first, full.mean_dice);
}

TEST_F(Trained, RunEvalWritesReports) {
  TempDir out;
  const auto r = run_eval<double>({.checkpoint = checkpoint_, .out_dir = out.path(), .overlays = 1});
  const auto name = manifest().name;
  const auto table = ResultTable::from_csv(slurp(out.path() / "reports" / "benchmark.csv"));
  EXPECT_EQ(table.cells.at({"LoRA-SAM", name}).first, std::stod(format_metric(r.mean_dice)));
  EXPECT_EQ(slurp(out.path() / "reports" / "per_image" / (name + ".csv")), report_csv(r));
  EXPECT_TRUE(std::filesystem::exists(out.path() / "reports" / "benchmark.md"));
  EXPECT_EQ(std::distance(std::filesystem::directory_iterator(out.path() / "overlays"), {}), 1);
}

TEST(Ablation, DeriveVariantIsPure) {
  const auto base = untrained_config();
  const auto copy = base;
  for (Variant v : all_variants()) {
    EXPECT_EQ(derive_variant(base, v), derive_variant(base, v));
    EXPECT_EQ(base, copy);
  }
  EXPECT_EQ(derive_variant(base, Variant::full), base);
  EXPECT_FALSE(derive_variant(base, Variant::no_lora).lora.enabled);
  EXPECT_FALSE(derive_variant(base, Variant::no_bias_prior).decoder.use_bias_prior);
}

TEST(Ablation, TapSelections) {
  ExperimentConfig vitb;
  vitb.backbone.depth = 12;
  vitb.backbone.tap_indices = {4, 8, 12};
  EXPECT_EQ(derive_variant(vitb, Variant::single_level).backbone.tap_indices, std::vector<int>{12});
  EXPECT_EQ(derive_variant(vitb, Variant::dual_level).backbone.tap_indices, (std::vector<int>{10, 12}));
  EXPECT_EQ(variant_label(Variant::single_level, derive_variant(vitb, Variant::single_level)), "Single-Level (12)");
  EXPECT_EQ(variant_label(Variant::dual_level, derive_variant(vitb, Variant::dual_level)), "Dual-Level (10,12)");
  const auto toy = toy_config();
  EXPECT_EQ(derive_variant(toy, Variant::single_level).backbone.tap_indices, std::vector<int>{4});
  EXPECT_EQ(derive_variant(toy, Variant::dual_level).backbone.tap_indices, (std::vector<int>{2, 4}));
  auto shallow = toy;
  shallow.backbone.depth = 2;
  shallow.backbone.tap_indices = {1, 2};
  EXPECT_THROW(derive_variant(shallow, Variant::dual_level), ConfigError);
  EXPECT_EQ(variant_from_string("no_lora"), Variant::no_lora);
  EXPECT_THROW(variant_from_string("bogus"), ConfigError);
}

TEST(Ablation, RunsEachVariantAndWritesTable) {
  TempDir dir;
  synth_blobs(dir.path() / "data", BlobOptions{.count = 10, .image_size = 32, .seed = 5});
  auto c = tiny_config();
  c.data.manifest = (dir.path() / "data" / "manifest.json").string();
  c.train.epochs = 1;
  const auto r = run_ablation<double>(c, {Variant::no_lora, Variant::single_level}, dir.path() / "out");
  ASSERT_EQ(r.size(), 2u);
  EXPECT_FALSE(r[0].config.lora.enabled);
  EXPECT_EQ(r[1].config.backbone.tap_indices, std::vector<int>{3});
  const auto t = ResultTable::from_csv(slurp(dir.path() / "out" / "reports" / "ablation.csv"));
  EXPECT_EQ(t.row_labels, (std::vector<std::string>{"No LoRA", "Single-Level (3)"}));
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "out" / "ablation" / "no_lora" / "checkpoints" / "best.ckpt"));
}

}  // namespace
