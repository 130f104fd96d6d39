#pragma once

// Full-image evaluation by tiled inference, the cross-dataset transfer
// matrix, the ablation runner, overlay export and report files.
//
// Output layout under an output directory:
//   reports/benchmark.{md,csv}  reports/transfer.{md,csv}
//   reports/ablation.{md,csv}   reports/per_image/<name>.csv
//   overlays/<sample>.png       (input / ground truth / prediction, stacked)

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "nucleisam/data.hpp"
#include "nucleisam/metrics.hpp"
#include "nucleisam/model.hpp"
#include "nucleisam/trainer.hpp"

namespace nucleisam {

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kThreshold = 0.5;

/// Foreground probability map (CV_32F, same size as the image). The image
/// is mirror-padded to whole tiles of the model's input size, tiles are run
/// in batches, and the padded margins are cropped away.
template <typename T>
cv::Mat predict_probabilities(SegmentationModel<T>& model, const cv::Mat& bgr, std::size_t batch = 4) {
  const auto& spec = model.config().backbone;
  const int P = spec.image_size;
  if (bgr.rows * 4 < P || bgr.cols * 4 < P) throw EvaluationError("image is smaller than a quarter tile");
  const auto g = tile_grid(bgr.rows, bgr.cols, P);
  const cv::Mat padded = pad_to_grid(bgr, g);
  std::vector<cv::Rect> tiles;
  for (int r = 0; r < g.rows; ++r)
    for (int c = 0; c < g.cols; ++c) tiles.emplace_back(c * g.stride, r * g.stride, P, P);
  cv::Mat full(padded.rows, padded.cols, CV_32F);
  const std::size_t n = static_cast<std::size_t>(P) * P;
  for (std::size_t s = 0; s < tiles.size(); s += batch) {
    const std::size_t B = std::min(batch, tiles.size() - s);
    Tensor<T> images({B, 3, static_cast<std::size_t>(P), static_cast<std::size_t>(P)});
    for (std::size_t b = 0; b < B; ++b) {
      const auto planes = normalize_tile(padded(tiles[s + b]), spec);
      std::copy(planes.begin(), planes.end(), images.data.begin() + b * 3 * n);
    }
    const auto probs = model.forward(images, Mode::eval).value();
    for (std::size_t b = 0; b < B; ++b) {
      const auto& t = tiles[s + b];
      for (int y = 0; y < P; ++y) {
        float* row = full.ptr<float>(t.y + y) + t.x;
        for (int x = 0; x < P; ++x) row[x] = static_cast<float>(probs[b * n + y * P + x]);
      }
    }
  }
  return full(cv::Rect(0, 0, bgr.cols, bgr.rows)).clone();
}

/// {0, 1} mask of probabilities >= 0.5.
inline cv::Mat threshold_mask(const cv::Mat& prob) {
  cv::Mat m = prob >= kThreshold;
  return m / 255;
}

inline BinaryMaskPair mask_pair(const cv::Mat& prediction, const cv::Mat& truth) {
  if (prediction.size() != truth.size()) throw EvaluationError("prediction and ground-truth sizes differ");
  BinaryMaskPair p{static_cast<std::size_t>(truth.rows), static_cast<std::size_t>(truth.cols), {}, {}};
  const cv::Mat a = prediction.isContinuous() ? prediction : prediction.clone();
  const cv::Mat b = truth.isContinuous() ? truth : truth.clone();
  p.prediction.assign(a.datastart, a.dataend);
  p.truth.assign(b.datastart, b.dataend);
  return p;
}

/// Samples of one split, or every sample when `split` is empty.
inline std::vector<const Sample*> select_samples(const DatasetManifest& m, std::optional<Split> split) {
  std::vector<const Sample*> out;
  for (const auto& s : m.samples)
    if (!split || s.split == *split) out.push_back(&s);
  return out;
}

/// Per-image Dice/IoU on full images. PanNuke results are also grouped by
/// fold tag.
template <typename T>
MetricsReport evaluate(SegmentationModel<T>& model, const DatasetManifest& manifest,
                       std::optional<Split> split = Split::test, std::size_t workers = 1) {
  const auto samples = select_samples(manifest, split);
  if (samples.empty()) {
    throw EvaluationError("no samples to evaluate in '" + manifest.name + "'" +
                          (split ? " (" + to_string(*split) + " split is empty)" : ""));
  }
  std::vector<MetricRow> rows(samples.size());
  parallel_for(samples.size(), workers, [&](std::size_t i) {
    const auto loaded = load_sample(manifest, *samples[i]);
    const auto pair = mask_pair(threshold_mask(predict_probabilities(model, loaded.image)), loaded.mask);
    rows[i] = {samples[i]->id, dice(pair), iou(pair), samples[i]->tag};
  });
  return aggregate(std::move(rows), manifest.kind == DatasetKind::pannuke);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, text);
}

/// Writes <out>/reports/<stem>.md and .csv.
inline void write_table(const std::filesystem::path& out, const std::string& stem, const ResultTable& t) {
  write_text(out / "reports" / (stem + ".md"), t.markdown());
  write_text(out / "reports" / (stem + ".csv"), t.csv());
}

inline std::string file_safe(std::string s) {
  for (auto& c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  return s;
}

/// Writes input / ground truth / prediction triptychs, stacked vertically,
/// for the first n selected samples. Returns the written paths.
template <typename T>
std::vector<std::filesystem::path> export_overlays(SegmentationModel<T>& model, const DatasetManifest& manifest,
                                                   std::optional<Split> split, std::size_t n,
                                                   const std::filesystem::path& out) {
  std::vector<std::filesystem::path> written;
  const auto samples = select_samples(manifest, split);
  for (std::size_t i = 0; i < std::min(n, samples.size()); ++i) {
    const auto loaded = load_sample(manifest, *samples[i]);
    const cv::Mat pred = threshold_mask(predict_probabilities(model, loaded.image)) * 255;
    const cv::Mat truth = loaded.mask * 255;
    cv::Mat gt3, pred3, stacked;
    cv::merge(std::vector<cv::Mat>{truth, truth, truth}, gt3);
    cv::merge(std::vector<cv::Mat>{pred, pred, pred}, pred3);
    cv::vconcat(std::vector<cv::Mat>{loaded.image, gt3, pred3}, stacked);
    const auto path = out / "overlays" / (file_safe(manifest.name + "_" + samples[i]->id) + ".png");
    write_png(path, stacked);
    written.push_back(path);
  }
  return written;
}

struct EvalJob {
  std::filesystem::path checkpoint;
  std::optional<DatasetManifest> manifest;  // default: the checkpoint's training data
  std::optional<Split> split = Split::test;
  std::filesystem::path out_dir;
  std::size_t overlays = 0;
  std::size_t workers = 1;
  std::string model_name = "LoRA-SAM";
};

/// Evaluates one checkpoint and writes benchmark reports, per-image CSV and
/// optional overlays.
template <typename T>
MetricsReport run_eval(const EvalJob& job) {
  const Archive a = Archive::load(job.checkpoint);
  auto model = restore_model<T>(a);
  const auto manifest = job.manifest ? *job.manifest : manifest_for(model.config().data);
  auto report = evaluate(model, manifest, job.split, job.workers);
  ResultTable t;
  t.title = "In-domain segmentation";
  t.row_labels = {job.model_name};
  t.column_labels = {manifest.name};
  t.cells[{job.model_name, manifest.name}] = {report.overall ? report.overall->first : report.mean_dice,
                                              report.overall ? report.overall->second : report.mean_iou};
  write_table(job.out_dir, "benchmark", t);
  write_text(job.out_dir / "reports" / "per_image" / (file_safe(manifest.name) + ".csv"), report_csv(report));
  export_overlays(model, manifest, job.split, job.overlays, job.out_dir);
  return report;
}

struct TransferSource {
  std::string name;                 // row label
  std::filesystem::path checkpoint;
};

struct TransferTarget {
  std::string name;  // column label
  DatasetManifest manifest;
};

/// Every ordered (source, target) pair; the diagonal is in-domain. Targets
/// are scored on their test split unless `all_images` is set.
template <typename T>
ResultTable cross_eval(const std::vector<TransferSource>& sources, const std::vector<TransferTarget>& targets,
                       bool all_images = false, std::size_t workers = 1) {
  ResultTable t;
  t.title = "Cross-dataset transfer (rows: trained on, columns: tested on)";
  t.row_header = "Trained on";
  for (const auto& tg : targets) t.column_labels.push_back(tg.name);
  for (const auto& src : sources) {
    if (!std::filesystem::exists(src.checkpoint)) {
      throw EvaluationError("missing checkpoint for source '" + src.name + "': " + src.checkpoint.string());
    }
    auto model = restore_model<T>(src.checkpoint);
    t.row_labels.push_back(src.name);
    for (const auto& tg : targets) {
      const auto r = evaluate(model, tg.manifest, all_images ? std::nullopt : std::optional<Split>(Split::test), workers);
      t.cells[{src.name, tg.name}] = {r.overall ? r.overall->first : r.mean_dice,
                                      r.overall ? r.overall->second : r.mean_iou};
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Ablations

enum class Variant { full, no_lora, no_bias_prior, single_level, dual_level };

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::no_lora, Variant::no_bias_prior, Variant::single_level,
                                      Variant::dual_level, Variant::full};
  return v;
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_lora: return "no_lora";
    case Variant::no_bias_prior: return "no_bias_prior";
    case Variant::single_level: return "single_level";
    case Variant::dual_level: return "dual_level";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  for (Variant v : all_variants())
    if (to_string(v) == s) return v;
  throw ConfigError("variant", "unknown ablation variant '" + s + "'");
}

/// Table label, e.g. "Single-Level (12)".
inline std::string variant_label(Variant v, const ExperimentConfig& derived) {
  auto taps = [&] {
    std::string s;
    for (int t : derived.backbone.tap_indices) s += (s.empty() ? "" : ",") + std::to_string(t);
    return s;
  };
  switch (v) {
    case Variant::full: return "Full model (" + taps() + ")";
    case Variant::no_lora: return "No LoRA";
    case Variant::no_bias_prior: return "No bias prior";
    case Variant::single_level: return "Single-Level (" + taps() + ")";
    case Variant::dual_level: return "Dual-Level (" + taps() + ")";
  }
  return "?";
}

/// Pure derivation of a variant config from the base.
inline ExperimentConfig derive_variant(const ExperimentConfig& base, Variant v) {
  ExperimentConfig c = base;
  const int d = base.backbone.depth;
  switch (v) {
    case Variant::full: break;
    case Variant::no_lora: c.lora.enabled = false; break;
    case Variant::no_bias_prior: c.decoder.use_bias_prior = false; break;
    case Variant::single_level: c.backbone.tap_indices = {d}; break;
    case Variant::dual_level:
      if (d < 3) throw ConfigError("backbone.depth", "dual_level needs depth >= 3");
      c.backbone.tap_indices = {d - 2, d};
      break;
  }
  validate(c);
  return c;
}

struct AblationResult {
  Variant variant;
  ExperimentConfig config;
  MetricsReport report;
};

/// Trains and evaluates each variant under <out>/ablation/<variant>, then
/// writes reports/ablation.{md,csv}.
template <typename T>
std::vector<AblationResult> run_ablation(const ExperimentConfig& base, const std::vector<Variant>& variants,
                                         const std::filesystem::path& out, std::size_t workers = 1,
                                         std::ostream* progress = nullptr) {
  validate(base);
  std::vector<ExperimentConfig> derived;
  for (Variant v : variants) derived.push_back(derive_variant(base, v));  // fail before any training
  const auto manifest = manifest_for(base.data);
  std::vector<AblationResult> results;
  ResultTable t;
  t.title = "Ablation";
  t.row_header = "Variant";
  t.column_labels = {manifest.name};
  for (std::size_t i = 0; i < variants.size(); ++i) {
    TrainOptions opt;
    opt.out_dir = out / "ablation" / to_string(variants[i]);
    opt.workers = workers;
    opt.progress = progress;
    const auto trained = train<T>(derived[i], opt);
    auto model = restore_model<T>(trained.best_checkpoint);
    auto report = evaluate(model, manifest, Split::test, workers);
    const auto label = variant_label(variants[i], derived[i]);
    t.row_labels.push_back(label);
    t.cells[{label, manifest.name}] = {report.mean_dice, report.mean_iou};
    results.push_back({variants[i], trained.config, std::move(report)});
  }
  write_table(out, "ablation", t);
  return results;
}

}  // namespace nucleisam
