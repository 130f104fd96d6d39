#pragma once

// Dataset manifests, image-level splits, tiling into fixed-size patches,
// foreground-prior estimation and a synthetic blob generator.
//
// Directory layout for every kind except PanNuke:
//   <root>/images/<stem>.{png,tif,tiff}
//   <root>/masks/<stem>.{png,tif,tiff}
// PanNuke keeps one such pair of directories per official fold:
//   <root>/fold{1,2,3}/images, <root>/fold{1,2,3}/masks

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "nucleisam/archive.hpp"
#include "nucleisam/config.hpp"
#include "nucleisam/digest.hpp"
#include "nucleisam/image_io.hpp"
#include "nucleisam/parallel.hpp"
#include "nucleisam/tensor.hpp"

namespace nucleisam {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + s + "'");
}

struct Sample {
  std::string id;         // unique within the manifest
  std::string image;      // relative to the manifest root
  std::string mask;
  std::string source_id;  // all patches of one source share a split
  std::string tag;        // tissue or fold label, may be empty
  Split split = Split::train;
  bool operator==(const Sample&) const = default;
};

inline constexpr int kManifestVersion = 1;

struct DatasetManifest {
  std::string name;
  DatasetKind kind = DatasetKind::generic;
  std::string root;
  std::uint64_t seed = 0;
  std::vector<Sample> samples;

  bool operator==(const DatasetManifest&) const = default;

  std::filesystem::path resolve(const std::string& rel) const { return std::filesystem::path(root) / rel; }

  std::vector<const Sample*> in_split(Split s) const {
    std::vector<const Sample*> out;
    for (const auto& x : samples)
      if (x.split == s) out.push_back(&x);
    return out;
  }

  std::size_t count(Split s) const { return in_split(s).size(); }

  nlohmann::json body() const {
    nlohmann::json j;
    j["format_version"] = kManifestVersion;
    j["name"] = name;
    j["kind"] = to_string(kind);
    j["root"] = root;
    j["seed"] = seed;
    auto& arr = j["samples"] = nlohmann::json::array();
    for (const auto& s : samples) {
      arr.push_back({{"id", s.id}, {"image", s.image}, {"mask", s.mask}, {"source_id", s.source_id}, {"tag", s.tag},
                     {"split", to_string(s.split)}});
    }
    return j;
  }

  /// SHA-256 of the canonical JSON body.
  std::string digest() const { return sha256_hex(body().dump()); }

  std::string to_text() const {
    auto j = body();
    j["digest"] = digest();
    return j.dump(2) + "\n";
  }

  static DatasetManifest from_text(const std::string& text) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("manifest parse error: ") + e.what());
    }
    try {
      if (j.at("format_version").get<int>() != kManifestVersion) {
        throw DataError("unsupported manifest version " + j.at("format_version").dump());
      }
      DatasetManifest m;
      m.name = j.at("name").get<std::string>();
      m.kind = dataset_kind_from_string(j.at("kind").get<std::string>(), "manifest.kind");
      m.root = j.at("root").get<std::string>();
      m.seed = j.at("seed").get<std::uint64_t>();
      for (const auto& s : j.at("samples")) {
        m.samples.push_back({s.at("id"), s.at("image"), s.at("mask"), s.at("source_id"), s.at("tag"),
                             split_from_string(s.at("split").get<std::string>())});
      }
      if (j.contains("digest") && j["digest"].get<std::string>() != m.digest()) {
        throw DataError("manifest digest mismatch (file edited without updating the digest?)");
      }
      return m;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed manifest: ") + e.what());
    }
  }

  void save(const std::filesystem::path& path) const { write_file_atomic(path, to_text()); }

  static DatasetManifest load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open manifest " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str());
  }

  /// Every referenced file exists and ids are unique.
  void validate_files() const {
    std::map<std::string, int> seen;
    for (const auto& s : samples) {
      if (seen[s.id]++) throw DataError("duplicate sample id '" + s.id + "'");
      for (const auto* f : {&s.image, &s.mask})
        if (!std::filesystem::exists(resolve(*f))) throw DataError("manifest references missing file " + resolve(*f).string());
    }
  }
};

/// Image-level split sizes: val and test each get round(n/10), at least one
/// once there are three images; train gets the rest.
struct SplitSizes {
  std::size_t train = 0, val = 0, test = 0;
};

inline SplitSizes split_sizes(std::size_t n) {
  SplitSizes s;
  s.val = s.test = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
  if (n >= 3) s.val = s.test = std::max<std::size_t>(s.val, 1);
  s.train = n - s.val - s.test;
  return s;
}

/// Split per index, shuffled by `seed`.
inline std::vector<Split> random_split(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto sz = split_sizes(n);
  std::vector<Split> out(n, Split::train);
  for (std::size_t k = 0; k < n; ++k) {
    if (k < sz.test) {
      out[order[k]] = Split::test;
    } else if (k < sz.test + sz.val) {
      out[order[k]] = Split::val;
    }
  }
  return out;
}

/// Official-fold rotation: experiment k trains on fold k, validates on fold
/// k+1 and tests on fold k+2 (mod 3). Folds are 1-based.
struct FoldAssignment {
  int train = 1, val = 2, test = 3;
  bool operator==(const FoldAssignment&) const = default;
};

inline std::array<FoldAssignment, 3> fold_plan() {
  std::array<FoldAssignment, 3> plan;
  for (int k = 0; k < 3; ++k) plan[k] = {k % 3 + 1, (k + 1) % 3 + 1, (k + 2) % 3 + 1};
  return plan;
}

namespace detail {

inline bool is_image_file(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".tif" || ext == ".tiff";
}

/// stem -> file name for the image files in `dir`, sorted by stem.
inline std::map<std::string, std::string> list_by_stem(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;
  if (!std::filesystem::is_directory(dir)) throw DataError("missing directory " + dir.string());
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file() || !is_image_file(e.path())) continue;
    const auto stem = e.path().stem().string();
    if (out.count(stem)) throw DataError("two files share the stem '" + stem + "' in " + dir.string());
    out[stem] = e.path().filename().string();
  }
  return out;
}

/// Pairs images/ with masks/ under `dir` (relative prefix `rel`).
inline std::vector<Sample> paired_samples(const std::filesystem::path& root, const std::string& rel) {
  const auto base = rel.empty() ? root : root / rel;
  const auto images = list_by_stem(base / "images");
  const auto masks = list_by_stem(base / "masks");
  const std::string pre = rel.empty() ? "" : rel + "/";
  std::vector<Sample> out;
  for (const auto& [stem, file] : images) {
    auto m = masks.find(stem);
    if (m == masks.end()) throw DataError("no mask for image stem '" + stem + "' in " + (base / "masks").string());
    Sample s;
    s.id = pre + stem;
    s.image = pre + "images/" + file;
    s.mask = pre + "masks/" + m->second;
    s.source_id = s.id;
    s.tag = rel;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

/// Scans `root` and assigns splits. PanNuke uses the fold rotation of
/// `fold_experiment`; every other kind gets a seeded 80/10/10 image split.
inline DatasetManifest build_manifest(const std::filesystem::path& root, DatasetKind kind, std::uint64_t seed,
                                      std::string name = {}, int fold_experiment = 0) {
  DatasetManifest m;
  m.name = name.empty() ? root.filename().string() : std::move(name);
  if (m.name.empty()) m.name = root.parent_path().filename().string();
  m.kind = kind;
  m.root = root.string();
  m.seed = seed;
  if (kind == DatasetKind::pannuke) {
    if (fold_experiment < 0 || fold_experiment > 2) throw DataError("fold experiment must be 0, 1 or 2");
    const auto plan = fold_plan()[fold_experiment];
    for (int fold = 1; fold <= 3; ++fold) {
      const Split split = fold == plan.train ? Split::train : fold == plan.val ? Split::val : Split::test;
      for (auto& s : detail::paired_samples(root, "fold" + std::to_string(fold))) {
        s.split = split;
        m.samples.push_back(std::move(s));
      }
    }
  } else {
    m.samples = detail::paired_samples(root, "");
    const auto splits = random_split(m.samples.size(), seed);
    for (std::size_t i = 0; i < m.samples.size(); ++i) m.samples[i].split = splits[i];
  }
  if (m.samples.empty()) throw DataError("empty dataset at " + root.string());
  return m;
}

/// Manifest named by the data spec, or a fresh scan of data.root.
inline DatasetManifest manifest_for(const DataSpec& d) {
  if (!d.manifest.empty()) return DatasetManifest::load(d.manifest);
  if (d.root.empty()) throw DataError("data.root or data.manifest must be set");
  return build_manifest(d.root, d.kind, d.split_seed, d.name, d.fold_experiment);
}

// ---------------------------------------------------------------------------
// Tiling

struct TileGrid {
  int rows = 0, cols = 0;  // tile counts
  int tile = 0, stride = 0;
  int padded_height() const { return (rows - 1) * stride + tile; }
  int padded_width() const { return (cols - 1) * stride + tile; }
};

inline TileGrid tile_grid(int height, int width, int tile, int stride = 0) {
  if (stride <= 0) stride = tile;
  if (stride > tile) throw DataError("tile stride larger than tile size leaves gaps");
  auto count = [&](int n) { return n <= tile ? 1 : (n - tile + stride - 1) / stride + 1; };
  return {count(height), count(width), tile, stride};
}

/// Mirror-pads right and bottom so the grid covers the image.
inline cv::Mat pad_to_grid(const cv::Mat& m, const TileGrid& g) {
  cv::Mat out;
  cv::copyMakeBorder(m, out, 0, g.padded_height() - m.rows, 0, g.padded_width() - m.cols, cv::BORDER_REFLECT_101);
  return out;
}

struct PatchRecord {
  std::string sample_id;
  std::string source_id;
  Split split = Split::train;
  int row = 0, col = 0;      // origin in the padded image
  std::vector<float> image;  // normalized RGB, [3, P, P]
  std::vector<std::uint8_t> mask;  // [P, P] in {0, 1}
};

/// Normalized RGB planes of a BGR 8-bit tile.
inline std::vector<float> normalize_tile(const cv::Mat& bgr, const BackboneSpec& spec) {
  const int h = bgr.rows, w = bgr.cols;
  std::vector<float> out(static_cast<std::size_t>(3 * h * w));
  for (int c = 0; c < 3; ++c) {
    const double mean = spec.pixel_mean[c], inv = 1.0 / spec.pixel_std[c];
    float* dst = out.data() + static_cast<std::size_t>(c) * h * w;
    for (int y = 0; y < h; ++y) {
      const auto* row = bgr.ptr<cv::Vec3b>(y);
      for (int x = 0; x < w; ++x) dst[y * w + x] = static_cast<float>((row[x][2 - c] - mean) * inv);
    }
  }
  return out;
}

struct LoadedSample {
  cv::Mat image;  // BGR 8-bit
  cv::Mat mask;   // {0, 1}
};

inline LoadedSample load_sample(const DatasetManifest& m, const Sample& s) {
  LoadedSample out{read_image(m.resolve(s.image)), read_mask(m.resolve(s.mask))};
  if (out.image.size() != out.mask.size()) throw DataError("image and mask sizes differ for sample '" + s.id + "'");
  return out;
}

/// Cuts every sample (optionally only one split) into tile x tile patches.
/// Patches come out in manifest order, then row-major tile order.
inline std::vector<PatchRecord> extract_patches(const DatasetManifest& manifest, const BackboneSpec& spec,
                                                int stride = 0, std::optional<Split> only = std::nullopt,
                                                std::size_t workers = 1) {
  const int P = spec.image_size;
  std::vector<const Sample*> chosen;
  for (const auto& s : manifest.samples)
    if (!only || s.split == *only) chosen.push_back(&s);
  std::vector<std::vector<PatchRecord>> per(chosen.size());
  parallel_for(chosen.size(), workers, [&](std::size_t i) {
    const Sample& s = *chosen[i];
    auto loaded = load_sample(manifest, s);
    if (loaded.image.rows * 4 < P || loaded.image.cols * 4 < P) {
      throw DataError("image '" + s.id + "' is smaller than a quarter patch");
    }
    const auto g = tile_grid(loaded.image.rows, loaded.image.cols, P, stride);
    const cv::Mat img = pad_to_grid(loaded.image, g), msk = pad_to_grid(loaded.mask, g);
    for (int r = 0; r < g.rows; ++r)
      for (int c = 0; c < g.cols; ++c) {
        const cv::Rect roi(c * g.stride, r * g.stride, P, P);
        PatchRecord rec{s.id, s.source_id, s.split, roi.y, roi.x, normalize_tile(img(roi), spec), {}};
        const cv::Mat m = msk(roi).clone();
        rec.mask.assign(m.datastart, m.dataend);
        per[i].push_back(std::move(rec));
      }
  });
  std::vector<PatchRecord> out;
  for (auto& v : per)
    for (auto& r : v) out.push_back(std::move(r));
  return out;
}

/// Reassembles non-overlapping patch masks into a height x width mask,
/// dropping mirrored margins. Later patches win where tiles overlap.
inline cv::Mat stitch_masks(std::span<const PatchRecord> patches, int height, int width, int tile) {
  cv::Mat out = cv::Mat::zeros(height, width, CV_8U);
  for (const auto& p : patches) {
    for (int y = 0; y < tile && p.row + y < height; ++y)
      for (int x = 0; x < tile && p.col + x < width; ++x) out.at<std::uint8_t>(p.row + y, p.col + x) = p.mask[y * tile + x];
  }
  return out;
}

/// SHA-256 over patch origins, pixels and masks.
inline std::string patch_digest(std::span<const PatchRecord> patches) {
  Sha256 h;
  for (const auto& p : patches) {
    h.update(p.sample_id + "|" + to_string(p.split) + "|" + std::to_string(p.row) + "," + std::to_string(p.col));
    h.update(p.image.data(), p.image.size() * sizeof(float));
    h.update(p.mask.data(), p.mask.size());
  }
  return h.hex();
}

inline constexpr double kPriorClamp = 1e-4;

/// Pixel-weighted foreground fraction over the given (training) patches,
/// clamped to [1e-4, 1 - 1e-4].
inline double estimate_foreground_prior(std::span<const PatchRecord> train) {
  if (train.empty()) throw DataError("cannot estimate the foreground prior from an empty training set");
  double fg = 0, total = 0;
  for (const auto& p : train) {
    for (auto v : p.mask) fg += v;
    total += static_cast<double>(p.mask.size());
  }
  return std::clamp(fg / total, kPriorClamp, 1.0 - kPriorClamp);
}

/// [B, 3, P, P] images and [B, 1, P, P] masks for the selected patches.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> make_batch(std::span<const PatchRecord* const> patches, int tile) {
  const auto B = patches.size(), P = static_cast<std::size_t>(tile);
  Tensor<T> images({B, 3, P, P}), masks({B, 1, P, P});
  for (std::size_t b = 0; b < B; ++b) {
    std::copy(patches[b]->image.begin(), patches[b]->image.end(), images.data.begin() + b * 3 * P * P);
    std::copy(patches[b]->mask.begin(), patches[b]->mask.end(), masks.data.begin() + b * P * P);
  }
  return {std::move(images), std::move(masks)};
}

// ---------------------------------------------------------------------------
// Synthetic blobs

struct BlobOptions {
  int count = 20;
  int image_size = 64;
  std::uint64_t seed = 0;
  double min_foreground = 0.05;
  double max_foreground = 0.30;
  double min_radius = 0;  // 0 = image_size / 20
  double max_radius = 0;  // 0 = image_size / 10
  double noise = 12.0;    // pixel noise std on the 0-255 scale
  std::string prefix = "blob";
};

/// Writes <root>/images and <root>/masks with random filled ellipses on a
/// light background, plus <root>/manifest.json split with `split_seed`.
/// Masks are the exact union of the drawn ellipses.
inline DatasetManifest synth_blobs(const std::filesystem::path& root, const BlobOptions& opt,
                                   std::uint64_t split_seed = 42) {
  if (opt.count < 1 || opt.image_size < 8) throw DataError("synth_blobs: need at least one image of size >= 8");
  if (!(opt.min_foreground >= 0 && opt.min_foreground <= opt.max_foreground && opt.max_foreground < 1)) {
    throw DataError("synth_blobs: foreground band must satisfy 0 <= min <= max < 1");
  }
  const int S = opt.image_size;
  const double rmin = opt.min_radius > 0 ? opt.min_radius : S / 20.0;
  const double rmax = opt.max_radius > 0 ? opt.max_radius : S / 10.0;
  std::filesystem::create_directories(root / "images");
  std::filesystem::create_directories(root / "masks");
  std::mt19937_64 rng(derive_seed(opt.seed, 5));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, opt.noise);
  const double total = static_cast<double>(S) * S;

  for (int n = 0; n < opt.count; ++n) {
    cv::Mat mask = cv::Mat::zeros(S, S, CV_8U);
    cv::Mat shade(S, S, CV_32F, cv::Scalar(0));  // per-pixel nucleus darkness
    const double target = opt.min_foreground + unit(rng) * (opt.max_foreground - opt.min_foreground);
    double fg = 0;
    for (int attempt = 0; attempt < 2000 && fg / total < target; ++attempt) {
      const double cx = unit(rng) * S, cy = unit(rng) * S;
      const double a = rmin + unit(rng) * (rmax - rmin), b = rmin + unit(rng) * (rmax - rmin);
      const double th = unit(rng) * std::numbers::pi, ct = std::cos(th), st = std::sin(th);
      const float dark = static_cast<float>(0.75 + 0.25 * unit(rng));
      const double r = std::max(a, b);
      const int y0 = std::max(0, static_cast<int>(std::floor(cy - r))), y1 = std::min(S - 1, static_cast<int>(std::ceil(cy + r)));
      const int x0 = std::max(0, static_cast<int>(std::floor(cx - r))), x1 = std::min(S - 1, static_cast<int>(std::ceil(cx + r)));
      std::vector<cv::Point> added;
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const double dx = x - cx, dy = y - cy;
          const double u = (dx * ct + dy * st) / a, v = (-dx * st + dy * ct) / b;
          if (u * u + v * v <= 1.0 && !mask.at<std::uint8_t>(y, x)) added.emplace_back(x, y);
        }
      if ((fg + static_cast<double>(added.size())) / total > opt.max_foreground) continue;
      for (const auto& p : added) {
        mask.at<std::uint8_t>(p) = 1;
        shade.at<float>(p) = dark;
      }
      fg += static_cast<double>(added.size());
    }
    // RGB background (225, 190, 215) and nucleus colour (85, 55, 140)
    const double bg[3] = {225, 190, 215}, nuc[3] = {85, 55, 140};
    cv::Mat img(S, S, CV_8UC3);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const double w = shade.at<float>(y, x);
        auto& px = img.at<cv::Vec3b>(y, x);
        for (int c = 0; c < 3; ++c) {
          const double v = (1 - w) * bg[c] + w * nuc[c] + noise(rng);
          px[2 - c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
      }
    char stem[64];
    std::snprintf(stem, sizeof stem, "%s_%03d", opt.prefix.c_str(), n);
    write_png(root / "images" / (std::string(stem) + ".png"), img);
    write_png(root / "masks" / (std::string(stem) + ".png"), mask * 255);
  }
  auto m = build_manifest(root, DatasetKind::blobs, split_seed);
  m.save(root / "manifest.json");
  return m;
}

}  // namespace nucleisam
