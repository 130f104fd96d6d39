#pragma once

// Experiment configuration: every knob for backbone, adapters, decoder, loss,
// data and training, with strict JSON (de)serialization, dotted-path
// overrides and analytic trainable-parameter counts.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "nucleisam/digest.hpp"

namespace nucleisam {

using json = nlohmann::json;

/// Validation or parse failure. `field` holds the dotted path of the
/// offending key (empty for whole-file parse errors).
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error(field.empty() ? what : field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

enum class Projection { query, key, value, output };

inline std::string to_string(Projection p) {
  switch (p) {
    case Projection::query: return "query";
    case Projection::key: return "key";
    case Projection::value: return "value";
    case Projection::output: return "output";
  }
  return "?";
}

inline Projection projection_from_string(const std::string& s, const std::string& field) {
  if (s == "query") return Projection::query;
  if (s == "key") return Projection::key;
  if (s == "value") return Projection::value;
  if (s == "output") return Projection::output;
  throw ConfigError(field, "unknown projection '" + s + "' (expected query, key, value or output)");
}

struct BackboneSpec {
  int image_size = 512;
  int patch_size = 16;
  int embed_dim = 768;
  int depth = 12;
  int num_heads = 12;
  double mlp_ratio = 4.0;
  std::vector<int> tap_indices{8, 10, 12};  // 1-based block indices
  std::vector<double> pixel_mean{123.675, 116.28, 103.53};
  std::vector<double> pixel_std{58.395, 57.12, 57.375};
  std::uint64_t init_seed = 0;  // frozen weights when no checkpoint is given
  std::string pretrained;       // optional weight archive
  std::string pretrained_prefix = "image_encoder.";

  int grid_size() const { return image_size / patch_size; }
  int mlp_hidden() const { return static_cast<int>(mlp_ratio * embed_dim); }
  bool operator==(const BackboneSpec&) const = default;
};

struct LoraSpec {
  bool enabled = true;
  int rank = 4;
  std::optional<double> lora_alpha;  // defaults to rank
  std::vector<Projection> target_projections{Projection::query, Projection::value};

  double scale() const { return lora_alpha.value_or(static_cast<double>(rank)) / static_cast<double>(rank); }
  bool operator==(const LoraSpec&) const = default;
};

struct DecoderSpec {
  int branch_channels = 256;
  bool use_bias_prior = true;
  std::optional<double> foreground_prior;  // estimated from training masks when unset
  bool operator==(const DecoderSpec&) const = default;
};

enum class TverskyExponent { power, inverse };

struct LossSpec {
  double alpha = 0.6;
  double beta = 0.4;
  double gamma = 2.5;
  double epsilon = 1e-6;
  TverskyExponent exponent = TverskyExponent::power;
  bool operator==(const LossSpec&) const = default;
};

enum class DatasetKind { generic, tnbc, monuseg, pannuke, blobs };

inline std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::generic: return "generic";
    case DatasetKind::tnbc: return "tnbc";
    case DatasetKind::monuseg: return "monuseg";
    case DatasetKind::pannuke: return "pannuke";
    case DatasetKind::blobs: return "blobs";
  }
  return "?";
}

inline DatasetKind dataset_kind_from_string(const std::string& s, const std::string& field = "data.kind") {
  if (s == "generic") return DatasetKind::generic;
  if (s == "tnbc") return DatasetKind::tnbc;
  if (s == "monuseg") return DatasetKind::monuseg;
  if (s == "pannuke") return DatasetKind::pannuke;
  if (s == "blobs") return DatasetKind::blobs;
  throw ConfigError(field, "unknown dataset kind '" + s + "'");
}

struct DataSpec {
  std::string name;
  std::string root;
  DatasetKind kind = DatasetKind::generic;
  std::string manifest;  // explicit manifest overrides the random split
  int stride = 0;        // 0 = non-overlapping tiles of image_size
  std::uint64_t split_seed = 42;
  int fold_experiment = 0;  // PanNuke rotation index in [0, 3)
  bool operator==(const DataSpec&) const = default;
};

enum class Monitor { val_loss, val_dice };

struct TrainSpec {
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  int epochs = 100;
  int batch_size = 4;
  double plateau_factor = 0.5;
  int plateau_patience = 5;
  double plateau_min_lr = 1e-6;
  std::uint64_t seed = 42;
  Monitor monitor = Monitor::val_loss;
  bool operator==(const TrainSpec&) const = default;
};

struct ExperimentConfig {
  BackboneSpec backbone;
  LoraSpec lora;
  DecoderSpec decoder;
  LossSpec loss;
  DataSpec data;
  TrainSpec train;
  bool operator==(const ExperimentConfig&) const = default;
};

/// Small ViT used for desk-scale runs and tests.
inline ExperimentConfig toy_config() {
  ExperimentConfig c;
  c.backbone.image_size = 64;
  c.backbone.patch_size = 4;
  c.backbone.embed_dim = 32;
  c.backbone.depth = 4;
  c.backbone.num_heads = 4;
  c.backbone.tap_indices = {2, 3, 4};
  c.lora.rank = 2;
  c.decoder.branch_channels = 16;
  c.train.learning_rate = 3e-3;
  c.train.batch_size = 4;
  c.train.epochs = 15;
  c.train.plateau_patience = 3;
  return c;
}

namespace detail {

inline void fail(const std::string& field, const std::string& what) { throw ConfigError(field, what); }

}  // namespace detail

/// Checks every invariant, throwing ConfigError naming the first violation.
inline void validate(const ExperimentConfig& c) {
  using detail::fail;
  const auto& b = c.backbone;
  if (b.image_size <= 0) fail("backbone.image_size", "must be positive");
  if (b.patch_size <= 0) fail("backbone.patch_size", "must be positive");
  if (b.image_size % b.patch_size != 0) fail("backbone.image_size", "must be divisible by patch_size");
  if (b.embed_dim <= 0) fail("backbone.embed_dim", "must be positive");
  if (b.depth <= 0) fail("backbone.depth", "must be positive");
  if (b.num_heads <= 0) fail("backbone.num_heads", "must be positive");
  if (b.embed_dim % b.num_heads != 0) fail("backbone.embed_dim", "must be divisible by num_heads");
  if (!(b.mlp_ratio > 0) || b.mlp_hidden() < 1) fail("backbone.mlp_ratio", "must give a positive hidden width");
  if (b.tap_indices.empty()) fail("backbone.tap_indices", "must not be empty");
  for (std::size_t i = 0; i < b.tap_indices.size(); ++i) {
    const int t = b.tap_indices[i];
    if (t < 1 || t > b.depth) fail("backbone.tap_indices", "tap index out of range");
    if (i > 0 && t <= b.tap_indices[i - 1]) fail("backbone.tap_indices", "must be strictly increasing");
  }
  if (b.pixel_mean.size() != 3) fail("backbone.pixel_mean", "must have 3 entries");
  if (b.pixel_std.size() != 3) fail("backbone.pixel_std", "must have 3 entries");
  for (double s : b.pixel_std)
    if (!(s > 0)) fail("backbone.pixel_std", "entries must be positive");

  const auto& l = c.lora;
  if (l.rank < 1) fail("lora.rank", "must be >= 1");
  if (l.rank > b.embed_dim) fail("lora.rank", "must be <= backbone.embed_dim");
  if (l.lora_alpha && !(*l.lora_alpha > 0)) fail("lora.lora_alpha", "must be positive");
  if (l.enabled && l.target_projections.empty()) fail("lora.target_projections", "must not be empty when enabled");
  std::set<Projection> seen;
  for (auto p : l.target_projections)
    if (!seen.insert(p).second) fail("lora.target_projections", "duplicate projection " + to_string(p));

  const auto& d = c.decoder;
  if (d.branch_channels < 1) fail("decoder.branch_channels", "must be >= 1");
  if (d.foreground_prior && !(*d.foreground_prior > 0 && *d.foreground_prior < 1)) {
    fail("decoder.foreground_prior", "must lie in the open interval (0, 1)");
  }

  const auto& s = c.loss;
  if (!(s.alpha >= 0)) fail("loss.alpha", "must be >= 0");
  if (!(s.beta >= 0)) fail("loss.beta", "must be >= 0");
  if (!(s.gamma > 0)) fail("loss.gamma", "must be > 0");
  if (!(s.epsilon > 0)) fail("loss.epsilon", "must be > 0");

  if (c.data.stride < 0) fail("data.stride", "must be >= 0");
  if (c.data.fold_experiment < 0 || c.data.fold_experiment > 2) fail("data.fold_experiment", "must be 0, 1 or 2");

  const auto& t = c.train;
  if (!(t.learning_rate > 0)) fail("train.learning_rate", "must be positive");
  if (!(t.weight_decay >= 0)) fail("train.weight_decay", "must be >= 0");
  if (t.epochs < 1) fail("train.epochs", "must be >= 1");
  if (t.batch_size < 1) fail("train.batch_size", "must be >= 1");
  if (!(t.plateau_factor > 0 && t.plateau_factor < 1)) fail("train.plateau_factor", "must lie in (0, 1)");
  if (t.plateau_patience < 0) fail("train.plateau_patience", "must be >= 0");
  if (!(t.plateau_min_lr >= 0)) fail("train.plateau_min_lr", "must be >= 0");
}

// ---------------------------------------------------------------------------
// JSON mapping

inline json to_json(const ExperimentConfig& c) {
  json j;
  const auto& b = c.backbone;
  j["backbone"] = {{"image_size", b.image_size},   {"patch_size", b.patch_size},
                   {"embed_dim", b.embed_dim},     {"depth", b.depth},
                   {"num_heads", b.num_heads},     {"mlp_ratio", b.mlp_ratio},
                   {"tap_indices", b.tap_indices}, {"pixel_mean", b.pixel_mean},
                   {"pixel_std", b.pixel_std},     {"init_seed", b.init_seed},
                   {"pretrained", b.pretrained},   {"pretrained_prefix", b.pretrained_prefix}};
  json targets = json::array();
  for (auto p : c.lora.target_projections) targets.push_back(to_string(p));
  j["lora"] = {{"enabled", c.lora.enabled},
               {"rank", c.lora.rank},
               {"lora_alpha", c.lora.lora_alpha ? json(*c.lora.lora_alpha) : json(nullptr)},
               {"target_projections", targets}};
  j["decoder"] = {{"branch_channels", c.decoder.branch_channels},
                  {"use_bias_prior", c.decoder.use_bias_prior},
                  {"foreground_prior", c.decoder.foreground_prior ? json(*c.decoder.foreground_prior) : json(nullptr)}};
  j["loss"] = {{"alpha", c.loss.alpha},
               {"beta", c.loss.beta},
               {"gamma", c.loss.gamma},
               {"epsilon", c.loss.epsilon},
               {"exponent", c.loss.exponent == TverskyExponent::power ? "power" : "inverse"}};
  j["data"] = {{"name", c.data.name},
               {"root", c.data.root},
               {"kind", to_string(c.data.kind)},
               {"manifest", c.data.manifest},
               {"stride", c.data.stride},
               {"split_seed", c.data.split_seed},
               {"fold_experiment", c.data.fold_experiment}};
  j["train"] = {{"learning_rate", c.train.learning_rate},
                {"weight_decay", c.train.weight_decay},
                {"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"plateau_factor", c.train.plateau_factor},
                {"plateau_patience", c.train.plateau_patience},
                {"plateau_min_lr", c.train.plateau_min_lr},
                {"seed", c.train.seed},
                {"monitor", c.train.monitor == Monitor::val_loss ? "val_loss" : "val_dice"}};
  return j;
}

namespace detail {

/// Reads one section, rejecting keys the schema does not know.
class SectionReader {
 public:
  SectionReader(const json& root, std::string section) : section_(std::move(section)) {
    if (!root.contains(section_)) return;
    obj_ = &root.at(section_);
    if (!obj_->is_object()) fail(section_, "must be a table");
    for (const auto& [k, v] : obj_->items()) pending_.insert(k);
  }

  template <typename V>
  void read(const std::string& key, V& out) {
    if (!obj_ || !obj_->contains(key)) return;
    pending_.erase(key);
    const json& v = obj_->at(key);
    try {
      if constexpr (std::is_same_v<V, int>) {
        if (!v.is_number_integer()) throw std::invalid_argument("expected an integer");
        out = v.get<int>();
      } else if constexpr (std::is_same_v<V, std::uint64_t>) {
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) throw std::invalid_argument("expected a non-negative integer");
        out = v.get<std::uint64_t>();
      } else if constexpr (std::is_same_v<V, double>) {
        if (!v.is_number()) throw std::invalid_argument("expected a number");
        out = v.get<double>();
      } else if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) throw std::invalid_argument("expected true or false");
        out = v.get<bool>();
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!v.is_string()) throw std::invalid_argument("expected a string");
        out = v.get<std::string>();
      } else if constexpr (std::is_same_v<V, std::optional<double>>) {
        if (v.is_null()) {
          out.reset();
        } else {
          if (!v.is_number()) throw std::invalid_argument("expected a number or null");
          out = v.get<double>();
        }
      } else if constexpr (std::is_same_v<V, std::vector<int>>) {
        if (!v.is_array()) throw std::invalid_argument("expected an array of integers");
        out.clear();
        for (const auto& e : v) {
          if (!e.is_number_integer()) throw std::invalid_argument("expected an array of integers");
          out.push_back(e.get<int>());
        }
      } else if constexpr (std::is_same_v<V, std::vector<double>>) {
        if (!v.is_array()) throw std::invalid_argument("expected an array of numbers");
        out.clear();
        for (const auto& e : v) {
          if (!e.is_number()) throw std::invalid_argument("expected an array of numbers");
          out.push_back(e.get<double>());
        }
      } else if constexpr (std::is_same_v<V, std::vector<std::string>>) {
        if (!v.is_array()) throw std::invalid_argument("expected an array of strings");
        out.clear();
        for (const auto& e : v) {
          if (!e.is_string()) throw std::invalid_argument("expected an array of strings");
          out.push_back(e.get<std::string>());
        }
      } else {
        static_assert(sizeof(V) == 0, "unsupported config field type");
      }
    } catch (const std::invalid_argument& e) {
      fail(section_ + "." + key, e.what());
    }
  }

  void finish() const {
    if (!pending_.empty()) fail(section_ + "." + *pending_.begin(), "unknown key");
  }

 private:
  std::string section_;
  const json* obj_ = nullptr;
  std::set<std::string> pending_;
};

}  // namespace detail

inline ExperimentConfig from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("", "config root must be a table");
  static const std::set<std::string> sections{"backbone", "lora", "decoder", "loss", "data", "train"};
  for (const auto& [k, v] : j.items())
    if (!sections.count(k)) throw ConfigError(k, "unknown section");

  ExperimentConfig c;
  {
    detail::SectionReader r(j, "backbone");
    auto& b = c.backbone;
    r.read("image_size", b.image_size);
    r.read("patch_size", b.patch_size);
    r.read("embed_dim", b.embed_dim);
    r.read("depth", b.depth);
    r.read("num_heads", b.num_heads);
    r.read("mlp_ratio", b.mlp_ratio);
    r.read("tap_indices", b.tap_indices);
    r.read("pixel_mean", b.pixel_mean);
    r.read("pixel_std", b.pixel_std);
    r.read("init_seed", b.init_seed);
    r.read("pretrained", b.pretrained);
    r.read("pretrained_prefix", b.pretrained_prefix);
    r.finish();
  }
  {
    detail::SectionReader r(j, "lora");
    r.read("enabled", c.lora.enabled);
    r.read("rank", c.lora.rank);
    r.read("lora_alpha", c.lora.lora_alpha);
    std::vector<std::string> targets;
    bool have_targets = j.contains("lora") && j["lora"].contains("target_projections");
    r.read("target_projections", targets);
    if (have_targets) {
      c.lora.target_projections.clear();
      for (const auto& t : targets) c.lora.target_projections.push_back(projection_from_string(t, "lora.target_projections"));
    }
    r.finish();
  }
  {
    detail::SectionReader r(j, "decoder");
    r.read("branch_channels", c.decoder.branch_channels);
    r.read("use_bias_prior", c.decoder.use_bias_prior);
    r.read("foreground_prior", c.decoder.foreground_prior);
    r.finish();
  }
  {
    detail::SectionReader r(j, "loss");
    r.read("alpha", c.loss.alpha);
    r.read("beta", c.loss.beta);
    r.read("gamma", c.loss.gamma);
    r.read("epsilon", c.loss.epsilon);
    std::string exponent = c.loss.exponent == TverskyExponent::power ? "power" : "inverse";
    r.read("exponent", exponent);
    if (exponent == "power") c.loss.exponent = TverskyExponent::power;
    else if (exponent == "inverse") c.loss.exponent = TverskyExponent::inverse;
    else throw ConfigError("loss.exponent", "expected 'power' or 'inverse'");
    r.finish();
  }
  {
    detail::SectionReader r(j, "data");
    r.read("name", c.data.name);
    r.read("root", c.data.root);
    std::string kind = to_string(c.data.kind);
    r.read("kind", kind);
    c.data.kind = dataset_kind_from_string(kind);
    r.read("manifest", c.data.manifest);
    r.read("stride", c.data.stride);
    r.read("split_seed", c.data.split_seed);
    r.read("fold_experiment", c.data.fold_experiment);
    r.finish();
  }
  {
    detail::SectionReader r(j, "train");
    r.read("learning_rate", c.train.learning_rate);
    r.read("weight_decay", c.train.weight_decay);
    r.read("epochs", c.train.epochs);
    r.read("batch_size", c.train.batch_size);
    r.read("plateau_factor", c.train.plateau_factor);
    r.read("plateau_patience", c.train.plateau_patience);
    r.read("plateau_min_lr", c.train.plateau_min_lr);
    r.read("seed", c.train.seed);
    std::string monitor = c.train.monitor == Monitor::val_loss ? "val_loss" : "val_dice";
    r.read("monitor", monitor);
    if (monitor == "val_loss") c.train.monitor = Monitor::val_loss;
    else if (monitor == "val_dice") c.train.monitor = Monitor::val_dice;
    else throw ConfigError("train.monitor", "expected 'val_loss' or 'val_dice'");
    r.finish();
  }
  return c;
}

/// Applies `section.key=value` overrides. The value is parsed as JSON when
/// possible (numbers, booleans, arrays, null) and taken as a string otherwise.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like section.key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  const auto dot = path.find('.');
  if (dot == std::string::npos || path.find('.', dot + 1) != std::string::npos) {
    throw ConfigError(path, "override path must be section.key");
  }
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  const std::string section = path.substr(0, dot), key = path.substr(dot + 1);
  if (!j.contains(section)) j[section] = json::object();
  j[section][key] = value;
}

inline ExperimentConfig parse_config(const std::string& text, const std::vector<std::string>& overrides = {}) {
  json j;
  try {
    j = json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("parse error: ") + e.what());
  }
  for (const auto& o : overrides) apply_override(j, o);
  ExperimentConfig c = from_json(j);
  validate(c);
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides);
}

inline std::string dump_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

inline void save_config(const ExperimentConfig& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config file " + path.string());
  out << dump_config(c);
}

/// Digest of the fields that determine model structure and the frozen
/// weights. Checkpoints record it; loading into a different architecture
/// fails on mismatch.
inline std::string architecture_digest(const ExperimentConfig& c) {
  json j = to_json(c);
  json arch;
  arch["backbone"] = j["backbone"];
  arch["backbone"].erase("pixel_mean");
  arch["backbone"].erase("pixel_std");
  arch["lora"] = j["lora"];
  arch["lora"]["lora_alpha"] = c.lora.scale() * c.lora.rank;
  arch["decoder"] = {{"branch_channels", c.decoder.branch_channels}};
  return sha256_hex(arch.dump());
}

// ---------------------------------------------------------------------------
// Parameter accounting

struct ParamCount {
  std::size_t lora = 0;
  std::size_t decoder = 0;
  std::size_t total = 0;
  bool operator==(const ParamCount&) const = default;
};

/// Analytic trainable-parameter count.
///
/// Adapters: depth * |targets| * 2 * embed_dim * rank.
/// Per decoder branch: 1x1 projection (E*C + C), two bias-free 3x3 convs
/// (2 * 9*C*C), two batch-norm affine pairs (2 * 2*C). Fusion head:
/// n_taps*C weights + 1 bias.
inline ParamCount count_trainable_params(const ExperimentConfig& c) {
  validate(c);
  ParamCount p;
  const std::size_t E = c.backbone.embed_dim, C = c.decoder.branch_channels, n = c.backbone.tap_indices.size();
  if (c.lora.enabled) {
    p.lora = static_cast<std::size_t>(c.backbone.depth) * c.lora.target_projections.size() * 2 * E *
             static_cast<std::size_t>(c.lora.rank);
  }
  const std::size_t branch = (E * C + C) + 2 * (9 * C * C) + 2 * (2 * C);
  p.decoder = n * branch + (n * C + 1);
  p.total = p.lora + p.decoder;
  return p;
}

}  // namespace nucleisam
