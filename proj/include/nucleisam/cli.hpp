#pragma once

// Command-line front end. Exit codes: 0 success, 1 runtime failure,
// 2 usage error, 3 configuration error. Failures print one JSON line on
// stderr; successful commands print one JSON summary line on stdout.
// Logs go to stderr.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "nucleisam/config.hpp"
#include "nucleisam/data.hpp"
#include "nucleisam/evaluator.hpp"
#include "nucleisam/trainer.hpp"

namespace nucleisam::cli {

inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConfig = 3;
inline constexpr const char* kCheckpointDirEnv = "NUCLEISAM_CHECKPOINT_DIR";

using Model = float;  // precision of every CLI run

namespace detail {

inline std::optional<Split> parse_split(const std::string& s) {
  if (s == "all") return std::nullopt;
  return split_from_string(s);
}

inline std::string error_line(const std::string& kind, const std::string& message, const std::string& field = {}) {
  nlohmann::json j{{"error", kind}, {"message", message}};
  if (!field.empty()) j["field"] = field;
  return j.dump();
}

inline nlohmann::json report_json(const MetricsReport& r) {
  nlohmann::json j{{"images", r.rows.size()}, {"dice", r.mean_dice}, {"iou", r.mean_iou}};
  if (r.overall) {
    j["fold_mean_dice"] = r.overall->first;
    j["fold_mean_iou"] = r.overall->second;
  }
  return j;
}

inline nlohmann::json table_json(const ResultTable& t) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [key, v] : t.cells) j[key.first][key.second] = {{"dice", v.first}, {"iou", v.second}};
  return j;
}

/// Writes each padded tile of every sample as PNG under <out>/patches.
inline std::map<std::string, std::size_t> materialize_patches(const DatasetManifest& m, const ExperimentConfig& c,
                                                              const std::filesystem::path& out) {
  std::map<std::string, std::size_t> counts;
  const int P = c.backbone.image_size;
  for (const auto& s : m.samples) {
    const auto loaded = load_sample(m, s);
    if (loaded.image.rows * 4 < P || loaded.image.cols * 4 < P) throw DataError("image '" + s.id + "' is smaller than a quarter patch");
    const auto g = tile_grid(loaded.image.rows, loaded.image.cols, P, c.data.stride);
    const cv::Mat img = pad_to_grid(loaded.image, g), msk = pad_to_grid(loaded.mask, g);
    for (int r = 0; r < g.rows; ++r)
      for (int col = 0; col < g.cols; ++col) {
        const cv::Rect roi(col * g.stride, r * g.stride, P, P);
        const std::string stem = file_safe(s.id) + "_r" + std::to_string(roi.y) + "_c" + std::to_string(roi.x);
        const auto dir = out / "patches" / to_string(s.split);
        write_png(dir / "images" / (stem + ".png"), img(roi));
        write_png(dir / "masks" / (stem + ".png"), msk(roi) * 255);
        ++counts[to_string(s.split)];
      }
  }
  return counts;
}

}  // namespace detail

/// Parses argv and runs one subcommand.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Prompt-free nuclei segmentation with a LoRA-adapted ViT encoder", "nucleisam"};
  app.require_subcommand(1, 1);

  std::string config_path, out_dir, checkpoint, split_name = "test", variants_csv, name = "LoRA-SAM";
  std::vector<std::string> overrides, models, inputs;
  std::size_t workers = 1, overlays = 0;
  bool resume = false, all_images = false, write_prob = false;
  BlobOptions blobs;
  std::uint64_t split_seed = 42;

  auto add_config = [&](CLI::App* sc, bool required) {
    auto* o = sc->add_option("--config", config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
    if (required) o->required();
    sc->add_option("--set", overrides, "Override, e.g. --set lora.rank=8 (repeatable)");
  };
  auto add_workers = [&](CLI::App* sc) { sc->add_option("--workers", workers, "Data-pipeline threads")->check(CLI::PositiveNumber); };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic blob dataset");
  synth->add_option("--out", out_dir, "Dataset root to create")->required();
  synth->add_option("--n", blobs.count, "Number of images")->check(CLI::PositiveNumber);
  synth->add_option("--seed", blobs.seed, "Generator seed");
  synth->add_option("--size", blobs.image_size, "Image side length");
  synth->add_option("--min-fg", blobs.min_foreground, "Lower foreground-ratio bound");
  synth->add_option("--max-fg", blobs.max_foreground, "Upper foreground-ratio bound");
  synth->add_option("--noise", blobs.noise, "Pixel noise std (0-255 scale)");
  synth->add_option("--prefix", blobs.prefix, "File name prefix");
  synth->add_option("--split-seed", split_seed, "Seed of the 80/10/10 split");

  auto* prep = app.add_subcommand("prepare-data", "Build the manifest and write patches");
  add_config(prep, true);
  prep->add_option("--out", out_dir, "Output directory")->required();
  add_workers(prep);

  auto* train_cmd = app.add_subcommand("train", "Train adapters and decoder");
  add_config(train_cmd, true);
  train_cmd->add_option("--out", out_dir, "Run directory")->required();
  train_cmd->add_flag("--resume", resume, "Continue from the last checkpoint");
  add_workers(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on full images");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  add_config(eval_cmd, false);
  eval_cmd->add_option("--out", out_dir, "Output directory")->required();
  eval_cmd->add_option("--split", split_name, "train, val, test or all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  eval_cmd->add_option("--overlays", overlays, "Number of overlay triptychs to export");
  eval_cmd->add_option("--name", name, "Row label in the report");
  add_workers(eval_cmd);

  auto* cross = app.add_subcommand("cross-eval", "Transfer matrix over several trained models");
  cross->add_option("--model", models, "NAME=CHECKPOINT (repeatable)")->required();
  cross->add_option("--out", out_dir, "Output directory")->required();
  cross->add_flag("--all-images", all_images, "Score targets on all images instead of their test split");
  add_workers(cross);

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate ablation variants");
  add_config(ablate, true);
  ablate->add_option("--out", out_dir, "Output directory")->required();
  ablate->add_option("--variants", variants_csv, "Comma-separated subset of no_lora,no_bias_prior,single_level,dual_level,full");
  add_workers(ablate);

  auto* predict = app.add_subcommand("predict", "Segment images with a checkpoint");
  predict->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  predict->add_option("--out", out_dir, "Output directory")->required();
  predict->add_flag("--prob", write_prob, "Also write 16-bit probability maps");
  predict->add_option("inputs", inputs, "Input images")->required()->check(CLI::ExistingFile);

  auto* report = app.add_subcommand("report", "Regenerate Markdown tables from report CSVs");
  report->add_option("--out", out_dir, "Output directory holding reports/")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    const auto parsed = app.get_subcommands();
    out << app.help(parsed.empty() ? "" : parsed.front()->get_name());
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << detail::error_line("usage", e.what()) << "\n" << app.help();
    return kExitUsage;
  }

  auto* sc = app.get_subcommands().front();
  const std::string cmd = sc->get_name();
  try {
    nlohmann::json summary{{"command", cmd}};
    if (cmd == "synth") {
      const auto m = synth_blobs(out_dir, blobs, split_seed);
      summary["root"] = m.root;
      summary["samples"] = m.samples.size();
      summary["manifest"] = (std::filesystem::path(out_dir) / "manifest.json").string();
      summary["digest"] = m.digest();
    } else if (cmd == "prepare-data") {
      const auto c = load_config(config_path, overrides);
      auto m = manifest_for(c.data);
      m.validate_files();
      std::filesystem::create_directories(out_dir);
      m.save(std::filesystem::path(out_dir) / "manifest.json");
      const auto counts = detail::materialize_patches(m, c, out_dir);
      const auto train_patches = extract_patches(m, c.backbone, c.data.stride, Split::train, workers);
      summary["manifest"] = (std::filesystem::path(out_dir) / "manifest.json").string();
      summary["digest"] = m.digest();
      summary["images"] = {{"train", m.count(Split::train)}, {"val", m.count(Split::val)}, {"test", m.count(Split::test)}};
      summary["patches"] = counts;
      if (!train_patches.empty()) summary["foreground_prior"] = estimate_foreground_prior(train_patches);
    } else if (cmd == "train") {
      const auto c = load_config(config_path, overrides);
      TrainOptions opt;
      opt.out_dir = out_dir;
      if (const char* env = std::getenv(kCheckpointDirEnv); env && *env) opt.checkpoint_dir = env;
      opt.resume = resume;
      opt.workers = workers;
      opt.progress = &err;
      const auto r = train<Model>(c, opt);
      summary["epochs"] = r.log.size();
      summary["best_epoch"] = r.best_epoch;
      summary["best_value"] = r.best_value;
      summary["best_checkpoint"] = r.best_checkpoint.string();
      summary["foreground_prior"] = *r.config.decoder.foreground_prior;
      summary["trainable_parameters"] = r.optimizer_parameters;
    } else if (cmd == "eval") {
      EvalJob job;
      job.checkpoint = checkpoint;
      job.out_dir = out_dir;
      job.split = detail::parse_split(split_name);
      job.overlays = overlays;
      job.workers = workers;
      job.model_name = name;
      if (!config_path.empty()) {
        const auto c = load_config(config_path, overrides);
        check_compatible(Archive::load(checkpoint), c);
        job.manifest = manifest_for(c.data);
      }
      summary["report"] = detail::report_json(run_eval<Model>(job));
    } else if (cmd == "cross-eval") {
      std::vector<TransferSource> sources;
      std::vector<TransferTarget> targets;
      for (const auto& spec : models) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--model", "expected NAME=CHECKPOINT, got '" + spec + "'");
        TransferSource s{spec.substr(0, eq), spec.substr(eq + 1)};
        if (!std::filesystem::exists(s.checkpoint)) {
          throw EvaluationError("missing checkpoint for source '" + s.name + "': " + s.checkpoint.string());
        }
        auto m = manifest_for(checkpoint_config(Archive::load(s.checkpoint)).data);
        targets.push_back({s.name, std::move(m)});
        sources.push_back(std::move(s));
      }
      const auto t = cross_eval<Model>(sources, targets, all_images, workers);
      write_table(out_dir, "transfer", t);
      summary["matrix"] = detail::table_json(t);
    } else if (cmd == "ablate") {
      const auto c = load_config(config_path, overrides);
      std::vector<Variant> vs;
      if (variants_csv.empty()) {
        vs = all_variants();
      } else {
        std::stringstream ss(variants_csv);
        std::string v;
        while (std::getline(ss, v, ',')) vs.push_back(variant_from_string(v));
      }
      const auto results = run_ablation<Model>(c, vs, out_dir, workers, &err);
      for (const auto& r : results) summary["variants"][to_string(r.variant)] = detail::report_json(r.report);
    } else if (cmd == "predict") {
      auto model = restore_model<Model>(checkpoint);
      auto& files = summary["outputs"] = nlohmann::json::array();
      for (const auto& in : inputs) {
        const cv::Mat prob = predict_probabilities(model, read_image(in));
        const auto stem = std::filesystem::path(in).stem().string();
        const auto mask_path = std::filesystem::path(out_dir) / (stem + "_mask.png");
        write_png(mask_path, threshold_mask(prob) * 255);
        files.push_back(mask_path.string());
        if (write_prob) {
          cv::Mat p16;
          prob.convertTo(p16, CV_16U, 65535.0);
          const auto prob_path = std::filesystem::path(out_dir) / (stem + "_prob.png");
          write_png(prob_path, p16);
          files.push_back(prob_path.string());
        }
      }
    } else if (cmd == "report") {
      auto& written = summary["written"] = nlohmann::json::array();
      const std::vector<std::tuple<std::string, std::string, std::string>> kinds{
          {"benchmark", "In-domain segmentation", "Model"},
          {"transfer", "Cross-dataset transfer (rows: trained on, columns: tested on)", "Trained on"},
          {"ablation", "Ablation", "Variant"}};
      for (const auto& [stem, title, header] : kinds) {
        const auto csv = std::filesystem::path(out_dir) / "reports" / (stem + ".csv");
        if (!std::filesystem::exists(csv)) continue;
        std::ifstream in(csv);
        std::stringstream ss;
        ss << in.rdbuf();
        auto t = ResultTable::from_csv(ss.str(), title);
        t.row_header = header;
        write_text(std::filesystem::path(out_dir) / "reports" / (stem + ".md"), t.markdown());
        written.push_back(stem + ".md");
      }
    }
    out << summary.dump() << std::endl;
    return 0;
  } catch (const ConfigError& e) {
    err << detail::error_line("config", e.what(), e.field()) << std::endl;
    return kExitConfig;
  } catch (const std::exception& e) {
    err << detail::error_line("runtime", e.what()) << std::endl;
    return kExitRuntime;
  }
}

}  // namespace nucleisam::cli
