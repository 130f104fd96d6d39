#pragma once

// Training loop over adapters + decoder with plateau scheduling, per-epoch
// validation, CSV logging and joint checkpoints (best.ckpt / last.ckpt).
// Checkpoints never hold frozen encoder tensors; they record the encoder
// digest instead so a restore can verify it rebuilt the same weights.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "nucleisam/archive.hpp"
#include "nucleisam/config.hpp"
#include "nucleisam/data.hpp"
#include "nucleisam/metrics.hpp"
#include "nucleisam/model.hpp"
#include "nucleisam/objective.hpp"
#include "nucleisam/optim.hpp"

namespace nucleisam {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0, val_loss = 0, val_dice = 0, lr = 0;
  bool operator==(const EpochLog&) const = default;
};

inline constexpr const char* kLogHeader = "epoch,train_loss,val_loss,val_dice,lr";

/// Values use round-trip precision so a resumed run reloads the exact history.
inline std::string log_csv(const std::vector<EpochLog>& rows) {
  std::ostringstream os;
  os << std::setprecision(17) << kLogHeader << "\n";
  for (const auto& r : rows) {
    os << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.val_dice << ',' << r.lr << "\n";
  }
  return os.str();
}

inline std::vector<EpochLog> parse_log_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != kLogHeader) throw TrainingError("training log has unexpected header '" + line + "'");
  std::vector<EpochLog> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochLog r;
    char c;
    std::istringstream ls(line);
    if (!(ls >> r.epoch >> c >> r.train_loss >> c >> r.val_loss >> c >> r.val_dice >> c >> r.lr)) {
      throw TrainingError("bad training log line '" + line + "'");
    }
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace detail {

inline double parse_exact(const std::string& s) { return std::stod(s); }

inline const std::string& meta(const Archive& a, const std::string& key) {
  auto it = a.metadata.find(key);
  if (it == a.metadata.end()) throw CheckpointError("checkpoint metadata lacks '" + key + "'");
  return it->second;
}

}  // namespace detail

/// Config stored in a checkpoint.
inline ExperimentConfig checkpoint_config(const Archive& a) {
  if (a.metadata.count("component") == 0 || a.metadata.at("component") != "checkpoint") {
    throw CheckpointError("archive is not a training checkpoint");
  }
  auto c = parse_config(detail::meta(a, "config"));
  if (architecture_digest(c) != detail::meta(a, "architecture_digest")) {
    throw CheckpointError("checkpoint config does not match its recorded architecture digest");
  }
  return c;
}

/// Throws unless `config` describes the architecture stored in `a`.
inline void check_compatible(const Archive& a, const ExperimentConfig& config) {
  if (architecture_digest(config) != detail::meta(a, "architecture_digest")) {
    throw CheckpointError("architecture digest mismatch: checkpoint was trained with a different model configuration");
  }
}

/// Rebuilds a model from a checkpoint: frozen encoder from the stored
/// config, then adapter and decoder tensors from the archive.
template <typename T>
SegmentationModel<T> restore_model(const Archive& a) {
  SegmentationModel<T> model(checkpoint_config(a));
  if (model.encoder().digest() != detail::meta(a, "encoder_digest_" + std::string(dtype_name(dtype_of<T>())))) {
    throw CheckpointError("frozen encoder weights differ from those used in training");
  }
  model.load_trainable_state(a);
  return model;
}

template <typename T>
SegmentationModel<T> restore_model(const std::filesystem::path& path) {
  return restore_model<T>(Archive::load(path));
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::filesystem::path out_dir;         // log.csv and the resolved config
  std::filesystem::path checkpoint_dir;  // empty = <out_dir>/checkpoints
  bool resume = false;                   // continue from last.ckpt
  int stop_after_epoch = 0;              // 0 = run all configured epochs
  std::size_t workers = 1;
  std::ostream* progress = nullptr;      // one line per epoch
};

struct TrainResult {
  ExperimentConfig config;  // with the foreground prior filled in
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_value = 0;
  std::filesystem::path best_checkpoint, last_checkpoint;
  std::string encoder_digest_before, encoder_digest_after;
  std::size_t optimizer_parameters = 0;
};

struct TrainingData {
  std::vector<PatchRecord> train, val;
};

inline TrainingData load_training_data(const ExperimentConfig& c, std::size_t workers = 1) {
  auto manifest = manifest_for(c.data);
  manifest.validate_files();
  TrainingData d;
  d.train = extract_patches(manifest, c.backbone, c.data.stride, Split::train, workers);
  d.val = extract_patches(manifest, c.backbone, c.data.stride, Split::val, workers);
  if (d.train.empty()) throw DataError("training split is empty");
  if (d.val.empty()) throw DataError("validation split is empty");
  return d;
}

/// Fills in the foreground prior from the training patches when unset.
inline ExperimentConfig resolve_prior(ExperimentConfig c, const TrainingData& d) {
  if (!c.decoder.foreground_prior) c.decoder.foreground_prior = estimate_foreground_prior(d.train);
  validate(c);
  return c;
}

struct ValidationResult {
  double loss = 0, dice = 0;
};

/// Mean per-patch loss and Dice at threshold 0.5, eval mode.
template <typename T>
ValidationResult validate_patches(SegmentationModel<T>& model, std::span<const PatchRecord> patches,
                                  const LossSpec& loss, std::size_t batch) {
  ValidationResult r;
  const int P = model.config().backbone.image_size;
  for (std::size_t s = 0; s < patches.size(); s += batch) {
    std::vector<const PatchRecord*> sel;
    for (std::size_t i = s; i < std::min(patches.size(), s + batch); ++i) sel.push_back(&patches[i]);
    auto [images, masks] = make_batch<T>(sel, P);
    const auto probs = model.forward(images, Mode::eval).value();
    r.loss += focal_tversky_value(probs, masks, loss) * static_cast<double>(sel.size());
    const std::size_t n = static_cast<std::size_t>(P) * P;
    for (std::size_t b = 0; b < sel.size(); ++b) {
      BinaryMaskPair pair{static_cast<std::size_t>(P), static_cast<std::size_t>(P), std::vector<std::uint8_t>(n),
                          sel[b]->mask};
      for (std::size_t i = 0; i < n; ++i) pair.prediction[i] = probs[b * n + i] >= T(0.5);
      r.dice += dice(pair);
    }
  }
  r.loss /= static_cast<double>(patches.size());
  r.dice /= static_cast<double>(patches.size());
  return r;
}

template <typename T>
class Trainer {
 public:
  Trainer(const ExperimentConfig& resolved, TrainOptions options)
      : config_(resolved),
        opt_(options),
        model_(config_),
        optimizer_(model_.trainable_parameters(), config_.train.learning_rate, config_.train.weight_decay),
        scheduler_(config_.train.learning_rate,
                   config_.train.monitor == Monitor::val_loss ? ReduceLROnPlateau::Direction::minimize
                                                              : ReduceLROnPlateau::Direction::maximize,
                   config_.train.plateau_factor, config_.train.plateau_patience, config_.train.plateau_min_lr) {
    if (opt_.checkpoint_dir.empty()) opt_.checkpoint_dir = opt_.out_dir / "checkpoints";
    best_value_ = config_.train.monitor == Monitor::val_loss ? std::numeric_limits<double>::infinity()
                                                             : -std::numeric_limits<double>::infinity();
  }

  SegmentationModel<T>& model() { return model_; }
  AdamW<T>& optimizer() { return optimizer_; }
  const std::vector<EpochLog>& log() const { return log_; }

  /// One optimizer step on a batch; returns the batch loss.
  double train_step(const Tensor<T>& images, const Tensor<T>& masks) {
    optimizer_.zero_grad();
    auto loss = focal_tversky(model_.forward(images, Mode::train), masks, config_.loss);
    const double value = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(value)) return value;
    backward(loss);
    optimizer_.step();
    return value;
  }

  TrainResult run(const TrainingData& data) {
    std::filesystem::create_directories(opt_.out_dir);
    std::filesystem::create_directories(opt_.checkpoint_dir);
    save_config(config_, opt_.out_dir / "config.resolved.json");
    TrainResult result;
    result.encoder_digest_before = model_.encoder().digest();
    result.optimizer_parameters = optimizer_.parameter_count();
    int start = 1;
    if (opt_.resume) start = restore_last() + 1;

    const int last_epoch = opt_.stop_after_epoch > 0 ? std::min(opt_.stop_after_epoch, config_.train.epochs)
                                                     : config_.train.epochs;
    const auto B = static_cast<std::size_t>(config_.train.batch_size);
    const int P = config_.backbone.image_size;
    for (int epoch = start; epoch <= last_epoch; ++epoch) {
      const double lr = scheduler_.lr();
      optimizer_.lr = lr;
      std::vector<std::size_t> order(data.train.size());
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(derive_seed(config_.train.seed, 1000 + static_cast<std::uint64_t>(epoch)));
      std::shuffle(order.begin(), order.end(), rng);
      double total = 0;
      for (std::size_t s = 0; s < order.size(); s += B) {
        std::vector<const PatchRecord*> sel;
        for (std::size_t i = s; i < std::min(order.size(), s + B); ++i) sel.push_back(&data.train[order[i]]);
        auto [images, masks] = make_batch<T>(sel, P);
        const double loss = train_step(images, masks);
        if (!std::isfinite(loss)) dump_and_abort(epoch, s / B, sel, loss);
        total += loss * static_cast<double>(sel.size());
      }
      const auto val = validate_patches(model_, data.val, config_.loss, B);
      const EpochLog row{epoch, total / static_cast<double>(order.size()), val.loss, val.dice, lr};
      log_.push_back(row);
      const double monitored = config_.train.monitor == Monitor::val_loss ? val.loss : val.dice;
      scheduler_.step(monitored);
      const bool better = config_.train.monitor == Monitor::val_loss ? monitored < best_value_ : monitored > best_value_;
      if (better) {
        best_value_ = monitored;
        best_epoch_ = epoch;
        checkpoint(epoch).save(opt_.checkpoint_dir / "best.ckpt");
      }
      checkpoint(epoch).save(opt_.checkpoint_dir / "last.ckpt");
      write_file_atomic(opt_.out_dir / "log.csv", log_csv(log_));
      if (opt_.progress) {
        *opt_.progress << "epoch " << epoch << "/" << config_.train.epochs << " train_loss "
                       << format_metric(row.train_loss) << " val_loss " << format_metric(row.val_loss) << " val_dice "
                       << format_metric(row.val_dice) << " lr " << format_metric(lr) << std::endl;
      }
    }
    result.config = config_;
    result.log = log_;
    result.best_epoch = best_epoch_;
    result.best_value = best_value_;
    result.best_checkpoint = opt_.checkpoint_dir / "best.ckpt";
    result.last_checkpoint = opt_.checkpoint_dir / "last.ckpt";
    result.encoder_digest_after = model_.encoder().digest();
    if (result.encoder_digest_after != result.encoder_digest_before) {
      throw TrainingError("frozen encoder weights changed during training");
    }
    return result;
  }

  Archive checkpoint(int epoch) {
    Archive a = model_.trainable_state();
    optimizer_.save_state(a);
    scheduler_.save_state(a);
    a.metadata["component"] = "checkpoint";
    a.metadata["config"] = dump_config(config_);
    a.metadata["architecture_digest"] = architecture_digest(config_);
    a.metadata["encoder_digest_" + std::string(dtype_name(dtype_of<T>()))] = model_.encoder().digest();
    a.metadata["epoch"] = std::to_string(epoch);
    a.metadata["best_epoch"] = std::to_string(best_epoch_);
    a.metadata["best_value"] = ReduceLROnPlateau::exact(best_value_);
    a.metadata["log"] = log_csv(log_);
    return a;
  }

 private:
  int restore_last() {
    const auto path = opt_.checkpoint_dir / "last.ckpt";
    if (!std::filesystem::exists(path)) throw CheckpointError("cannot resume: no checkpoint at " + path.string());
    const Archive a = Archive::load(path);
    check_compatible(a, config_);
    model_.load_trainable_state(a);
    optimizer_.load_state(a);
    scheduler_.load_state(a);
    log_ = parse_log_csv(detail::meta(a, "log"));
    best_epoch_ = std::stoi(detail::meta(a, "best_epoch"));
    best_value_ = detail::parse_exact(detail::meta(a, "best_value"));
    return std::stoi(detail::meta(a, "epoch"));
  }

  [[noreturn]] void dump_and_abort(int epoch, std::size_t batch, const std::vector<const PatchRecord*>& sel,
                                   double loss) {
    nlohmann::json j;
    j["epoch"] = epoch;
    j["batch"] = batch;
    j["loss"] = std::isnan(loss) ? "nan" : (loss > 0 ? "inf" : "-inf");
    j["lr"] = optimizer_.lr;
    j["optimizer_step"] = optimizer_.step_count();
    auto& ids = j["samples"] = nlohmann::json::array();
    for (const auto* p : sel) ids.push_back(p->sample_id + "@" + std::to_string(p->row) + "," + std::to_string(p->col));
    auto& bad = j["non_finite_parameters"] = nlohmann::json::array();
    for (const auto& p : model_.trainable_parameters()) {
      for (const T v : p.var.value().data)
        if (!std::isfinite(static_cast<double>(v))) {
          bad.push_back(p.name);
          break;
        }
    }
    write_file_atomic(opt_.out_dir / "nan_dump.json", j.dump(2) + "\n");
    model_.trainable_state().save(opt_.out_dir / "nan_dump.ckpt");
    throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(batch) +
                        "; state dumped to " + (opt_.out_dir / "nan_dump.json").string());
  }

  ExperimentConfig config_;
  TrainOptions opt_;
  SegmentationModel<T> model_;
  AdamW<T> optimizer_;
  ReduceLROnPlateau scheduler_;
  std::vector<EpochLog> log_;
  int best_epoch_ = 0;
  double best_value_;
};

/// Loads the data named by the config, resolves the prior and trains.
template <typename T>
TrainResult train(const ExperimentConfig& config, const TrainOptions& options) {
  validate(config);
  const auto data = load_training_data(config, options.workers);
  Trainer<T> trainer(resolve_prior(config, data), options);
  return trainer.run(data);
}

}  // namespace nucleisam
