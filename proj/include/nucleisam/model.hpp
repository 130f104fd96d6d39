#pragma once

// Full segmentation model: frozen encoder + adapters + residual decoder.

#include <map>
#include <set>
#include <string>
#include <vector>

#include "nucleisam/backbone.hpp"
#include "nucleisam/config.hpp"
#include "nucleisam/decoder.hpp"
#include "nucleisam/lora.hpp"

namespace nucleisam {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline const ExperimentConfig& validated(const ExperimentConfig& c) {
  validate(c);
  return c;
}

template <typename T>
class SegmentationModel {
 public:
  /// Builds the frozen encoder (from backbone.pretrained when given, else
  /// from backbone.init_seed), then adapters and decoder seeded by
  /// train.seed.
  explicit SegmentationModel(const ExperimentConfig& config)
      : config_(validated(config)),
        encoder_(config.backbone),
        decoder_(config.backbone, config.decoder, config.train.seed) {
    if (!config_.backbone.pretrained.empty()) {
      encoder_.load_pretrained(config_.backbone.pretrained, sam_name_map(config_.backbone.pretrained_prefix));
    }
    encoder_.freeze();
    if (config_.lora.enabled) adapters_ = inject(encoder_, config_.lora, config_.train.seed);
  }

  SegmentationModel(const SegmentationModel&) = delete;
  SegmentationModel& operator=(const SegmentationModel&) = delete;
  SegmentationModel(SegmentationModel&&) noexcept = default;

  const ExperimentConfig& config() const { return config_; }
  ViTEncoder<T>& encoder() { return encoder_; }
  const ViTEncoder<T>& encoder() const { return encoder_; }
  std::vector<LoraAdapter<T>>& adapters() { return adapters_; }
  DecoderHead<T>& decoder() { return decoder_; }

  /// Sets pi and re-initializes the prediction bias from it.
  void set_foreground_prior(double pi) {
    config_.decoder.foreground_prior = pi;
    decoder_.init_head(config_.decoder);
  }

  Var<T> forward_logits(const Tensor<T>& images, Mode mode) {
    return decoder_.decode_logits(encoder_.forward_with_taps(images), mode);
  }
  Var<T> forward(const Tensor<T>& images, Mode mode) { return ops::sigmoid(forward_logits(images, mode)); }

  /// Adapter then decoder parameters; the optimizer's parameter set.
  std::vector<Parameter<T>> trainable_parameters() const {
    auto out = adapter_parameters(adapters_);
    for (auto& p : decoder_.parameters()) out.push_back(std::move(p));
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : trainable_parameters())
      if (p.var.requires_grad()) n += p.var.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : trainable_parameters()) p.var.zero_grad();
  }

  /// Adapter + decoder tensors and batch-norm buffers. Never frozen weights.
  Archive trainable_state() {
    Archive a;
    for (const auto& p : trainable_parameters()) a.put(p.name, p.var.value());
    for (const auto& [name, buf] : decoder_.buffers()) a.put(name, *buf);
    return a;
  }

  /// Loads the names produced by trainable_state(), ignoring any other
  /// prefix families (e.g. optimizer state) but failing on missing or
  /// mis-shaped tensors and on unknown lora./decoder. names.
  void load_trainable_state(const Archive& archive) {
    std::map<std::string, Tensor<T>*> targets;
    auto params = trainable_parameters();
    for (auto& p : params) targets[p.name] = &p.var.mutable_value();
    for (auto& [name, buf] : decoder_.buffers()) targets[name] = buf;
    for (const auto& name : archive.names()) {
      const bool ours = name.rfind("lora.", 0) == 0 || name.rfind("decoder.", 0) == 0;
      if (ours && !targets.count(name)) throw CheckpointError("checkpoint has unknown tensor '" + name + "'");
    }
    for (const auto& [name, dst] : targets) {
      if (!archive.contains(name)) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
      if (archive.shape(name) != dst->shape) {
        throw CheckpointError("checkpoint shape mismatch for '" + name + "': " + shape_str(archive.shape(name)) +
                              " vs " + shape_str(dst->shape));
      }
    }
    for (auto& [name, dst] : targets) *dst = archive.get<T>(name);
  }

 private:
  ExperimentConfig config_;
  ViTEncoder<T> encoder_;
  std::vector<LoraAdapter<T>> adapters_;
  DecoderHead<T> decoder_;
};

}  // namespace nucleisam
