#pragma once

// Residual decoder: one branch per encoder tap, channel concatenation, and a
// 1x1 prediction conv whose bias starts at the logit of the foreground prior.
// Fusion runs at token-grid resolution; the single-channel logit map is then
// bilinearly upsampled to image resolution before the sigmoid.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "nucleisam/autograd.hpp"
#include "nucleisam/backbone.hpp"
#include "nucleisam/config.hpp"

namespace nucleisam {

enum class Mode { train, eval };

/// b0 = log(pi / (1 - pi)).
inline double bias_prior(double pi) {
  if (!(pi > 0.0 && pi < 1.0)) throw std::domain_error("bias_prior: pi must lie in (0, 1), got " + std::to_string(pi));
  return std::log(pi / (1.0 - pi));
}

template <typename T>
struct BatchNorm2d {
  static constexpr T kEps = static_cast<T>(1e-5);
  static constexpr T kMomentum = static_cast<T>(0.1);

  Var<T> weight, bias;
  ops::BatchNormBuffers<T> buffers;

  explicit BatchNorm2d(std::size_t channels = 0)
      : weight(Var<T>::leaf(Tensor<T>({channels}, T{1}), true)),
        bias(Var<T>::leaf(Tensor<T>({channels}), true)),
        buffers{Tensor<T>({channels}), Tensor<T>({channels}, T{1})} {}

  Var<T> forward(const Var<T>& x, Mode mode) {
    return ops::batch_norm(x, weight, bias, buffers, mode == Mode::train, kMomentum, kEps);
  }
};

/// 1x1 projection E->C, then conv3x3-BN-ReLU, conv3x3-BN, identity skip
/// from the projection, final ReLU.
template <typename T>
struct ResidualBranch {
  Var<T> proj_weight, proj_bias;  // [C, E, 1, 1], [C]
  Var<T> conv1_weight;            // [C, C, 3, 3]
  BatchNorm2d<T> bn1;
  Var<T> conv2_weight;
  BatchNorm2d<T> bn2;

  ResidualBranch() = default;
  ResidualBranch(std::size_t in_channels, std::size_t channels, std::mt19937_64& rng)
      : bn1(channels), bn2(channels) {
    Tensor<T> pw({channels, in_channels, 1, 1}), pb({channels});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels));
    fill_uniform(pw, rng, -bound, bound);
    fill_uniform(pb, rng, -bound, bound);
    proj_weight = Var<T>::leaf(std::move(pw), true);
    proj_bias = Var<T>::leaf(std::move(pb), true);
    const double he = std::sqrt(2.0 / static_cast<double>(9 * channels));
    Tensor<T> c1({channels, channels, 3, 3}), c2({channels, channels, 3, 3});
    fill_normal(c1, rng, he);
    fill_normal(c2, rng, he);
    conv1_weight = Var<T>::leaf(std::move(c1), true);
    conv2_weight = Var<T>::leaf(std::move(c2), true);
  }

  std::size_t channels() const { return proj_weight.shape()[0]; }

  Var<T> forward(const Var<T>& x, Mode mode) {
    auto skip = ops::conv2d(x, proj_weight, &proj_bias, 0);
    auto h = ops::relu(bn1.forward(ops::conv2d<T>(skip, conv1_weight, nullptr, 1), mode));
    h = bn2.forward(ops::conv2d<T>(h, conv2_weight, nullptr, 1), mode);
    return ops::relu(ops::add(h, skip));
  }
};

template <typename T>
class DecoderHead {
 public:
  DecoderHead(const BackboneSpec& backbone, const DecoderSpec& spec, std::uint64_t seed)
      : image_size_(backbone.image_size), embed_dim_(backbone.embed_dim) {
    std::mt19937_64 rng(derive_seed(seed, 4));
    const std::size_t C = spec.branch_channels, n = backbone.tap_indices.size();
    for (std::size_t i = 0; i < n; ++i) branches_.emplace_back(embed_dim_, C, rng);
    Tensor<T> hw({1, n * C, 1, 1});
    const double bound = 1.0 / std::sqrt(static_cast<double>(n * C));
    fill_uniform(hw, rng, -bound, bound);
    head_weight_ = Var<T>::leaf(std::move(hw), true);
    head_bias_ = Var<T>::leaf(Tensor<T>({1}), true);
    init_head(spec);
  }

  /// Sets the prediction bias to bias_prior(pi) when the prior is enabled,
  /// else 0. With the prior enabled but pi not yet known the bias stays 0.
  void init_head(const DecoderSpec& spec) {
    head_bias_.mutable_value()[0] =
        (spec.use_bias_prior && spec.foreground_prior) ? static_cast<T>(bias_prior(*spec.foreground_prior)) : T{0};
  }

  std::size_t num_branches() const { return branches_.size(); }
  std::vector<ResidualBranch<T>>& branches() { return branches_; }
  Var<T>& head_weight() { return head_weight_; }
  Var<T>& head_bias() { return head_bias_; }

  /// Upsampled logits [B, 1, S, S].
  Var<T> decode_logits(const FeaturePyramid<T>& pyramid, Mode mode) {
    if (pyramid.size() != branches_.size()) {
      throw ShapeError("decode: pyramid has " + std::to_string(pyramid.size()) + " maps, decoder expects " +
                       std::to_string(branches_.size()));
    }
    std::vector<Var<T>> decoded;
    for (std::size_t i = 0; i < branches_.size(); ++i) {
      const auto& m = pyramid.maps[i];
      if (m.shape().size() != 4 || m.shape()[1] != embed_dim_ || m.shape() != pyramid.maps[0].shape()) {
        throw ShapeError("decode: tap map " + std::to_string(i) + " has shape " + shape_str(m.shape()));
      }
      decoded.push_back(branches_[i].forward(m, mode));
    }
    auto fused = decoded.size() == 1 ? decoded.front() : ops::concat_channels(decoded);
    auto logits = ops::conv2d(fused, head_weight_, &head_bias_, 0);
    return ops::upsample_bilinear(logits, image_size_, image_size_);
  }

  /// Foreground probabilities [B, 1, S, S].
  Var<T> decode(const FeaturePyramid<T>& pyramid, Mode mode) { return ops::sigmoid(decode_logits(pyramid, mode)); }

  std::vector<Parameter<T>> parameters() const {
    std::vector<Parameter<T>> out;
    for (std::size_t i = 0; i < branches_.size(); ++i) {
      const auto& b = branches_[i];
      const std::string pre = "decoder.branches." + std::to_string(i) + ".";
      out.push_back({pre + "proj.weight", b.proj_weight});
      out.push_back({pre + "proj.bias", b.proj_bias});
      out.push_back({pre + "conv1.weight", b.conv1_weight});
      out.push_back({pre + "bn1.weight", b.bn1.weight});
      out.push_back({pre + "bn1.bias", b.bn1.bias});
      out.push_back({pre + "conv2.weight", b.conv2_weight});
      out.push_back({pre + "bn2.weight", b.bn2.weight});
      out.push_back({pre + "bn2.bias", b.bn2.bias});
    }
    out.push_back({"decoder.head.weight", head_weight_});
    out.push_back({"decoder.head.bias", head_bias_});
    return out;
  }

  /// Batch-norm running statistics (not trainable, but checkpointed).
  std::vector<std::pair<std::string, Tensor<T>*>> buffers() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (std::size_t i = 0; i < branches_.size(); ++i) {
      auto& b = branches_[i];
      const std::string pre = "decoder.branches." + std::to_string(i) + ".";
      out.emplace_back(pre + "bn1.running_mean", &b.bn1.buffers.running_mean);
      out.emplace_back(pre + "bn1.running_var", &b.bn1.buffers.running_var);
      out.emplace_back(pre + "bn2.running_mean", &b.bn2.buffers.running_mean);
      out.emplace_back(pre + "bn2.running_var", &b.bn2.buffers.running_var);
    }
    return out;
  }

 private:
  std::size_t image_size_;
  std::size_t embed_dim_;
  std::vector<ResidualBranch<T>> branches_;
  Var<T> head_weight_, head_bias_;
};

}  // namespace nucleisam
