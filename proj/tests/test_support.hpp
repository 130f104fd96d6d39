#pragma once

#include <gtest/gtest.h>
#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "nucleisam/autograd.hpp"
#include "nucleisam/config.hpp"

namespace nucleisam::testing {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  fill_uniform(t, rng, lo, hi);
  return t;
}

/// Norm-wise relative error between analytic and central-difference
/// gradients of `loss()` w.r.t. every element of `leaf`.
inline double gradient_rel_error(const std::function<Var<double>()>& loss, Var<double> leaf, double h = 1e-5) {
  leaf.zero_grad();
  auto root = loss();
  backward(root);
  std::vector<double> analytic = leaf.has_grad() ? leaf.grad() : std::vector<double>(leaf.numel(), 0.0);
  std::vector<double> numeric(leaf.numel());
  for (std::size_t i = 0; i < leaf.numel(); ++i) {
    double& x = leaf.mutable_value()[i];
    const double orig = x;
    x = orig + h;
    const double fp = loss().value()[0];
    x = orig - h;
    const double fm = loss().value()[0];
    x = orig;
    numeric[i] = (fp - fm) / (2 * h);
  }
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double scale = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  return std::sqrt(diff) / scale;
}

/// Small ViT used across unit tests: image 16, patch 4 (4x4 grid).
inline ExperimentConfig tiny_config() {
  ExperimentConfig c = toy_config();
  c.backbone.image_size = 16;
  c.backbone.patch_size = 4;
  c.backbone.embed_dim = 8;
  c.backbone.num_heads = 2;
  c.backbone.depth = 3;
  c.backbone.tap_indices = {1, 2, 3};
  c.backbone.mlp_ratio = 2;
  c.lora.rank = 2;
  c.decoder.branch_channels = 4;
  return c;
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("nucleisam_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace nucleisam::testing
