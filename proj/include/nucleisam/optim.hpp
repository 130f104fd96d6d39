#pragma once

// AdamW and ReduceLROnPlateau with PyTorch semantics.

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "nucleisam/archive.hpp"
#include "nucleisam/backbone.hpp"

namespace nucleisam {

class OptimizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
class AdamW {
 public:
  double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay;

  AdamW(std::vector<Parameter<T>> params, double learning_rate, double wd)
      : lr(learning_rate), weight_decay(wd), params_(std::move(params)) {
    std::erase_if(params_, [](const Parameter<T>& p) { return !p.var.requires_grad(); });
    if (params_.empty()) throw OptimizerError("optimizer has no trainable parameters");
    for (const auto& p : params_) {
      m_.emplace_back(p.var.numel(), T{0});
      v_.emplace_back(p.var.numel(), T{0});
    }
  }

  const std::vector<Parameter<T>>& parameters() const { return params_; }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.numel();
    return n;
  }
  long step_count() const { return t_; }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  /// One update. Parameters without a gradient are skipped entirely.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    const T decay = static_cast<T>(1.0 - lr * weight_decay);
    const T step_size = static_cast<T>(lr / bc1), sqrt_bc2 = static_cast<T>(std::sqrt(bc2));
    const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2), e = static_cast<T>(eps);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& var = params_[k].var;
      if (!var.has_grad()) continue;
      const auto& g = var.grad();
      auto& w = var.mutable_value().data;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] *= decay;
        m[i] = b1 * m[i] + (T{1} - b1) * g[i];
        v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
        w[i] -= step_size * m[i] / (std::sqrt(v[i]) / sqrt_bc2 + e);
      }
    }
  }

  /// Moments as `optim.m.<param>` / `optim.v.<param>`; step count in metadata.
  void save_state(Archive& a) const {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const Shape& s = params_[k].var.shape();
      a.put("optim.m." + params_[k].name, Tensor<T>(s, m_[k]));
      a.put("optim.v." + params_[k].name, Tensor<T>(s, v_[k]));
    }
    a.metadata["optim.step"] = std::to_string(t_);
  }

  void load_state(const Archive& a) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      for (auto* dst : {&m_[k], &v_[k]}) {
        const std::string name = std::string(dst == &m_[k] ? "optim.m." : "optim.v.") + params_[k].name;
        if (!a.contains(name)) throw OptimizerError("checkpoint is missing optimizer state '" + name + "'");
        auto t = a.get<T>(name);
        if (t.shape != params_[k].var.shape()) throw OptimizerError("optimizer state shape mismatch for " + name);
        *dst = std::move(t.data);
      }
    }
    auto it = a.metadata.find("optim.step");
    if (it == a.metadata.end()) throw OptimizerError("checkpoint is missing optim.step");
    t_ = std::stol(it->second);
  }

 private:
  std::vector<Parameter<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  long t_ = 0;
};

/// Relative-threshold plateau detection: an epoch improves when the metric
/// beats best * (1 -/+ threshold). After more than `patience` epochs without
/// improvement the rate drops by `factor`, floored at `min_lr`.
class ReduceLROnPlateau {
 public:
  enum class Direction { minimize, maximize };

  ReduceLROnPlateau(double lr, Direction dir, double factor, int patience, double min_lr, double threshold = 1e-4)
      : lr_(lr), dir_(dir), factor_(factor), patience_(patience), min_lr_(min_lr), threshold_(threshold) {
    best_ = dir == Direction::minimize ? std::numeric_limits<double>::infinity()
                                       : -std::numeric_limits<double>::infinity();
  }

  double lr() const { return lr_; }
  double best() const { return best_; }
  int bad_epochs() const { return bad_; }

  bool improves(double metric) const {
    return dir_ == Direction::minimize ? metric < best_ * (1.0 - threshold_) : metric > best_ * (1.0 + threshold_);
  }

  /// Returns true when the rate was reduced.
  bool step(double metric) {
    if (improves(metric)) {
      best_ = metric;
      bad_ = 0;
    } else {
      ++bad_;
    }
    if (bad_ > patience_) {
      bad_ = 0;
      const double next = std::max(lr_ * factor_, min_lr_);
      if (lr_ - next > 1e-8) {
        lr_ = next;
        return true;
      }
    }
    return false;
  }

  void save_state(Archive& a) const {
    a.metadata["sched.lr"] = exact(lr_);
    a.metadata["sched.best"] = exact(best_);
    a.metadata["sched.bad"] = std::to_string(bad_);
  }

  void load_state(const Archive& a) {
    try {
      lr_ = std::stod(a.metadata.at("sched.lr"));
      best_ = std::stod(a.metadata.at("sched.best"));
      bad_ = std::stoi(a.metadata.at("sched.bad"));
    } catch (const std::out_of_range&) {
      throw OptimizerError("checkpoint is missing scheduler state");
    }
  }

  /// Round-trippable decimal (hex-float for bit exactness).
  static std::string exact(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
  }

 private:
  double lr_;
  Direction dir_;
  double factor_;
  int patience_;
  double min_lr_;
  double threshold_;
  double best_;
  int bad_ = 0;
};

}  // namespace nucleisam
