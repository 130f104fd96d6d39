#pragma once

// Focal Tversky loss for binary masks.
//
// Per image: TP = Σ p t, FP = Σ p (1 - t), FN = Σ (1 - p) t,
// TI = (TP + eps) / (TP + alpha FP + beta FN + eps), loss = (1 - TI)^gamma
// (or ^(1/gamma) in the inverse-exponent variant). Batch loss is the mean
// of per-image losses. Values use the probabilities as given (so a perfect
// binary prediction scores exactly 0); pixels outside [1e-7, 1 - 1e-7] are
// treated as saturated and pass no gradient.

#include <algorithm>
#include <cmath>
#include <vector>

#include "nucleisam/autograd.hpp"
#include "nucleisam/config.hpp"

namespace nucleisam {

inline constexpr double kProbClamp = 1e-7;

struct TverskyTerms {
  double tp = 0, fp = 0, fn = 0, index = 0, loss = 0;
};

namespace detail {

template <typename T>
void check_loss_inputs(const Tensor<T>& probs, const Tensor<T>& targets) {
  if (probs.shape != targets.shape || probs.rank() != 4 || probs.dim(1) != 1) {
    throw ShapeError("focal_tversky: probs " + shape_str(probs.shape) + " targets " + shape_str(targets.shape));
  }
  for (const T t : targets.data)
    if (t != T{0} && t != T{1}) throw std::invalid_argument("focal_tversky: targets must be 0 or 1");
}

inline double tversky_exponent(const LossSpec& spec) {
  return spec.exponent == TverskyExponent::power ? spec.gamma : 1.0 / spec.gamma;
}

}  // namespace detail

/// Per-image terms for image `b` of a [B, 1, H, W] batch.
template <typename T>
TverskyTerms tversky_terms(const Tensor<T>& probs, const Tensor<T>& targets, std::size_t b, const LossSpec& spec) {
  const std::size_t n = probs.dim(2) * probs.dim(3);
  TverskyTerms r;
  for (std::size_t i = b * n; i < (b + 1) * n; ++i) {
    const double p = std::clamp(static_cast<double>(probs[i]), 0.0, 1.0);
    const double t = static_cast<double>(targets[i]);
    r.tp += p * t;
    r.fp += p * (1.0 - t);
    r.fn += (1.0 - p) * t;
  }
  r.index = (r.tp + spec.epsilon) / (r.tp + spec.alpha * r.fp + spec.beta * r.fn + spec.epsilon);
  r.loss = std::pow(1.0 - r.index, detail::tversky_exponent(spec));
  return r;
}

/// Differentiable batch-mean focal Tversky loss.
template <typename T>
Var<T> focal_tversky(const Var<T>& probs, const Tensor<T>& targets, const LossSpec& spec) {
  detail::check_loss_inputs(probs.value(), targets);
  const std::size_t B = probs.value().dim(0), n = probs.value().dim(2) * probs.value().dim(3);
  const double k = detail::tversky_exponent(spec);
  std::vector<TverskyTerms> terms(B);
  double total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    terms[b] = tversky_terms(probs.value(), targets, b, spec);
    total += terms[b].loss;
  }
  Tensor<T> out({1}, std::vector<T>{static_cast<T>(total / static_cast<double>(B))});
  return make_op<T>(std::move(out), {probs}, [=, terms = std::move(terms)](Node<T>& nd) {
    auto* g = ops::detail::grad_of(nd, 0);
    if (!g) return;
    const auto& p = nd.parents[0]->value.data;
    const double upstream = static_cast<double>(nd.grad[0]) / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& r = terms[b];
      const double num = r.tp + spec.epsilon;
      const double den = r.tp + spec.alpha * r.fp + spec.beta * r.fn + spec.epsilon;
      const double miss = 1.0 - r.index;
      // d loss / d TI; zero at a perfect index where the power has no slope
      const double dl_dti = miss > 0 ? -k * std::pow(miss, k - 1.0) : 0.0;
      for (std::size_t i = b * n; i < (b + 1) * n; ++i) {
        const double pv = static_cast<double>(p[i]);
        if (pv < kProbClamp || pv > 1.0 - kProbClamp) continue;
        const double t = static_cast<double>(targets[i]);
        const double dden = t + spec.alpha * (1.0 - t) - spec.beta * t;
        const double dti = (t * den - num * dden) / (den * den);
        (*g)[i] += static_cast<T>(upstream * dl_dti * dti);
      }
    }
  });
}

/// Loss value only, for evaluation.
template <typename T>
double focal_tversky_value(const Tensor<T>& probs, const Tensor<T>& targets, const LossSpec& spec) {
  detail::check_loss_inputs(probs, targets);
  double total = 0;
  for (std::size_t b = 0; b < probs.dim(0); ++b) total += tversky_terms(probs, targets, b, spec).loss;
  return total / static_cast<double>(probs.dim(0));
}

}  // namespace nucleisam
