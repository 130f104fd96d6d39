#pragma once

// Low-rank adapters on attention projections: y = W x + s * B (A x), with W
// frozen, A [rank, in] gaussian (std 0.02) and B [out, rank] zero at
// initialization so a freshly adapted encoder reproduces the base encoder.

#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "nucleisam/archive.hpp"
#include "nucleisam/autograd.hpp"
#include "nucleisam/backbone.hpp"
#include "nucleisam/config.hpp"

namespace nucleisam {

class LoraError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct LoraAdapter {
  int block = 0;  // 0-based host block
  Projection projection = Projection::query;
  Var<T> A;  // [rank, in]
  Var<T> B;  // [out, rank]
  T scale = T{1};

  std::size_t rank() const { return A.shape()[0]; }
  std::string name() const { return "lora.blocks." + std::to_string(block) + "." + to_string(projection); }

  /// s * B (A x) for input rows x[M, in].
  Var<T> delta(const Var<T>& x) const {
    auto d = ops::linear(ops::linear(x, A), B);
    return scale == T{1} ? d : ops::scale(d, scale);
  }
};

/// Attaches one adapter per (block, target projection). The encoder must be
/// frozen first; the adapters are the only parameters left trainable.
template <typename T>
std::vector<LoraAdapter<T>> inject(ViTEncoder<T>& encoder, const LoraSpec& spec, std::uint64_t seed) {
  const auto E = static_cast<std::size_t>(encoder.spec().embed_dim);
  if (!encoder.frozen()) throw LoraError("inject: encoder must be frozen before adapters are attached");
  if (!spec.enabled) throw LoraError("inject: adapters are disabled in this configuration");
  if (spec.rank < 1 || static_cast<std::size_t>(spec.rank) > E) {
    throw LoraError("inject: rank " + std::to_string(spec.rank) + " outside [1, " + std::to_string(E) + "]");
  }
  auto& blocks = encoder.blocks();
  for (std::size_t i = 0; i < blocks.size(); ++i)
    for (Projection p : spec.target_projections)
      if (blocks[i].hooks[static_cast<int>(p)]) {
        throw LoraError("inject: block " + std::to_string(i) + " " + to_string(p) + " already carries an adapter");
      }

  std::mt19937_64 rng(derive_seed(seed, 3));
  const auto r = static_cast<std::size_t>(spec.rank);
  std::vector<LoraAdapter<T>> adapters;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    for (Projection p : spec.target_projections) {
      LoraAdapter<T> a;
      a.block = static_cast<int>(i);
      a.projection = p;
      Tensor<T> A({r, E});
      fill_normal(A, rng, 0.02);
      a.A = Var<T>::leaf(std::move(A), true);
      a.B = Var<T>::leaf(Tensor<T>({E, r}), true);
      a.scale = static_cast<T>(spec.scale());
      blocks[i].hooks[static_cast<int>(p)] = [a](const Var<T>& x) { return a.delta(x); };
      adapters.push_back(std::move(a));
    }
  }
  return adapters;
}

/// W + s * B * A. Used to cross-check the factored forward path.
template <typename T>
Tensor<T> effective_weight(const Tensor<T>& W, const LoraAdapter<T>& adapter) {
  const auto& A = adapter.A.value();
  const auto& B = adapter.B.value();
  if (W.rank() != 2 || B.dim(0) != W.dim(0) || A.dim(1) != W.dim(1) || B.dim(1) != A.dim(0)) {
    throw ShapeError("effective_weight: W " + shape_str(W.shape) + " A " + shape_str(A.shape) + " B " +
                     shape_str(B.shape));
  }
  Tensor<T> BA({W.dim(0), W.dim(1)});
  blas::gemm_nn(W.dim(0), W.dim(1), A.dim(0), B.data.data(), A.data.data(), BA.data.data());
  Tensor<T> out = W;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += adapter.scale * BA[i];
  return out;
}

template <typename T>
std::vector<Parameter<T>> adapter_parameters(const std::vector<LoraAdapter<T>>& adapters) {
  std::vector<Parameter<T>> out;
  for (const auto& a : adapters) {
    out.push_back({a.name() + ".A", a.A});
    out.push_back({a.name() + ".B", a.B});
  }
  return out;
}

/// Adapter tensors only, tagged `component: adapters`.
template <typename T>
Archive adapter_state(const std::vector<LoraAdapter<T>>& adapters) {
  Archive a;
  a.metadata["component"] = "adapters";
  for (const auto& p : adapter_parameters(adapters)) a.put(p.name, p.var.value());
  return a;
}

/// Loads adapter tensors; the archive must hold exactly the adapter names.
template <typename T>
void load_adapter_state(std::vector<LoraAdapter<T>>& adapters, const Archive& archive) {
  auto params = adapter_parameters(adapters);
  std::set<std::string> expected;
  for (const auto& p : params) expected.insert(p.name);
  for (const auto& name : archive.names())
    if (!expected.count(name)) throw LoraError("adapter state has unknown tensor '" + name + "'");
  for (auto& p : params) {
    if (!archive.contains(p.name)) throw LoraError("adapter state is missing '" + p.name + "'");
    if (archive.shape(p.name) != p.var.shape()) {
      throw LoraError("adapter state shape mismatch for '" + p.name + "': " + shape_str(archive.shape(p.name)) +
                      " vs " + shape_str(p.var.shape()));
    }
  }
  for (auto& p : params) p.var.mutable_value() = archive.get<T>(p.name);
}

}  // namespace nucleisam
