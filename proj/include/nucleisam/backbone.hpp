#pragma once

// Frozen ViT image encoder with tap points.
//
// Parameter names follow the SAM image-encoder layout (patch_embed.proj,
// pos_embed [1, g, g, E], blocks.{i}.attn.qkv with fused q|k|v rows, ...)
// so converted SAM weights load through a prefix-stripping name map. All
// blocks use plain global attention; SAM's windowed blocks and relative
// position tables are not represented, and those source tensors are skipped
// on load.

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nucleisam/archive.hpp"
#include "nucleisam/autograd.hpp"
#include "nucleisam/config.hpp"
#include "nucleisam/digest.hpp"

namespace nucleisam {

template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;
};

/// Multi-level features: one channel-first map [B, E, g, g] per tap, in
/// ascending tap order.
template <typename T>
struct FeaturePyramid {
  std::vector<int> tap_indices;
  std::vector<Var<T>> maps;

  std::size_t size() const { return maps.size(); }
};

/// Additive hook on one attention projection: receives the projection input
/// rows and returns a delta shaped like the projection output.
template <typename T>
using ProjectionHook = std::function<Var<T>(const Var<T>&)>;

template <typename T>
struct TransformerBlock {
  Var<T> norm1_weight, norm1_bias;
  Var<T> qkv_weight, qkv_bias;  // [3E, E], rows ordered q | k | v
  Var<T> proj_weight, proj_bias;
  Var<T> norm2_weight, norm2_bias;
  Var<T> lin1_weight, lin1_bias;
  Var<T> lin2_weight, lin2_bias;
  std::array<ProjectionHook<T>, 4> hooks;  // indexed by Projection

  static constexpr T kNormEps = static_cast<T>(1e-6);

  Var<T> forward(const Var<T>& x, std::size_t batch, std::size_t tokens, std::size_t heads) const {
    const std::size_t E = norm1_weight.numel();
    auto h = ops::layer_norm(x, norm1_weight, norm1_bias, kNormEps);
    auto qkv = ops::linear(h, qkv_weight, &qkv_bias);
    for (Projection p : {Projection::query, Projection::key, Projection::value}) {
      if (const auto& hook = hooks[static_cast<int>(p)]) {
        qkv = ops::add_into_columns(qkv, hook(h), static_cast<std::size_t>(p) * E);
      }
    }
    auto a = ops::multi_head_attention(qkv, batch, tokens, heads);
    auto o = ops::linear(a, proj_weight, &proj_bias);
    if (const auto& hook = hooks[static_cast<int>(Projection::output)]) o = ops::add(o, hook(a));
    auto y = ops::add(x, o);
    auto h2 = ops::layer_norm(y, norm2_weight, norm2_bias, kNormEps);
    auto m = ops::linear(ops::gelu(ops::linear(h2, lin1_weight, &lin1_bias)), lin2_weight, &lin2_bias);
    return ops::add(y, m);
  }
};

/// Rearranges images [B, 3, H, W] into patch rows [B*L, 3*p*p] with the
/// (channel, ky, kx) ordering of a conv kernel, tokens in raster order.
template <typename T>
Tensor<T> image_to_patches(const Tensor<T>& images, std::size_t patch) {
  const std::size_t B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  const std::size_t gh = H / patch, gw = W / patch, K = C * patch * patch;
  Tensor<T> out({B * gh * gw, K});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t ty = 0; ty < gh; ++ty)
      for (std::size_t tx = 0; tx < gw; ++tx) {
        T* row = out.data.data() + ((b * gh + ty) * gw + tx) * K;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < patch; ++ky)
            for (std::size_t kx = 0; kx < patch; ++kx)
              row[(c * patch + ky) * patch + kx] = images.at4(b, c, ty * patch + ky, tx * patch + kx);
      }
  return out;
}

/// Maps checkpoint names to encoder parameter names. A source name is kept
/// when it starts with `strip_prefix` (or the prefix is empty); explicit
/// entries take precedence. Returns nullopt for names to skip.
struct NameMap {
  std::string strip_prefix;
  std::map<std::string, std::string> explicit_names;

  std::optional<std::string> translate(const std::string& source) const {
    if (auto it = explicit_names.find(source); it != explicit_names.end()) return it->second;
    if (strip_prefix.empty()) return source;
    if (source.rfind(strip_prefix, 0) == 0) return source.substr(strip_prefix.size());
    return std::nullopt;
  }
};

inline NameMap sam_name_map(std::string prefix = "image_encoder.") { return NameMap{std::move(prefix), {}}; }

/// Bilinear resize of a [1, h, w, E] positional grid to [1, H, W, E].
template <typename T>
Tensor<T> resize_pos_embed(const Tensor<T>& src, std::size_t H, std::size_t W) {
  const std::size_t h = src.dim(1), w = src.dim(2), E = src.dim(3);
  auto ty = ops::detail::bilinear_taps(h, H);
  auto tx = ops::detail::bilinear_taps(w, W);
  Tensor<T> out({1, H, W, E});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const T wy1 = static_cast<T>(ty[y].w1), wy0 = T{1} - wy1;
      const T wx1 = static_cast<T>(tx[x].w1), wx0 = T{1} - wx1;
      const T* a = src.data.data() + (ty[y].i0 * w + tx[x].i0) * E;
      const T* b = src.data.data() + (ty[y].i0 * w + tx[x].i1) * E;
      const T* c = src.data.data() + (ty[y].i1 * w + tx[x].i0) * E;
      const T* d = src.data.data() + (ty[y].i1 * w + tx[x].i1) * E;
      T* o = out.data.data() + (y * W + x) * E;
      for (std::size_t e = 0; e < E; ++e) o[e] = wy0 * (wx0 * a[e] + wx1 * b[e]) + wy1 * (wx0 * c[e] + wx1 * d[e]);
    }
  return out;
}

template <typename T>
class ViTEncoder {
 public:
  /// Builds the encoder with deterministic weights drawn from spec.init_seed.
  explicit ViTEncoder(BackboneSpec spec) : spec_(std::move(spec)) {
    const std::size_t E = spec_.embed_dim, p = spec_.patch_size, g = spec_.grid_size(), Hd = spec_.mlp_hidden();
    std::mt19937_64 rng(derive_seed(spec_.init_seed, 1));
    auto make = [](Shape s) { return Var<T>::leaf(Tensor<T>(std::move(s)), true); };
    auto trunc = [&](Var<T>& v, double std) { fill_trunc_normal(v.mutable_value(), rng, std); };
    auto ones = [](Var<T>& v) { v.mutable_value().fill(T{1}); };

    patch_weight_ = make({E, 3, p, p});
    trunc(patch_weight_, 1.0 / std::sqrt(static_cast<double>(3 * p * p)));
    patch_bias_ = make({E});
    pos_embed_ = make({1, g, g, E});
    trunc(pos_embed_, 0.02);

    blocks_.resize(spec_.depth);
    for (auto& b : blocks_) {
      b.norm1_weight = make({E});
      ones(b.norm1_weight);
      b.norm1_bias = make({E});
      b.qkv_weight = make({3 * E, E});
      trunc(b.qkv_weight, 0.02);
      b.qkv_bias = make({3 * E});
      b.proj_weight = make({E, E});
      trunc(b.proj_weight, 0.02);
      b.proj_bias = make({E});
      b.norm2_weight = make({E});
      ones(b.norm2_weight);
      b.norm2_bias = make({E});
      b.lin1_weight = make({Hd, E});
      trunc(b.lin1_weight, 0.02);
      b.lin1_bias = make({Hd});
      b.lin2_weight = make({E, Hd});
      trunc(b.lin2_weight, 0.02);
      b.lin2_bias = make({E});
    }
  }

  ViTEncoder(const ViTEncoder&) = delete;
  ViTEncoder& operator=(const ViTEncoder&) = delete;
  ViTEncoder(ViTEncoder&&) noexcept = default;
  ViTEncoder& operator=(ViTEncoder&&) noexcept = default;

  const BackboneSpec& spec() const { return spec_; }
  std::size_t depth() const { return blocks_.size(); }
  std::vector<TransformerBlock<T>>& blocks() { return blocks_; }
  const std::vector<TransformerBlock<T>>& blocks() const { return blocks_; }
  Var<T>& pos_embed() { return pos_embed_; }
  Var<T>& patch_weight() { return patch_weight_; }

  /// Named base parameters in a fixed order.
  std::vector<Parameter<T>> parameters() const {
    std::vector<Parameter<T>> out{{"patch_embed.proj.weight", patch_weight_},
                                  {"patch_embed.proj.bias", patch_bias_},
                                  {"pos_embed", pos_embed_}};
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto& b = blocks_[i];
      const std::string pre = "blocks." + std::to_string(i) + ".";
      out.push_back({pre + "norm1.weight", b.norm1_weight});
      out.push_back({pre + "norm1.bias", b.norm1_bias});
      out.push_back({pre + "attn.qkv.weight", b.qkv_weight});
      out.push_back({pre + "attn.qkv.bias", b.qkv_bias});
      out.push_back({pre + "attn.proj.weight", b.proj_weight});
      out.push_back({pre + "attn.proj.bias", b.proj_bias});
      out.push_back({pre + "norm2.weight", b.norm2_weight});
      out.push_back({pre + "norm2.bias", b.norm2_bias});
      out.push_back({pre + "mlp.lin1.weight", b.lin1_weight});
      out.push_back({pre + "mlp.lin1.bias", b.lin1_bias});
      out.push_back({pre + "mlp.lin2.weight", b.lin2_weight});
      out.push_back({pre + "mlp.lin2.bias", b.lin2_bias});
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.var.numel();
    return n;
  }

  /// Excludes every base parameter from differentiation. Idempotent.
  void freeze() {
    for (auto& p : parameters()) p.var.set_requires_grad(false);
    frozen_ = true;
  }
  bool frozen() const { return frozen_; }

  /// Runs the block stack, emitting the post-block output of each tap
  /// (1-based) as a [B, E, g, g] grid. Blocks after the last tap are skipped.
  FeaturePyramid<T> forward_with_taps(const Tensor<T>& images, std::span<const int> taps) const {
    check_input(images);
    if (taps.empty()) throw ShapeError("forward_with_taps: empty tap set");
    for (std::size_t i = 0; i < taps.size(); ++i) {
      if (taps[i] < 1 || taps[i] > static_cast<int>(depth()) || (i > 0 && taps[i] <= taps[i - 1])) {
        throw ShapeError("forward_with_taps: invalid tap set");
      }
    }
    const std::size_t B = images.dim(0), g = spec_.grid_size(), L = g * g;
    auto x = ops::linear(Var<T>::constant(image_to_patches(images, spec_.patch_size)), patch_weight_, &patch_bias_);
    x = ops::add_positional(x, pos_embed_, B);
    FeaturePyramid<T> out;
    std::size_t next = 0;
    for (std::size_t i = 0; i < depth() && next < taps.size(); ++i) {
      x = blocks_[i].forward(x, B, L, spec_.num_heads);
      if (static_cast<int>(i + 1) == taps[next]) {
        out.tap_indices.push_back(taps[next]);
        out.maps.push_back(ops::tokens_to_grid(x, B, g, g));
        ++next;
      }
    }
    return out;
  }

  FeaturePyramid<T> forward_with_taps(const Tensor<T>& images) const {
    return forward_with_taps(images, std::span<const int>(spec_.tap_indices));
  }

  /// Full-depth encoder output as a [B, E, g, g] grid.
  Var<T> forward(const Tensor<T>& images) const {
    const int last = static_cast<int>(depth());
    return forward_with_taps(images, std::span<const int>(&last, 1)).maps.front();
  }

  /// All base parameters as an archive (component "encoder").
  Archive state() const {
    Archive a;
    a.metadata["component"] = "encoder";
    for (const auto& p : parameters()) a.put(p.name, p.var.value());
    return a;
  }

  /// Loads base weights from `checkpoint`. Every parameter must be found;
  /// a positional grid of a different size is bilinearly resized. Nothing
  /// is modified unless the whole load succeeds. Returns the loaded count.
  std::size_t load_pretrained(const Archive& checkpoint, const NameMap& names) {
    std::map<std::string, Var<T>> targets;
    for (const auto& p : parameters()) targets.emplace(p.name, p.var);
    std::map<std::string, Tensor<T>> staged;
    for (const auto& source : checkpoint.names()) {
      auto target = names.translate(source);
      if (!target) continue;
      auto it = targets.find(*target);
      if (it == targets.end()) continue;  // e.g. SAM neck / relative-position tables
      Tensor<T> value = checkpoint.get<T>(source);
      const Shape& want = it->second.shape();
      if (*target == "pos_embed" && value.rank() == 4 && value.shape != want && value.dim(3) == want[3]) {
        value = resize_pos_embed(value, want[1], want[2]);
      }
      if (value.shape != want) {
        throw ArchiveError("shape mismatch for " + *target + " (from " + source + "): checkpoint " +
                           shape_str(value.shape) + " vs encoder " + shape_str(want));
      }
      staged[*target] = std::move(value);
    }
    std::string missing;
    for (const auto& [name, var] : targets) {
      if (!staged.count(name)) missing += (missing.empty() ? "" : ", ") + name;
    }
    if (!missing.empty()) throw ArchiveError("checkpoint is missing encoder tensors: " + missing);
    for (auto& [name, value] : staged) targets.at(name).mutable_value() = std::move(value);
    return staged.size();
  }

  std::size_t load_pretrained(const std::filesystem::path& path, const NameMap& names) {
    return load_pretrained(Archive::load(path), names);
  }

  /// SHA-256 over names and raw values of all base parameters.
  std::string digest() const {
    Sha256 h;
    for (const auto& p : parameters()) {
      h.update(p.name);
      h.update(p.var.value().data.data(), p.var.numel() * sizeof(T));
    }
    return h.hex();
  }

 private:
  void check_input(const Tensor<T>& images) const {
    const auto s = static_cast<std::size_t>(spec_.image_size);
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != s || images.dim(3) != s) {
      throw ShapeError("encoder expects [B, 3, " + std::to_string(s) + ", " + std::to_string(s) + "], got " +
                       shape_str(images.shape));
    }
  }

  BackboneSpec spec_;
  Var<T> patch_weight_, patch_bias_, pos_embed_;
  std::vector<TransformerBlock<T>> blocks_;
  bool frozen_ = false;
};

}  // namespace nucleisam
