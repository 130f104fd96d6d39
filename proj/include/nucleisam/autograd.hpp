#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// Every op returns a Var whose node remembers its parents and a backward
// closure. Nodes whose parents never require a gradient are created as plain
// constants, so frozen sub-graphs cost no backward work and their leaves
// never receive a gradient buffer.

#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <unordered_set>
#include <utility>

#include "nucleisam/tensor.hpp"

namespace nucleisam {

template <typename T>
struct Node {
  Tensor<T> value;
  std::vector<T> grad;  // empty until a gradient flows here
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.numel(), T{0});
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var leaf(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }
  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t numel() const { return node_->value.numel(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<T>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. The backward closure is dropped when no parent
/// participates in differentiation.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.shared());
    n->backward_fn = std::move(fn);
  }
  return Var<T>(std::move(n));
}

/// Back-propagates from a scalar root, accumulating into leaf gradients.
template <typename T>
void backward(const Var<T>& root) {
  if (root.numel() != 1) throw ShapeError("backward: root must be a scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) {
      n->backward_fn(*n);
      // interior buffers are not needed once propagated
      if (!n->parents.empty()) std::vector<T>().swap(n->grad);
    }
  }
}

namespace ops {

namespace detail {
template <typename T>
inline std::vector<T>* grad_of(Node<T>& n, std::size_t parent) {
  auto& p = *n.parents[parent];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}
}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = detail::grad_of(n, k))
        for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= s;
  return make_op<T>(std::move(out), {a}, [s](Node<T>& n) {
    if (auto* g = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += s * n.grad[i];
  });
}

/// y[M,N] = x[M,K] * w[N,K]^T (+ b[N]).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>* b = nullptr) {
  // w may carry trailing dims (e.g. a conv kernel [N, C, k, k]); it is read as [N, numel/N]
  if (x.value().rank() != 2 || w.value().rank() < 2 || w.numel() != w.shape()[0] * x.shape()[1]) {
    throw ShapeError("linear: x " + shape_str(x.shape()) + " w " + shape_str(w.shape()));
  }
  const std::size_t M = x.shape()[0], K = x.shape()[1], N = w.shape()[0];
  Tensor<T> out({M, N});
  if (b) {
    if (b->numel() != N) throw ShapeError("linear: bias " + shape_str(b->shape()));
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j) out[i * N + j] = b->value()[j];
  }
  blas::gemm_nt(M, N, K, x.value().data.data(), w.value().data.data(), out.data.data());
  std::vector<Var<T>> parents{x, w};
  if (b) parents.push_back(*b);
  return make_op<T>(std::move(out), std::move(parents), [M, N, K](Node<T>& n) {
    const T* gy = n.grad.data();
    if (auto* gx = detail::grad_of(n, 0)) blas::gemm_nn(M, K, N, gy, n.parents[1]->value.data.data(), gx->data());
    if (auto* gw = detail::grad_of(n, 1)) blas::gemm_tn(N, K, M, gy, n.parents[0]->value.data.data(), gw->data());
    if (n.parents.size() > 2)
      if (auto* gb = detail::grad_of(n, 2))
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t j = 0; j < N; ++j) (*gb)[j] += gy[i * N + j];
  });
}

/// Adds delta[M,D] into columns [offset, offset+D) of base[M,N].
template <typename T>
Var<T> add_into_columns(const Var<T>& base, const Var<T>& delta, std::size_t offset) {
  const std::size_t M = base.shape()[0], N = base.shape()[1], D = delta.shape()[1];
  if (delta.shape()[0] != M || offset + D > N) {
    throw ShapeError("add_into_columns: base " + shape_str(base.shape()) + " delta " + shape_str(delta.shape()));
  }
  Tensor<T> out = base.value();
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < D; ++j) out[i * N + offset + j] += delta.value()[i * D + j];
  return make_op<T>(std::move(out), {base, delta}, [M, N, D, offset](Node<T>& n) {
    if (auto* g = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
    if (auto* g = detail::grad_of(n, 1))
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < D; ++j) (*g)[i * D + j] += n.grad[i * N + offset + j];
  });
}

/// Layer normalization over the last dimension of x[M,C].
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const std::size_t M = x.shape()[0], C = x.shape()[1];
  if (gamma.numel() != C || beta.numel() != C) throw ShapeError("layer_norm: affine size mismatch");
  Tensor<T> out({M, C});
  std::vector<T> xhat(M * C), inv_std(M);
  const auto& xv = x.value().data;
  for (std::size_t i = 0; i < M; ++i) {
    T mean{0};
    for (std::size_t j = 0; j < C; ++j) mean += xv[i * C + j];
    mean /= static_cast<T>(C);
    T var{0};
    for (std::size_t j = 0; j < C; ++j) {
      const T d = xv[i * C + j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(C);
    inv_std[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < C; ++j) {
      xhat[i * C + j] = (xv[i * C + j] - mean) * inv_std[i];
      out[i * C + j] = xhat[i * C + j] * gamma.value()[j] + beta.value()[j];
    }
  }
  return make_op<T>(std::move(out), {x, gamma, beta},
                    [M, C, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& n) {
                      const auto& g = n.grad;
                      const auto& gam = n.parents[1]->value.data;
                      if (auto* gx = detail::grad_of(n, 0)) {
                        for (std::size_t i = 0; i < M; ++i) {
                          T sum_g{0}, sum_gx{0};
                          for (std::size_t j = 0; j < C; ++j) {
                            const T gh = g[i * C + j] * gam[j];
                            sum_g += gh;
                            sum_gx += gh * xhat[i * C + j];
                          }
                          const T invC = T{1} / static_cast<T>(C);
                          for (std::size_t j = 0; j < C; ++j) {
                            const T gh = g[i * C + j] * gam[j];
                            (*gx)[i * C + j] += inv_std[i] * (gh - invC * sum_g - xhat[i * C + j] * invC * sum_gx);
                          }
                        }
                      }
                      if (auto* gg = detail::grad_of(n, 1))
                        for (std::size_t i = 0; i < M; ++i)
                          for (std::size_t j = 0; j < C; ++j) (*gg)[j] += g[i * C + j] * xhat[i * C + j];
                      if (auto* gb = detail::grad_of(n, 2))
                        for (std::size_t i = 0; i < M; ++i)
                          for (std::size_t j = 0; j < C; ++j) (*gb)[j] += g[i * C + j];
                    });
}

/// Exact (erf) GELU.
template <typename T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> out = x.value();
  const T inv_sqrt2 = T{1} / std::sqrt(T{2});
  for (auto& v : out.data) v = T{0.5} * v * (T{1} + std::erf(v * inv_sqrt2));
  return make_op<T>(std::move(out), {x}, [inv_sqrt2](Node<T>& n) {
    if (auto* g = detail::grad_of(n, 0)) {
      const auto& xv = n.parents[0]->value.data;
      const T inv_sqrt_2pi = T{1} / std::sqrt(T{2} * std::numbers::pi_v<T>);
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const T v = xv[i];
        const T cdf = T{0.5} * (T{1} + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T{-0.5} * v * v);
        (*g)[i] += n.grad[i] * (cdf + v * pdf);
      }
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data) v = v > T{0} ? v : T{0};
  return make_op<T>(std::move(out), {x}, [](Node<T>& n) {
    if (auto* g = detail::grad_of(n, 0)) {
      const auto& xv = n.parents[0]->value.data;
      for (std::size_t i = 0; i < xv.size(); ++i)
        if (xv[i] > T{0}) (*g)[i] += n.grad[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data) v = v >= T{0} ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
  auto y = out.data;
  return make_op<T>(std::move(out), {x}, [y = std::move(y)](Node<T>& n) {
    if (auto* g = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < y.size(); ++i) (*g)[i] += n.grad[i] * y[i] * (T{1} - y[i]);
  });
}

/// Multi-head self attention over a fused qkv[B*L, 3C] tensor laid out as
/// (q | k | v), heads contiguous within each third. Returns [B*L, C].
template <typename T>
Var<T> multi_head_attention(const Var<T>& qkv, std::size_t batch, std::size_t tokens, std::size_t heads) {
  const std::size_t C3 = qkv.shape()[1];
  if (qkv.shape()[0] != batch * tokens || C3 % 3 != 0 || (C3 / 3) % heads != 0) {
    throw ShapeError("attention: qkv " + shape_str(qkv.shape()));
  }
  const std::size_t C = C3 / 3, hd = C / heads, L = tokens;
  const T sc = T{1} / std::sqrt(static_cast<T>(hd));
  const auto& in = qkv.value().data;
  Tensor<T> out({batch * L, C});
  std::vector<T> probs(batch * heads * L * L);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* P = probs.data() + (b * heads + h) * L * L;
      for (std::size_t i = 0; i < L; ++i) {
        const T* q = in.data() + (b * L + i) * C3 + h * hd;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          const T* k = in.data() + (b * L + j) * C3 + C + h * hd;
          T s{0};
          for (std::size_t d = 0; d < hd; ++d) s += q[d] * k[d];
          P[i * L + j] = s * sc;
          mx = std::max(mx, P[i * L + j]);
        }
        T z{0};
        for (std::size_t j = 0; j < L; ++j) {
          P[i * L + j] = std::exp(P[i * L + j] - mx);
          z += P[i * L + j];
        }
        for (std::size_t j = 0; j < L; ++j) P[i * L + j] /= z;
        T* o = out.data.data() + (b * L + i) * C + h * hd;
        for (std::size_t j = 0; j < L; ++j) {
          const T p = P[i * L + j];
          const T* v = in.data() + (b * L + j) * C3 + 2 * C + h * hd;
          for (std::size_t d = 0; d < hd; ++d) o[d] += p * v[d];
        }
      }
    }
  }
  return make_op<T>(std::move(out), {qkv}, [=, probs = std::move(probs)](Node<T>& n) {
    auto* g = detail::grad_of(n, 0);
    if (!g) return;
    const auto& in = n.parents[0]->value.data;
    const auto& go = n.grad;
    std::vector<T> dP(L);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const T* P = probs.data() + (b * heads + h) * L * L;
        for (std::size_t i = 0; i < L; ++i) {
          const T* gout = go.data() + (b * L + i) * C + h * hd;
          T dot{0};
          for (std::size_t j = 0; j < L; ++j) {
            const T* v = in.data() + (b * L + j) * C3 + 2 * C + h * hd;
            T* gv = g->data() + (b * L + j) * C3 + 2 * C + h * hd;
            T s{0};
            for (std::size_t d = 0; d < hd; ++d) {
              s += gout[d] * v[d];
              gv[d] += P[i * L + j] * gout[d];
            }
            dP[j] = s;
            dot += s * P[i * L + j];
          }
          const T* q = in.data() + (b * L + i) * C3 + h * hd;
          T* gq = g->data() + (b * L + i) * C3 + h * hd;
          for (std::size_t j = 0; j < L; ++j) {
            const T ds = P[i * L + j] * (dP[j] - dot) * sc;
            if (ds == T{0}) continue;
            const T* k = in.data() + (b * L + j) * C3 + C + h * hd;
            T* gk = g->data() + (b * L + j) * C3 + C + h * hd;
            for (std::size_t d = 0; d < hd; ++d) {
              gq[d] += ds * k[d];
              gk[d] += ds * q[d];
            }
          }
        }
      }
    }
  });
}

/// x[B*L, C] + pos[L*C] broadcast over the batch.
template <typename T>
Var<T> add_positional(const Var<T>& x, const Var<T>& pos, std::size_t batch) {
  const std::size_t LC = pos.numel();
  if (x.numel() != batch * LC) throw ShapeError("add_positional: x " + shape_str(x.shape()) + " pos " + shape_str(pos.shape()));
  Tensor<T> out = x.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < LC; ++i) out[b * LC + i] += pos.value()[i];
  return make_op<T>(std::move(out), {x, pos}, [batch, LC](Node<T>& n) {
    if (auto* g = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
    if (auto* g = detail::grad_of(n, 1))
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < LC; ++i) (*g)[i] += n.grad[b * LC + i];
  });
}

/// Token rows [B*gh*gw, C] (raster order) to a channel-first grid [B, C, gh, gw].
template <typename T>
Var<T> tokens_to_grid(const Var<T>& x, std::size_t batch, std::size_t gh, std::size_t gw) {
  const std::size_t L = gh * gw;
  if (x.shape()[0] != batch * L) throw ShapeError("tokens_to_grid: " + shape_str(x.shape()));
  const std::size_t C = x.shape()[1];
  Tensor<T> out({batch, C, gh, gw});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t c = 0; c < C; ++c) out[(b * C + c) * L + l] = x.value()[(b * L + l) * C + c];
  return make_op<T>(std::move(out), {x}, [batch, L, C](Node<T>& n) {
    if (auto* g = detail::grad_of(n, 0))
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t l = 0; l < L; ++l)
          for (std::size_t c = 0; c < C; ++c) (*g)[(b * L + l) * C + c] += n.grad[(b * C + c) * L + l];
  });
}

namespace detail {
template <typename T>
void im2col(const T* img, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t pad, T* cols) {
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * HW;
        for (std::size_t y = 0; y < H; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(pad);
          for (std::size_t x = 0; x < W; ++x) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(pad);
            row[y * W + x] = (sy >= 0 && sy < static_cast<std::ptrdiff_t>(H) && sx >= 0 && sx < static_cast<std::ptrdiff_t>(W))
                                 ? img[(c * H + sy) * W + sx]
                                 : T{0};
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t pad, T* img) {
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * HW;
        for (std::size_t y = 0; y < H; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(pad);
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t x = 0; x < W; ++x) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(pad);
            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
            img[(c * H + sy) * W + sx] += row[y * W + x];
          }
        }
      }
}
}  // namespace detail

/// Stride-1 square convolution with zero padding. x[B,Ci,H,W], w[Co,Ci,k,k].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>* b, std::size_t pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || 2 * pad + 1 != ws[2]) {
    throw ShapeError("conv2d: x " + shape_str(xs) + " w " + shape_str(ws));
  }
  const std::size_t B = xs[0], Ci = xs[1], H = xs[2], W = xs[3], Co = ws[0], k = ws[2];
  const std::size_t HW = H * W, K = Ci * k * k;
  if (b && b->numel() != Co) throw ShapeError("conv2d: bias " + shape_str(b->shape()));
  Tensor<T> out({B, Co, H, W});
  std::vector<T> cols(k == 1 ? 0 : K * HW);
  for (std::size_t n = 0; n < B; ++n) {
    const T* img = x.value().data.data() + n * Ci * HW;
    const T* src = img;
    if (k != 1) {
      detail::im2col(img, Ci, H, W, k, pad, cols.data());
      src = cols.data();
    }
    T* y = out.data.data() + n * Co * HW;
    if (b)
      for (std::size_t o = 0; o < Co; ++o) std::fill(y + o * HW, y + (o + 1) * HW, b->value()[o]);
    blas::gemm_nn(Co, HW, K, w.value().data.data(), src, y);
  }
  std::vector<Var<T>> parents{x, w};
  if (b) parents.push_back(*b);
  return make_op<T>(std::move(out), std::move(parents), [=](Node<T>& nd) {
    auto* gx = detail::grad_of(nd, 0);
    auto* gw = detail::grad_of(nd, 1);
    auto* gb = nd.parents.size() > 2 ? detail::grad_of(nd, 2) : nullptr;
    const auto& xv = nd.parents[0]->value.data;
    const auto& wv = nd.parents[1]->value.data;
    std::vector<T> cols(k == 1 ? 0 : K * HW), gcols(K * HW);
    for (std::size_t n = 0; n < B; ++n) {
      const T* gy = nd.grad.data() + n * Co * HW;
      if (gb)
        for (std::size_t o = 0; o < Co; ++o)
          for (std::size_t i = 0; i < HW; ++i) (*gb)[o] += gy[o * HW + i];
      if (gw) {
        const T* src = xv.data() + n * Ci * HW;
        if (k != 1) {
          detail::im2col(src, Ci, H, W, k, pad, cols.data());
          src = cols.data();
        }
        blas::gemm_nt(Co, K, HW, gy, src, gw->data());
      }
      if (gx) {
        if (k == 1) {
          blas::gemm_tn(Ci, HW, Co, wv.data(), gy, gx->data() + n * Ci * HW);
        } else {
          std::fill(gcols.begin(), gcols.end(), T{0});
          blas::gemm_tn(K, HW, Co, wv.data(), gy, gcols.data());
          detail::col2im(gcols.data(), Ci, H, W, k, pad, gx->data() + n * Ci * HW);
        }
      }
    }
  });
}

/// Per-channel running statistics owned by a batch-norm layer.
template <typename T>
struct BatchNormBuffers {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

/// Batch normalization over (B, H, W) per channel. In training mode the
/// batch statistics normalize and the running buffers are updated with the
/// unbiased variance; in eval mode the running buffers normalize.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormBuffers<T>& buffers,
                  bool training, T momentum, T eps) {
  const auto& xs = x.shape();
  if (xs.size() != 4 || gamma.numel() != xs[1] || beta.numel() != xs[1]) {
    throw ShapeError("batch_norm: x " + shape_str(xs));
  }
  const std::size_t B = xs[0], C = xs[1], HW = xs[2] * xs[3], count = B * HW;
  const auto& xv = x.value().data;
  std::vector<T> mean(C), inv_std(C);
  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      T m{0};
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < HW; ++i) m += xv[(n * C + c) * HW + i];
      m /= static_cast<T>(count);
      T v{0};
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
          const T d = xv[(n * C + c) * HW + i] - m;
          v += d * d;
        }
      const T biased = v / static_cast<T>(count);
      const T unbiased = count > 1 ? v / static_cast<T>(count - 1) : biased;
      mean[c] = m;
      inv_std[c] = T{1} / std::sqrt(biased + eps);
      buffers.running_mean[c] = (T{1} - momentum) * buffers.running_mean[c] + momentum * m;
      buffers.running_var[c] = (T{1} - momentum) * buffers.running_var[c] + momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = buffers.running_mean[c];
      inv_std[c] = T{1} / std::sqrt(buffers.running_var[c] + eps);
    }
  }
  Tensor<T> out(xs);
  std::vector<T> xhat(xv.size());
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (n * C + c) * HW + i;
        xhat[idx] = (xv[idx] - mean[c]) * inv_std[c];
        out[idx] = xhat[idx] * gamma.value()[c] + beta.value()[c];
      }
  return make_op<T>(std::move(out), {x, gamma, beta},
                    [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& nd) {
                      const auto& g = nd.grad;
                      const auto& gam = nd.parents[1]->value.data;
                      std::vector<T> sum_g(C, T{0}), sum_gx(C, T{0});
                      for (std::size_t n = 0; n < B; ++n)
                        for (std::size_t c = 0; c < C; ++c)
                          for (std::size_t i = 0; i < HW; ++i) {
                            const std::size_t idx = (n * C + c) * HW + i;
                            sum_g[c] += g[idx];
                            sum_gx[c] += g[idx] * xhat[idx];
                          }
                      if (auto* gx = detail::grad_of(nd, 0)) {
                        const T invN = T{1} / static_cast<T>(count);
                        for (std::size_t n = 0; n < B; ++n)
                          for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t i = 0; i < HW; ++i) {
                              const std::size_t idx = (n * C + c) * HW + i;
                              if (training) {
                                (*gx)[idx] += gam[c] * inv_std[c] *
                                              (g[idx] - invN * sum_g[c] - xhat[idx] * invN * sum_gx[c]);
                              } else {
                                (*gx)[idx] += gam[c] * inv_std[c] * g[idx];
                              }
                            }
                      }
                      if (auto* gg = detail::grad_of(nd, 1))
                        for (std::size_t c = 0; c < C; ++c) (*gg)[c] += sum_gx[c];
                      if (auto* gb = detail::grad_of(nd, 2))
                        for (std::size_t c = 0; c < C; ++c) (*gb)[c] += sum_g[c];
                    });
}

/// Concatenates [B, Ci, H, W] tensors along the channel axis.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const std::size_t B = xs[0].shape()[0], H = xs[0].shape()[2], W = xs[0].shape()[3];
  std::size_t C = 0;
  std::vector<std::size_t> chans;
  for (const auto& x : xs) {
    if (x.shape().size() != 4 || x.shape()[0] != B || x.shape()[2] != H || x.shape()[3] != W) {
      throw ShapeError("concat_channels: " + shape_str(x.shape()) + " vs " + shape_str(xs[0].shape()));
    }
    chans.push_back(x.shape()[1]);
    C += x.shape()[1];
  }
  const std::size_t HW = H * W;
  Tensor<T> out({B, C, H, W});
  std::size_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (std::size_t n = 0; n < B; ++n)
      std::copy_n(xs[k].value().data.data() + n * chans[k] * HW, chans[k] * HW, out.data.data() + (n * C + off) * HW);
    off += chans[k];
  }
  return make_op<T>(std::move(out), xs, [=](Node<T>& nd) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < chans.size(); ++k) {
      if (auto* g = detail::grad_of(nd, k))
        for (std::size_t n = 0; n < B; ++n)
          for (std::size_t i = 0; i < chans[k] * HW; ++i) (*g)[n * chans[k] * HW + i] += nd.grad[(n * C + off) * HW + i];
      off += chans[k];
    }
  });
}

namespace detail {
/// Source taps for half-pixel-centre bilinear resampling (align_corners=false).
struct LinearTap {
  std::size_t i0, i1;
  double w1;
};
inline std::vector<LinearTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace detail

/// Bilinear resize of x[B, C, h, w] to [B, C, H, W].
template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, std::size_t H, std::size_t W) {
  const auto& xs = x.shape();
  if (xs.size() != 4) throw ShapeError("upsample_bilinear: " + shape_str(xs));
  const std::size_t B = xs[0], C = xs[1], h = xs[2], w = xs[3];
  auto ty = detail::bilinear_taps(h, H);
  auto tx = detail::bilinear_taps(w, W);
  Tensor<T> out({B, C, H, W});
  for (std::size_t p = 0; p < B * C; ++p) {
    const T* src = x.value().data.data() + p * h * w;
    T* dst = out.data.data() + p * H * W;
    for (std::size_t oy = 0; oy < H; ++oy) {
      const T wy1 = static_cast<T>(ty[oy].w1), wy0 = T{1} - wy1;
      for (std::size_t ox = 0; ox < W; ++ox) {
        const T wx1 = static_cast<T>(tx[ox].w1), wx0 = T{1} - wx1;
        dst[oy * W + ox] = wy0 * (wx0 * src[ty[oy].i0 * w + tx[ox].i0] + wx1 * src[ty[oy].i0 * w + tx[ox].i1]) +
                           wy1 * (wx0 * src[ty[oy].i1 * w + tx[ox].i0] + wx1 * src[ty[oy].i1 * w + tx[ox].i1]);
      }
    }
  }
  return make_op<T>(std::move(out), {x}, [=, ty = std::move(ty), tx = std::move(tx)](Node<T>& nd) {
    auto* g = detail::grad_of(nd, 0);
    if (!g) return;
    for (std::size_t p = 0; p < B * C; ++p) {
      T* src = g->data() + p * h * w;
      const T* dst = nd.grad.data() + p * H * W;
      for (std::size_t oy = 0; oy < H; ++oy) {
        const T wy1 = static_cast<T>(ty[oy].w1), wy0 = T{1} - wy1;
        for (std::size_t ox = 0; ox < W; ++ox) {
          const T wx1 = static_cast<T>(tx[ox].w1), wx0 = T{1} - wx1;
          const T gv = dst[oy * W + ox];
          src[ty[oy].i0 * w + tx[ox].i0] += gv * wy0 * wx0;
          src[ty[oy].i0 * w + tx[ox].i1] += gv * wy0 * wx1;
          src[ty[oy].i1 * w + tx[ox].i0] += gv * wy1 * wx0;
          src[ty[oy].i1 * w + tx[ox].i1] += gv * wy1 * wx1;
        }
      }
    }
  });
}

/// Σ x_i * weights_i, the standard probe for gradient checks.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
  if (weights.numel() != x.numel()) throw ShapeError("weighted_sum: size mismatch");
  T s{0};
  for (std::size_t i = 0; i < x.numel(); ++i) s += x.value()[i] * weights[i];
  return make_op<T>(Tensor<T>({1}, std::vector<T>{s}), {x}, [weights](Node<T>& n) {
    if (auto* g = detail::grad_of(n, 0))
      for (std::size_t i = 0; i < weights.numel(); ++i) (*g)[i] += n.grad[0] * weights[i];
  });
}

}  // namespace ops
}  // namespace nucleisam
