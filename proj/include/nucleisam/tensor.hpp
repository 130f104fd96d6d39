#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nucleisam {

using Shape = std::vector<std::size_t>;

/// Raised when tensor shapes do not line up for an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major tensor with value semantics.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_numel(shape)) {
      throw ShapeError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    }
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T& at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
    return data[((a * shape[1] + b) * shape[2] + c) * shape[3] + d];
  }
  const T& at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
    return data[((a * shape[1] + b) * shape[2] + c) * shape[3] + d];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel()) {
      throw ShapeError("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
    }
    return Tensor(std::move(s), data);
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  bool operator==(const Tensor&) const = default;
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape) {
    throw ShapeError("max_abs_diff: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  T m{0};
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Deterministic initializers. All draws go through std::mt19937_64 so a seed
// fixes every value bit-for-bit on a given standard library.

template <typename T>
void fill_normal(Tensor<T>& t, std::mt19937_64& rng, double std, double mean = 0.0) {
  std::normal_distribution<double> dist(mean, std);
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
}

/// Normal truncated to two standard deviations (resampled, not clipped).
template <typename T>
void fill_trunc_normal(Tensor<T>& t, std::mt19937_64& rng, double std) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.data) {
    double x = dist(rng);
    while (std::abs(x) > 2.0) x = dist(rng);
    v = static_cast<T>(x * std);
  }
}

template <typename T>
void fill_uniform(Tensor<T>& t, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
}

/// Derives an independent stream seed from a base seed and a tag.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace blas {

// Minimal row-major GEMM kernels; loop orders keep the innermost access
// contiguous.

/// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    const T* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = a[k];
      if (av == T{0}) continue;
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

/// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    T* c = C + i * N;
    for (std::size_t j = 0; j < N; ++j) {
      const T* b = B + j * K;
      T acc{0};
      for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] += acc;
    }
  }
}

/// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t k = 0; k < K; ++k) {
    const T* a = A + k * M;
    const T* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const T av = a[i];
      if (av == T{0}) continue;
      T* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace blas
}  // namespace nucleisam
