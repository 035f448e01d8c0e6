#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "error.hpp"
#include "rng.hpp"

namespace forgetmark {

/// Dense row-major tensor of 64-bit floats. Rank 1 or 2 in practice.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims)
      : shape(std::move(dims)),
        data(std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>()), 0.0) {}

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape.front(); }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  bool operator==(const Tensor&) const = default;
};

/// Ordered by name so every traversal, hash and serialization is canonical.
using TensorMap = std::map<std::string, Tensor>;

inline bool all_finite(const Tensor& t) {
  for (double v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline std::size_t parameter_count(const TensorMap& m) {
  std::size_t n = 0;
  for (const auto& [_, t] : m) n += t.size();
  return n;
}

inline TensorMap zeros_like(const TensorMap& m) {
  TensorMap out;
  for (const auto& [name, t] : m) out.emplace(name, Tensor(t.shape));
  return out;
}

/// Hash over names, shapes and the exact bit patterns of every value.
inline std::uint64_t hash_tensors(const TensorMap& m, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (const auto& [name, t] : m) {
    h = fnv1a64(name, h);
    for (std::size_t d : t.shape) h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&d), sizeof d), h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double)), h);
  }
  return h;
}

namespace linalg {

// out[n,m] = x[n,k] * w[k,m]
inline void matmul(const double* x, std::size_t n, std::size_t k, const double* w, std::size_t m, double* out) {
  std::memset(out, 0, n * m * sizeof(double));
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out + i * m;
    const double* xi = x + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = xi[p];
      if (a == 0.0) continue;
      const double* wp = w + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += a * wp[j];
    }
  }
}

// dw[k,m] += x[n,k]^T * dy[n,m]
inline void matmul_at_acc(const double* x, std::size_t n, std::size_t k, const double* dy, std::size_t m, double* dw) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x + i * k;
    const double* di = dy + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = xi[p];
      if (a == 0.0) continue;
      double* wp = dw + p * m;
      for (std::size_t j = 0; j < m; ++j) wp[j] += a * di[j];
    }
  }
}

// dx[n,k] += dy[n,m] * w[k,m]^T
inline void matmul_bt_acc(const double* dy, std::size_t n, std::size_t m, const double* w, std::size_t k, double* dx) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* di = dy + i * m;
    double* xi = dx + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* wp = w + p * m;
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += di[j] * wp[j];
      xi[p] += s;
    }
  }
}

}  // namespace linalg
}  // namespace forgetmark
