#pragma once

// Small dense helpers: column-major blocks of vectors, Gram-Schmidt, and a
// cyclic Jacobi eigensolver for the tiny Rayleigh-Ritz matrices used by the
// spectral initializer.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

namespace satellite::linalg {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline void scale(std::span<double> x, double s) {
  for (double& v : x) v *= s;
}

/// Makes `v` orthogonal to every vector in `basis` (assumed orthonormal);
/// two passes of classical Gram-Schmidt.
inline void orthogonalize(std::span<double> v, const std::vector<std::vector<double>>& basis) {
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto& b : basis) axpy(-dot(b, v), b, v);
  }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. `a` is an m x m
/// row-major symmetric matrix. Returns eigenvalues in descending order and
/// the matching eigenvectors as rows of `vectors`.
inline void jacobi_eigen(std::vector<double> a, std::size_t m, std::vector<double>& values,
                         std::vector<double>& vectors) {
  std::vector<double> v(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) v[i * m + i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < m; ++p)
      for (std::size_t q = p + 1; q < m; ++q) off += a[p * m + q] * a[p * m + q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < m; ++p) {
      for (std::size_t q = p + 1; q < m; ++q) {
        const double apq = a[p * m + q];
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a[q * m + q] - a[p * m + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < m; ++k) {
          const double akp = a[k * m + p];
          const double akq = a[k * m + q];
          a[k * m + p] = c * akp - s * akq;
          a[k * m + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < m; ++k) {
          const double apk = a[p * m + k];
          const double aqk = a[q * m + k];
          a[p * m + k] = c * apk - s * aqk;
          a[q * m + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < m; ++k) {
          const double vkp = v[k * m + p];
          const double vkq = v[k * m + q];
          v[k * m + p] = c * vkp - s * vkq;
          v[k * m + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x * m + x] > a[y * m + y]; });
  values.resize(m);
  vectors.assign(m * m, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    values[r] = a[order[r] * m + order[r]];
    for (std::size_t k = 0; k < m; ++k) vectors[r * m + k] = v[k * m + order[r]];
  }
}

/// Flips `v` so that its largest-magnitude entry is positive.
inline void canonical_sign(std::span<double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (std::abs(v[i]) > std::abs(v[best])) best = i;
  }
  if (!v.empty() && v[best] < 0) scale(v, -1.0);
}

}  // namespace satellite::linalg
