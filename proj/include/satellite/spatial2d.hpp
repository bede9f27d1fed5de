#pragma once

// Exact k-nearest neighbors among 2-D embedding points using a uniform grid
// and ring search. Same contract as knn_exact (ties to the lower index), but
// near-linear for the point clouds produced by the layouts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "satellite/embedding.hpp"
#include "satellite/error.hpp"

namespace satellite {

struct Knn2d {
  std::size_t k = 0;
  /// n x k, ascending by (distance, index).
  std::vector<std::uint32_t> indices;
  std::vector<double> distances;
};

inline Knn2d knn_2d(const Embedding& e, std::size_t k) {
  const std::size_t n = e.n();
  require(k >= 1 && k < n, ErrorKind::parameter,
          "k must satisfy 1 <= k < n (k=" + std::to_string(k) + ", n=" + std::to_string(n) + ")");
  double min_x = std::numeric_limits<double>::infinity(), min_y = min_x;
  double max_x = -min_x, max_y = -min_x;
  for (std::size_t i = 0; i < n; ++i) {
    min_x = std::min(min_x, double(e.x(i)));
    max_x = std::max(max_x, double(e.x(i)));
    min_y = std::min(min_y, double(e.y(i)));
    max_y = std::max(max_y, double(e.y(i)));
  }
  const double span = std::max({max_x - min_x, max_y - min_y, 1e-30});
  // About k points per occupied cell for uniform data.
  const auto side = static_cast<std::int64_t>(
      std::clamp(std::sqrt(static_cast<double>(n) / static_cast<double>(k)), 1.0, 2048.0));
  const double cell = span / static_cast<double>(side) * (1.0 + 1e-9);
  auto cell_of = [&](double v, double lo) {
    return std::clamp<std::int64_t>(static_cast<std::int64_t>((v - lo) / cell), 0, side - 1);
  };

  std::vector<std::vector<std::uint32_t>> cells(static_cast<std::size_t>(side * side));
  for (std::uint32_t i = 0; i < n; ++i) {
    cells[static_cast<std::size_t>(cell_of(e.x(i), min_x) * side + cell_of(e.y(i), min_y))].push_back(i);
  }

  Knn2d out;
  out.k = k;
  out.indices.resize(n * k);
  out.distances.resize(n * k);
  std::vector<std::pair<double, std::uint32_t>> cand;
  auto closer = [](const auto& a, const auto& b) { return a.first < b.first || (a.first == b.first && a.second < b.second); };
  for (std::size_t i = 0; i < n; ++i) {
    const double px = e.x(i), py = e.y(i);
    const auto cx = cell_of(px, min_x), cy = cell_of(py, min_y);
    cand.clear();
    auto visit = [&](std::int64_t gx, std::int64_t gy) {
      if (gx < 0 || gy < 0 || gx >= side || gy >= side) return;
      for (auto j : cells[static_cast<std::size_t>(gx * side + gy)]) {
        if (j == i) continue;
        cand.emplace_back(std::hypot(px - double(e.x(j)), py - double(e.y(j))), j);
      }
    };
    for (std::int64_t r = 0;; ++r) {
      if (r == 0) {
        visit(cx, cy);
      } else {
        for (std::int64_t t = -r; t <= r; ++t) {
          visit(cx + t, cy - r);
          visit(cx + t, cy + r);
        }
        for (std::int64_t t = -r + 1; t <= r - 1; ++t) {
          visit(cx - r, cy + t);
          visit(cx + r, cy + t);
        }
      }
      // Every unvisited point is at least r * cell away from the query.
      const bool exhausted = r >= side;
      if (cand.size() >= k) {
        std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k - 1), cand.end(), closer);
        if (cand[k - 1].first < static_cast<double>(r) * cell || exhausted) break;
      } else if (exhausted) {
        break;
      }
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), closer);
    for (std::size_t t = 0; t < k; ++t) {
      out.indices[i * k + t] = cand[t].second;
      out.distances[i * k + t] = cand[t].first;
    }
  }
  return out;
}

}  // namespace satellite
