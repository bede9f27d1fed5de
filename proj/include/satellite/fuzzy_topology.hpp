#pragma once

// Fuzzy topological representation of a kNN graph: per-point smooth-kNN
// calibration, directed membership strengths, probabilistic t-conorm
// symmetrization, and connected components of the result.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "satellite/error.hpp"
#include "satellite/neighbor_graph.hpp"
#include "satellite/parallel.hpp"

namespace satellite {

struct SmoothKnnOptions {
  /// Bisection bounds are [min_scale, max_scale] * mean row distance.
  double min_scale = 1e-3;
  double max_scale = 1e3;
  std::size_t max_iters = 64;
  double tolerance = 1e-5;
  /// Floor on the mean row distance, so all-zero rows still get sigma > 0.
  double mean_floor = 1e-12;
  std::size_t threads = 1;
};

struct Calibration {
  std::vector<double> rho;
  std::vector<double> sigma;
  /// Rows where no root exists inside the bisection bounds; sigma sits on a
  /// bound and the log2(k) target is not met.
  std::vector<std::uint8_t> clamped;

  std::size_t clamped_count() const {
    return static_cast<std::size_t>(std::count(clamped.begin(), clamped.end(), std::uint8_t{1}));
  }
};

/// Sum of exp(-max(0, d - rho) / sigma) over one row.
inline double smooth_knn_sum(std::span<const float> row, double rho, double sigma) {
  double s = 0.0;
  for (float d : row) s += std::exp(-std::max(0.0, double(d) - rho) / sigma);
  return s;
}

struct RowCalibration {
  double rho = 0.0;
  double sigma = 0.0;
  bool clamped = false;
};

inline RowCalibration calibrate_row(std::span<const float> row, const SmoothKnnOptions& opts = {}) {
  RowCalibration out;
  double total = 0.0;
  for (float d : row) {
    total += d;
    if (d > 0.0f && (out.rho == 0.0 || d < out.rho)) out.rho = d;
  }
  const double mean = std::max(total / static_cast<double>(row.size()), opts.mean_floor);
  const double target = std::log2(static_cast<double>(row.size()));
  double lo = opts.min_scale * mean;
  double hi = opts.max_scale * mean;

  // The sum is increasing in sigma, so a root exists iff target lies between
  // the sums at the two bounds.
  if (smooth_knn_sum(row, out.rho, lo) >= target) {
    out.sigma = lo;
    out.clamped = smooth_knn_sum(row, out.rho, lo) - target > opts.tolerance;
    return out;
  }
  if (smooth_knn_sum(row, out.rho, hi) <= target) {
    out.sigma = hi;
    out.clamped = target - smooth_knn_sum(row, out.rho, hi) > opts.tolerance;
    return out;
  }
  double mid = 0.5 * (lo + hi);
  for (std::size_t it = 0; it < opts.max_iters; ++it) {
    mid = 0.5 * (lo + hi);
    const double residual = smooth_knn_sum(row, out.rho, mid) - target;
    if (std::abs(residual) < opts.tolerance) break;
    (residual > 0.0 ? hi : lo) = mid;
  }
  out.sigma = mid;
  return out;
}

inline Calibration calibrate_smooth_knn(const NeighborGraph& g, const SmoothKnnOptions& opts = {}) {
  require(g.k() >= 2, ErrorKind::parameter, "smooth-kNN calibration needs k >= 2");
  Calibration c;
  c.rho.resize(g.n());
  c.sigma.resize(g.n());
  c.clamped.resize(g.n());
  parallel_for(g.n(), opts.threads, [&](std::size_t i) {
    const auto r = calibrate_row(g.distances(i), opts);
    c.rho[i] = r.rho;
    c.sigma[i] = r.sigma;
    c.clamped[i] = r.clamped ? 1 : 0;
  });
  return c;
}

inline nlohmann::json calibration_to_json(const Calibration& c) {
  return nlohmann::json{{"rho", c.rho}, {"sigma", c.sigma}, {"clamped", c.clamped}};
}

struct FuzzyEdge {
  std::uint32_t i;
  std::uint32_t j;
  double weight;

  friend bool operator==(const FuzzyEdge&, const FuzzyEdge&) = default;
};

/// Sparse weighted graph with weights in (0, 1], edges sorted by (i, j).
/// A symmetric graph stores both directions of every pair.
class FuzzyGraph {
 public:
  FuzzyGraph() = default;

  FuzzyGraph(std::size_t n, std::vector<FuzzyEdge> edges, bool symmetric)
      : n_(n), edges_(std::move(edges)), symmetric_(symmetric) {
    std::sort(edges_.begin(), edges_.end(),
              [](const FuzzyEdge& a, const FuzzyEdge& b) { return a.i < b.i || (a.i == b.i && a.j < b.j); });
    for (std::size_t e = 0; e < edges_.size(); ++e) {
      const auto& ed = edges_[e];
      require(ed.i < n_ && ed.j < n_, ErrorKind::validation, "fuzzy edge index out of range");
      require(ed.i != ed.j, ErrorKind::validation, "self-edge at " + std::to_string(ed.i));
      require(ed.weight > 0.0 && ed.weight <= 1.0, ErrorKind::validation,
              "fuzzy weight outside (0,1] on edge " + std::to_string(ed.i) + "->" + std::to_string(ed.j));
      require(e == 0 || edges_[e - 1].i != ed.i || edges_[e - 1].j != ed.j, ErrorKind::validation,
              "duplicate fuzzy edge " + std::to_string(ed.i) + "->" + std::to_string(ed.j));
    }
    if (symmetric_) {
      for (const auto& ed : edges_) {
        const auto w = weight(ed.j, ed.i);
        require(w && *w == ed.weight, ErrorKind::validation, "graph flagged symmetric but is not");
      }
    }
  }

  std::size_t n() const { return n_; }
  bool symmetric() const { return symmetric_; }
  const std::vector<FuzzyEdge>& edges() const { return edges_; }

  std::optional<double> weight(std::uint32_t i, std::uint32_t j) const {
    auto it = std::lower_bound(edges_.begin(), edges_.end(), std::pair{i, j}, [](const FuzzyEdge& e, auto key) {
      return e.i < key.first || (e.i == key.first && e.j < key.second);
    });
    if (it == edges_.end() || it->i != i || it->j != j) return std::nullopt;
    return it->weight;
  }

  /// CSR row offsets into edges(); edges of point i are [offsets[i], offsets[i+1]).
  std::vector<std::size_t> row_offsets() const {
    std::vector<std::size_t> off(n_ + 1, 0);
    for (const auto& e : edges_) ++off[e.i + 1];
    std::partial_sum(off.begin(), off.end(), off.begin());
    return off;
  }

  double max_weight() const {
    double m = 0.0;
    for (const auto& e : edges_) m = std::max(m, e.weight);
    return m;
  }

 private:
  std::size_t n_ = 0;
  std::vector<FuzzyEdge> edges_;
  bool symmetric_ = false;
};

/// Directed strengths w(i->j) = exp(-max(0, d_ij - rho_i) / sigma_i). Edges
/// whose strength underflows to 0 are dropped.
inline FuzzyGraph membership_strengths(const NeighborGraph& g, const Calibration& c) {
  require(c.rho.size() == g.n() && c.sigma.size() == g.n(), ErrorKind::alignment,
          "calibration size does not match graph");
  std::vector<FuzzyEdge> edges;
  edges.reserve(g.n() * g.k());
  for (std::size_t i = 0; i < g.n(); ++i) {
    const auto nbrs = g.neighbors(i);
    const auto dists = g.distances(i);
    for (std::size_t t = 0; t < g.k(); ++t) {
      const double w = std::exp(-std::max(0.0, double(dists[t]) - c.rho[i]) / c.sigma[i]);
      if (w > 0.0) edges.push_back({static_cast<std::uint32_t>(i), nbrs[t], std::min(w, 1.0)});
    }
  }
  return FuzzyGraph(g.n(), std::move(edges), false);
}

/// Probabilistic t-conorm: w(i,j) + w(j,i) - w(i,j) w(j,i), missing edges
/// counting as 0. Each unordered pair is evaluated once, so the result is
/// exactly symmetric.
inline FuzzyGraph fuzzy_union(const FuzzyGraph& directed) {
  std::vector<FuzzyEdge> out;
  out.reserve(2 * directed.edges().size());
  for (const auto& e : directed.edges()) {
    const auto back = directed.weight(e.j, e.i);
    if (back && e.j < e.i) continue;  // pair already emitted from (j, i)
    const double a = e.weight;
    const double b = back.value_or(0.0);
    const double w = a + b - a * b;
    out.push_back({e.i, e.j, w});
    out.push_back({e.j, e.i, w});
  }
  return FuzzyGraph(directed.n(), std::move(out), true);
}

/// Union-find labeling. Labels are numbered by the lowest point index in each
/// component, so the labeling is canonical.
inline std::vector<int> connected_components(const FuzzyGraph& fg) {
  std::vector<std::uint32_t> parent(fg.n());
  std::iota(parent.begin(), parent.end(), 0u);
  auto find = [&](std::uint32_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };
  for (const auto& e : fg.edges()) {
    const auto a = find(e.i);
    const auto b = find(e.j);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
  std::vector<int> label(fg.n(), -1);
  std::vector<int> root_label(fg.n(), -1);
  int next = 0;
  for (std::uint32_t i = 0; i < fg.n(); ++i) {
    const auto r = find(i);
    if (root_label[r] < 0) root_label[r] = next++;
    label[i] = root_label[r];
  }
  return label;
}

inline std::size_t component_count(const std::vector<int>& labels) {
  if (labels.empty()) return 0;
  return static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end()) + 1);
}

/// Calibrate, compute strengths and symmetrize exactly once.
inline FuzzyGraph build_fuzzy_graph(const NeighborGraph& g, const SmoothKnnOptions& opts = {},
                                    Calibration* calibration_out = nullptr) {
  auto calibration = calibrate_smooth_knn(g, opts);
  const auto directed = membership_strengths(g, calibration);
  if (calibration_out) *calibration_out = std::move(calibration);
  return fuzzy_union(directed);
}

}  // namespace satellite
