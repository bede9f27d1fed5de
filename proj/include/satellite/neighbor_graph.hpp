#pragma once

// k-nearest-neighbor graphs over feature rows.
//
// Graph cache layout (little-endian):
//   "KNNGRPH1" | u32 version = 1 | u64 n | u64 k | u32 metric tag
//   | n*k u32 neighbor indices | n*k binary32 distances

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "satellite/binary_io.hpp"
#include "satellite/error.hpp"
#include "satellite/feature_store.hpp"
#include "satellite/parallel.hpp"
#include "satellite/random.hpp"

namespace satellite {

enum class Metric : std::uint32_t { euclidean = 0, cosine = 1 };

constexpr std::string_view to_string(Metric m) {
  return m == Metric::euclidean ? "euclidean" : "cosine";
}

inline Metric parse_metric(std::string_view s) {
  if (s == "euclidean") return Metric::euclidean;
  if (s == "cosine") return Metric::cosine;
  fail(ErrorKind::parameter, "unknown metric \"" + std::string(s) + "\"");
}

/// Row-wise distance evaluator. Cosine norms are precomputed once.
class DistanceFn {
 public:
  DistanceFn(const FeatureMatrix& m, Metric metric) : m_(m), metric_(metric) {
    if (metric_ == Metric::cosine) {
      norms_.resize(m.n_samples());
      for (std::size_t i = 0; i < m.n_samples(); ++i) {
        double s = 0.0;
        for (float v : m.row(i)) s += double(v) * v;
        norms_[i] = std::sqrt(s);
      }
    }
  }

  double operator()(std::size_t i, std::size_t j) const {
    const auto a = m_.row(i);
    const auto b = m_.row(j);
    if (metric_ == Metric::euclidean) {
      double s = 0.0;
      for (std::size_t t = 0; t < a.size(); ++t) {
        const double diff = double(a[t]) - double(b[t]);
        s += diff * diff;
      }
      return std::sqrt(s);
    }
    const double na = norms_[i];
    const double nb = norms_[j];
    if (na == 0.0 && nb == 0.0) return 0.0;
    if (na == 0.0 || nb == 0.0) return 1.0;
    double dot = 0.0;
    for (std::size_t t = 0; t < a.size(); ++t) dot += double(a[t]) * double(b[t]);
    return std::clamp(1.0 - dot / (na * nb), 0.0, 2.0);
  }

 private:
  const FeatureMatrix& m_;
  Metric metric_;
  std::vector<double> norms_;
};

class NeighborGraph {
 public:
  NeighborGraph() = default;

  NeighborGraph(std::size_t n, std::size_t k, Metric metric, std::vector<std::uint32_t> neighbors,
                std::vector<float> distances)
      : n_(n), k_(k), metric_(metric), neighbors_(std::move(neighbors)), distances_(std::move(distances)) {
    validate();
  }

  std::size_t n() const { return n_; }
  std::size_t k() const { return k_; }
  Metric metric() const { return metric_; }
  std::span<const std::uint32_t> neighbors(std::size_t i) const {
    return std::span<const std::uint32_t>(neighbors_).subspan(i * k_, k_);
  }
  std::span<const float> distances(std::size_t i) const {
    return std::span<const float>(distances_).subspan(i * k_, k_);
  }
  std::span<const std::uint32_t> all_neighbors() const { return neighbors_; }
  std::span<const float> all_distances() const { return distances_; }

  friend bool operator==(const NeighborGraph&, const NeighborGraph&) = default;

 private:
  void validate() const {
    require(neighbors_.size() == n_ * k_ && distances_.size() == n_ * k_, ErrorKind::validation,
            "neighbor graph storage does not match n*k");
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t j = 0; j < k_; ++j) {
        const auto nb = neighbors_[i * k_ + j];
        const float d = distances_[i * k_ + j];
        require(nb < n_, ErrorKind::validation, "neighbor index out of range in row " + std::to_string(i));
        require(nb != i, ErrorKind::validation, "row " + std::to_string(i) + " lists itself");
        require(std::isfinite(d) && d >= 0.0f, ErrorKind::validation,
                "invalid distance in row " + std::to_string(i));
        require(j == 0 || distances_[i * k_ + j - 1] <= d, ErrorKind::validation,
                "distances not ascending in row " + std::to_string(i));
      }
    }
  }

  std::size_t n_ = 0;
  std::size_t k_ = 0;
  Metric metric_ = Metric::euclidean;
  std::vector<std::uint32_t> neighbors_;
  std::vector<float> distances_;
};

namespace detail {

inline void check_k(std::size_t k, std::size_t n) {
  if (k < 1 || k >= n) {
    fail(ErrorKind::parameter, "k must satisfy 1 <= k < n_samples (k=" + std::to_string(k) +
                                   ", n_samples=" + std::to_string(n) + ")");
  }
}

struct Candidate {
  float dist;
  std::uint32_t index;
  bool is_new;
};

inline bool closer(const Candidate& a, const Candidate& b) {
  return a.dist < b.dist || (a.dist == b.dist && a.index < b.index);
}

}  // namespace detail

/// Exact k-nearest neighbors by brute force. Ties at equal distance go to the
/// lower row index. Rows are processed in parallel; output does not depend on
/// the worker count.
inline NeighborGraph knn_exact(const FeatureMatrix& m, std::size_t k, Metric metric = Metric::euclidean,
                               std::size_t threads = 1) {
  const std::size_t n = m.n_samples();
  detail::check_k(k, n);
  const DistanceFn dist(m, metric);
  std::vector<std::uint32_t> neighbors(n * k);
  std::vector<float> distances(n * k);

  parallel_for_chunks(n, threads, [&](std::size_t begin, std::size_t end) {
    std::vector<detail::Candidate> row(n - 1);
    for (std::size_t i = begin; i < end; ++i) {
      std::size_t c = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        row[c++] = {static_cast<float>(dist(i, j)), static_cast<std::uint32_t>(j), false};
      }
      std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k), row.end(), detail::closer);
      for (std::size_t t = 0; t < k; ++t) {
        neighbors[i * k + t] = row[t].index;
        distances[i * k + t] = row[t].dist;
      }
    }
  });
  return NeighborGraph(n, k, metric, std::move(neighbors), std::move(distances));
}

struct NnDescentOptions {
  std::size_t max_iters = 20;
  /// Cap on forward+reverse candidates explored per point and iteration.
  std::size_t max_candidates = 0;  // 0: max(2k, 20)
  /// Stop once an iteration changes fewer than this fraction of n*k entries.
  double delta = 0.001;
  std::size_t threads = 1;
  /// Points whose candidate pairs are evaluated between update barriers.
  std::size_t block_size = 512;
};

/// Approximate kNN by neighbor-of-neighbor exploration (NN-descent) from a
/// random initial graph, sampling rate 1.0. Deterministic for a fixed seed:
/// candidate distances are computed in parallel per block, but applied to the
/// neighbor lists in one canonical order.
inline NeighborGraph knn_descent(const FeatureMatrix& m, std::size_t k, Metric metric, std::uint64_t rng_seed,
                                 const NnDescentOptions& opts = {}) {
  using detail::Candidate;
  const std::size_t n = m.n_samples();
  detail::check_k(k, n);
  const DistanceFn dist(m, metric);
  Rng rng(rng_seed);
  const std::size_t cap = std::min(n - 1, opts.max_candidates ? opts.max_candidates : std::max<std::size_t>(2 * k, 20));

  // Sorted (dist, index) lists of length k per point.
  std::vector<Candidate> heap(n * k);
  {
    std::vector<std::uint32_t> pool;
    for (std::size_t i = 0; i < n; ++i) {
      // Partial Fisher-Yates over all other indices; k of them.
      if (pool.size() != n - 1) pool.resize(n - 1);
      std::size_t c = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i) pool[c++] = static_cast<std::uint32_t>(j);
      }
      for (std::size_t t = 0; t < k; ++t) {
        const std::size_t r = t + uniform_index(rng, n - 1 - t);
        std::swap(pool[t], pool[r]);
        heap[i * k + t] = {static_cast<float>(dist(i, pool[t])), pool[t], true};
      }
      std::sort(heap.begin() + static_cast<std::ptrdiff_t>(i * k),
                heap.begin() + static_cast<std::ptrdiff_t>((i + 1) * k), detail::closer);
    }
  }

  auto try_insert = [&](std::size_t i, std::uint32_t j, float d) -> bool {
    Candidate* row = heap.data() + i * k;
    const Candidate cand{d, j, true};
    if (!detail::closer(cand, row[k - 1])) return false;
    for (std::size_t t = 0; t < k; ++t) {
      if (row[t].index == j) return false;
    }
    std::size_t pos = k - 1;
    while (pos > 0 && detail::closer(cand, row[pos - 1])) {
      row[pos] = row[pos - 1];
      --pos;
    }
    row[pos] = cand;
    return true;
  };

  // Keeps at most `cap` entries of `v`, chosen by seeded random priority.
  auto subsample = [&](std::vector<std::uint32_t>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    if (v.size() <= cap) return;
    for (std::size_t t = 0; t < cap; ++t) {
      const std::size_t r = t + uniform_index(rng, v.size() - t);
      std::swap(v[t], v[r]);
    }
    v.resize(cap);
    std::sort(v.begin(), v.end());
  };

  std::vector<std::vector<std::uint32_t>> new_cand(n), old_cand(n);
  struct Pair {
    std::uint32_t a, b;
  };
  std::vector<Pair> pairs;
  std::vector<float> pair_dist;

  for (std::size_t iter = 0; iter < opts.max_iters; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      new_cand[i].clear();
      old_cand[i].clear();
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < k; ++t) {
        Candidate& c = heap[i * k + t];
        if (c.is_new) {
          new_cand[i].push_back(c.index);
          new_cand[c.index].push_back(static_cast<std::uint32_t>(i));
          c.is_new = false;
        } else {
          old_cand[i].push_back(c.index);
          old_cand[c.index].push_back(static_cast<std::uint32_t>(i));
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      subsample(new_cand[i]);
      subsample(old_cand[i]);
    }

    std::size_t updates = 0;
    for (std::size_t block = 0; block < n; block += opts.block_size) {
      const std::size_t block_end = std::min(n, block + opts.block_size);
      pairs.clear();
      for (std::size_t i = block; i < block_end; ++i) {
        const auto& nc = new_cand[i];
        const auto& oc = old_cand[i];
        for (std::size_t x = 0; x < nc.size(); ++x) {
          for (std::size_t y = x + 1; y < nc.size(); ++y) pairs.push_back({nc[x], nc[y]});
          for (std::uint32_t o : oc) {
            if (o != nc[x]) pairs.push_back({nc[x], o});
          }
        }
      }
      pair_dist.resize(pairs.size());
      parallel_for(pairs.size(), opts.threads,
                   [&](std::size_t p) { pair_dist[p] = static_cast<float>(dist(pairs[p].a, pairs[p].b)); });
      for (std::size_t p = 0; p < pairs.size(); ++p) {
        updates += try_insert(pairs[p].a, pairs[p].b, pair_dist[p]) ? 1 : 0;
        updates += try_insert(pairs[p].b, pairs[p].a, pair_dist[p]) ? 1 : 0;
      }
    }
    if (static_cast<double>(updates) < opts.delta * static_cast<double>(n * k)) break;
  }

  std::vector<std::uint32_t> neighbors(n * k);
  std::vector<float> distances(n * k);
  for (std::size_t i = 0; i < n * k; ++i) {
    neighbors[i] = heap[i].index;
    distances[i] = heap[i].dist;
  }
  return NeighborGraph(n, k, metric, std::move(neighbors), std::move(distances));
}

/// Mean over rows of |approx_i ∩ exact_i| / k.
inline double knn_recall(const NeighborGraph& approx, const NeighborGraph& exact) {
  if (approx.n() != exact.n() || approx.k() != exact.k()) {
    fail(ErrorKind::parameter, "recall needs graphs of equal shape (" + std::to_string(approx.n()) + "x" +
                                   std::to_string(approx.k()) + " vs " + std::to_string(exact.n()) + "x" +
                                   std::to_string(exact.k()) + ")");
  }
  if (approx.n() == 0) return 1.0;
  double total = 0.0;
  std::vector<std::uint32_t> a, b;
  for (std::size_t i = 0; i < approx.n(); ++i) {
    a.assign(approx.neighbors(i).begin(), approx.neighbors(i).end());
    b.assign(exact.neighbors(i).begin(), exact.neighbors(i).end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<std::uint32_t> common;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    total += static_cast<double>(common.size()) / static_cast<double>(approx.k());
  }
  return total / static_cast<double>(approx.n());
}

// ---------------------------------------------------------------------------
// Graph cache

inline constexpr std::string_view kGraphMagic = "KNNGRPH1";

inline void save_graph(const NeighborGraph& g, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  io::Writer w(out);
  w.magic(kGraphMagic);
  w.scalar<std::uint32_t>(1);
  w.scalar<std::uint64_t>(g.n());
  w.scalar<std::uint64_t>(g.k());
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(g.metric()));
  w.array(g.all_neighbors());
  w.array(g.all_distances());
  out.flush();
  if (!out) fail(ErrorKind::io, "write failed: " + path.string());
}

inline NeighborGraph load_graph(const std::filesystem::path& path) {
  auto in = io::open_in(path);
  io::Reader r(in, path.string());
  r.expect_magic(kGraphMagic);
  require(r.scalar<std::uint32_t>("version") == 1, ErrorKind::format, path.string() + ": unsupported version");
  const auto n = r.scalar<std::uint64_t>("n");
  const auto k = r.scalar<std::uint64_t>("k");
  const auto tag = r.scalar<std::uint32_t>("metric");
  require(tag <= 1, ErrorKind::format, path.string() + ": unknown metric tag " + std::to_string(tag));
  require(k >= 1 && k < n && n < (std::uint64_t{1} << 32), ErrorKind::format, path.string() + ": bad shape");
  std::vector<std::uint32_t> neighbors(n * k);
  std::vector<float> distances(n * k);
  r.array(std::span<std::uint32_t>(neighbors), "indices");
  r.array(std::span<float>(distances), "distances");
  return NeighborGraph(n, k, static_cast<Metric>(tag), std::move(neighbors), std::move(distances));
}

}  // namespace satellite
