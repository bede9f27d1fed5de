#pragma once

// 2-D layout of a fuzzy graph: output-curve fit, initialization, and
// epoch-based stochastic gradient descent with negative sampling.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "satellite/embedding.hpp"
#include "satellite/error.hpp"
#include "satellite/fuzzy_topology.hpp"
#include "satellite/hash.hpp"
#include "satellite/layout_alt.hpp"
#include "satellite/linalg.hpp"
#include "satellite/log.hpp"
#include "satellite/neighbor_graph.hpp"
#include "satellite/parallel.hpp"
#include "satellite/random.hpp"

namespace satellite {

enum class InitMethod { spectral, random, pca };

constexpr std::string_view to_string(InitMethod m) {
  switch (m) {
    case InitMethod::spectral: return "spectral";
    case InitMethod::random: return "random";
    case InitMethod::pca: return "pca";
  }
  return "?";
}

inline InitMethod parse_init(std::string_view s) {
  if (s == "spectral") return InitMethod::spectral;
  if (s == "random") return InitMethod::random;
  if (s == "pca") return InitMethod::pca;
  fail(ErrorKind::parameter, "unknown init \"" + std::string(s) + "\"");
}

struct UmapConfig {
  std::size_t k = 15;
  double min_dist = 0.1;
  double spread = 1.0;
  std::size_t n_epochs = 200;
  double learning_rate = 1.0;
  std::size_t negative_sample_rate = 5;
  InitMethod init = InitMethod::spectral;
  std::uint64_t rng_seed = 42;
  Metric metric = Metric::euclidean;
  /// 1 = deterministic single-worker mode; >1 = asynchronous parallel
  /// updates (not reproducible run to run); 0 = all hardware threads.
  std::size_t threads = 1;
  /// Per-coordinate bound on a single gradient step.
  double gradient_clip = 4.0;
  /// Added to the squared distance in the repulsive denominator.
  double repulsion_floor = 1e-3;
  std::size_t spectral_max_iters = 2000;

  void validate() const {
    require(min_dist > 0.0 && spread > 0.0, ErrorKind::parameter, "min_dist and spread must be positive");
    require(min_dist < spread, ErrorKind::parameter,
            "min_dist (" + std::to_string(min_dist) + ") must be < spread (" + std::to_string(spread) + ")");
    require(n_epochs >= 1, ErrorKind::parameter, "n_epochs must be >= 1");
    require(negative_sample_rate >= 1, ErrorKind::parameter, "negative_sample_rate must be >= 1");
    require(learning_rate > 0.0, ErrorKind::parameter, "learning_rate must be positive");
  }

  /// Every parameter that affects the layout, in a stable key order.
  nlohmann::json to_json() const {
    return {{"method", "umap"},
            {"k", k},
            {"metric", std::string(to_string(metric))},
            {"min_dist", min_dist},
            {"spread", spread},
            {"n_epochs", n_epochs},
            {"learning_rate", learning_rate},
            {"negative_sample_rate", negative_sample_rate},
            {"init", std::string(to_string(init))},
            {"rng_seed", rng_seed},
            {"gradient_clip", gradient_clip},
            {"repulsion_floor", repulsion_floor},
            {"deterministic", threads == 1}};
  }

  std::string hash() const { return sha256_hex(to_json().dump()); }
};

// ---------------------------------------------------------------------------
// Output curve

struct CurveFit {
  double a = 0.0;
  double b = 0.0;
  /// Sum of squared residuals over the sample points.
  double residual = 0.0;
  std::size_t iterations = 0;
};

inline double phi(double dist, double a, double b) {
  return 1.0 / (1.0 + a * std::pow(dist, 2.0 * b));
}

/// Target membership curve: 1 up to min_dist, then exponential decay.
inline double target_curve(double x, double min_dist, double spread) {
  return x < min_dist ? 1.0 : std::exp(-(x - min_dist) / spread);
}

/// Least-squares fit of phi to the target curve on 300 evenly spaced points
/// in [0, 3 * spread], by Levenberg-Marquardt from (a, b) = (1, 1).
inline CurveFit fit_ab(double min_dist, double spread) {
  require(min_dist > 0.0 && min_dist < spread, ErrorKind::parameter,
          "fit_ab needs 0 < min_dist < spread (min_dist=" + std::to_string(min_dist) +
              ", spread=" + std::to_string(spread) + ")");
  constexpr std::size_t kSamples = 300;
  std::vector<double> xs(kSamples), ys(kSamples);
  for (std::size_t i = 0; i < kSamples; ++i) {
    xs[i] = 3.0 * spread * static_cast<double>(i) / static_cast<double>(kSamples - 1);
    ys[i] = target_curve(xs[i], min_dist, spread);
  }
  auto sse = [&](double a, double b) {
    double s = 0.0;
    for (std::size_t i = 0; i < kSamples; ++i) {
      const double r = phi(xs[i], a, b) - ys[i];
      s += r * r;
    }
    return s;
  };

  CurveFit fit{1.0, 1.0, sse(1.0, 1.0), 0};
  double lambda = 1e-3;
  bool converged = false;
  for (std::size_t it = 0; it < 1000; ++it) {
    fit.iterations = it + 1;
    // Normal equations J^T J delta = -J^T r.
    double jtj00 = 0, jtj01 = 0, jtj11 = 0, g0 = 0, g1 = 0;
    for (std::size_t i = 0; i < kSamples; ++i) {
      const double x = xs[i];
      const double p = x > 0.0 ? std::pow(x, 2.0 * fit.b) : 0.0;
      const double denom = 1.0 + fit.a * p;
      const double r = 1.0 / denom - ys[i];
      const double da = -p / (denom * denom);
      const double db = x > 0.0 ? -fit.a * p * 2.0 * std::log(x) / (denom * denom) : 0.0;
      jtj00 += da * da;
      jtj01 += da * db;
      jtj11 += db * db;
      g0 += da * r;
      g1 += db * r;
    }
    bool improved = false;
    for (int attempt = 0; attempt < 50 && !improved; ++attempt) {
      const double m00 = jtj00 * (1.0 + lambda);
      const double m11 = jtj11 * (1.0 + lambda);
      const double det = m00 * m11 - jtj01 * jtj01;
      if (det == 0.0 || !std::isfinite(det)) {
        lambda *= 10.0;
        continue;
      }
      const double step_a = -(m11 * g0 - jtj01 * g1) / det;
      const double step_b = -(m00 * g1 - jtj01 * g0) / det;
      const double na = fit.a + step_a;
      const double nb = fit.b + step_b;
      const double candidate = (na > 0.0 && nb > 0.0) ? sse(na, nb) : std::numeric_limits<double>::infinity();
      if (candidate <= fit.residual) {
        const double rel = std::abs(fit.residual - candidate) / std::max(fit.residual, 1e-300);
        const double step = std::abs(step_a) / fit.a + std::abs(step_b) / fit.b;
        fit.a = na;
        fit.b = nb;
        fit.residual = candidate;
        lambda = std::max(lambda / 10.0, 1e-12);
        improved = true;
        if (rel < 1e-15 || step < 1e-12) converged = true;
      } else {
        lambda *= 10.0;
      }
    }
    if (!improved) converged = true;  // no descent direction left: at a minimum
    if (converged) break;
  }
  if (!converged || !std::isfinite(fit.a) || !std::isfinite(fit.b)) {
    fail(ErrorKind::numeric, "curve fit did not converge (residual " + std::to_string(fit.residual) + ")");
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Gradients. Coefficients c such that the gradient with respect to y_i is
// c * (y_i - y_j), written in terms of the squared distance.

/// d/dy_i log phi(|y_i - y_j|).
inline double attractive_coefficient(double dist_sq, double a, double b) {
  if (dist_sq <= 0.0) return 0.0;
  return -2.0 * a * b * std::pow(dist_sq, b - 1.0) / (1.0 + a * std::pow(dist_sq, b));
}

/// d/dy_i log(1 - phi(|y_i - y_j|)), with `floor` added to the squared
/// distance in the denominator (floor = 0 gives the exact gradient).
inline double repulsive_coefficient(double dist_sq, double a, double b, double floor) {
  return 2.0 * b / ((floor + dist_sq) * (1.0 + a * std::pow(dist_sq, b)));
}

// ---------------------------------------------------------------------------
// Initialization

namespace detail {

/// Sub-graph in local indices.
struct LocalGraph {
  std::vector<std::uint32_t> nodes;
  std::vector<std::size_t> offsets;
  std::vector<std::uint32_t> targets;
  std::vector<double> weights;
};

inline LocalGraph extract_component(const FuzzyGraph& fg, const std::vector<int>& labels, int label) {
  LocalGraph g;
  std::vector<std::uint32_t> local(fg.n(), UINT32_MAX);
  for (std::uint32_t i = 0; i < fg.n(); ++i) {
    if (labels[i] == label) {
      local[i] = static_cast<std::uint32_t>(g.nodes.size());
      g.nodes.push_back(i);
    }
  }
  const auto off = fg.row_offsets();
  g.offsets.push_back(0);
  for (std::uint32_t node : g.nodes) {
    for (std::size_t e = off[node]; e < off[node + 1]; ++e) {
      const auto& ed = fg.edges()[e];
      g.targets.push_back(local[ed.j]);
      g.weights.push_back(ed.weight);
    }
    g.offsets.push_back(g.targets.size());
  }
  return g;
}

/// Two leading non-trivial eigenvectors of the normalized Laplacian
/// L = I - D^-1/2 W D^-1/2, i.e. the top eigenvectors of I + D^-1/2 W D^-1/2
/// after deflating the trivial one (proportional to D^1/2 1). Block power
/// iteration with Rayleigh-Ritz. Returns m x 2 row-major coordinates in the
/// random-walk normalization D^-1/2 u.
inline std::vector<double> spectral_coordinates(const LocalGraph& g, std::size_t max_iters, Rng& rng) {
  const std::size_t m = g.nodes.size();
  std::vector<double> deg(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t e = g.offsets[i]; e < g.offsets[i + 1]; ++e) deg[i] += g.weights[e];
  }
  std::vector<double> inv_sqrt(m);
  std::vector<double> trivial(m);
  for (std::size_t i = 0; i < m; ++i) {
    inv_sqrt[i] = deg[i] > 0 ? 1.0 / std::sqrt(deg[i]) : 0.0;
    trivial[i] = std::sqrt(deg[i]);
  }
  linalg::scale(trivial, 1.0 / std::max(linalg::norm(trivial), 1e-300));
  const std::vector<std::vector<double>> deflate{trivial};

  auto apply = [&](const std::vector<double>& v, std::vector<double>& out) {
    for (std::size_t i = 0; i < m; ++i) {
      double s = v[i];
      for (std::size_t e = g.offsets[i]; e < g.offsets[i + 1]; ++e) {
        s += inv_sqrt[i] * g.weights[e] * inv_sqrt[g.targets[e]] * v[g.targets[e]];
      }
      out[i] = s;
    }
  };

  const std::size_t block = std::min<std::size_t>(m - 1, 8);
  std::vector<std::vector<double>> q(block, std::vector<double>(m));
  for (auto& v : q) {
    for (double& x : v) x = normal01(rng);
  }
  auto orthonormalize = [&](std::vector<std::vector<double>>& vs) {
    std::vector<std::vector<double>> basis = deflate;
    for (auto& v : vs) {
      linalg::orthogonalize(v, basis);
      double nv = linalg::norm(v);
      if (nv < 1e-300) {
        for (double& x : v) x = normal01(rng);
        linalg::orthogonalize(v, basis);
        nv = linalg::norm(v);
      }
      linalg::scale(v, 1.0 / nv);
      basis.push_back(v);
    }
  };
  orthonormalize(q);

  std::vector<std::vector<double>> z(block, std::vector<double>(m));
  std::vector<double> ritz_values, ritz_vectors;
  auto rayleigh_ritz = [&]() {
    for (std::size_t c = 0; c < block; ++c) apply(q[c], z[c]);
    std::vector<double> h(block * block);
    for (std::size_t r = 0; r < block; ++r)
      for (std::size_t c = 0; c < block; ++c) h[r * block + c] = linalg::dot(q[r], z[c]);
    for (std::size_t r = 0; r < block; ++r)
      for (std::size_t c = r + 1; c < block; ++c) h[r * block + c] = h[c * block + r] = 0.5 * (h[r * block + c] + h[c * block + r]);
    linalg::jacobi_eigen(h, block, ritz_values, ritz_vectors);
    std::vector<std::vector<double>> rotated(block, std::vector<double>(m, 0.0));
    std::vector<std::vector<double>> rotated_z(block, std::vector<double>(m, 0.0));
    for (std::size_t r = 0; r < block; ++r) {
      for (std::size_t c = 0; c < block; ++c) {
        linalg::axpy(ritz_vectors[r * block + c], q[c], rotated[r]);
        linalg::axpy(ritz_vectors[r * block + c], z[c], rotated_z[r]);
      }
    }
    q.swap(rotated);
    // Residual of the two leading Ritz pairs.
    double res = 0.0;
    for (std::size_t r = 0; r < std::min<std::size_t>(2, block); ++r) {
      auto tmp = rotated_z[r];
      linalg::axpy(-ritz_values[r], q[r], tmp);
      res = std::max(res, linalg::norm(tmp));
    }
    return res;
  };

  for (std::size_t it = 0; it < max_iters; ++it) {
    for (std::size_t c = 0; c < block; ++c) apply(q[c], z[c]);
    q.swap(z);
    orthonormalize(q);
    if (it % 10 == 9 && rayleigh_ritz() < 1e-10) break;
  }
  rayleigh_ritz();

  // Map back to eigenvectors of the random-walk Laplacian I - D^-1 W, which
  // vary smoothly along the graph (the symmetric ones are distorted by sqrt
  // of degree).
  std::vector<double> coords(2 * m, 0.0);
  for (std::size_t c = 0; c < std::min<std::size_t>(2, block); ++c) {
    for (std::size_t i = 0; i < m; ++i) q[c][i] *= inv_sqrt[i];
    linalg::canonical_sign(q[c]);
    for (std::size_t i = 0; i < m; ++i) coords[2 * i + c] = q[c][i];
  }
  return coords;
}

/// Rescales so that max |coordinate| == 10.
inline void scale_to_box(std::vector<double>& coords, double half_width = 10.0) {
  double mx = 0.0;
  for (double v : coords) mx = std::max(mx, std::abs(v));
  if (mx > 0.0) {
    for (double& v : coords) v *= half_width / mx;
  }
}

}  // namespace detail

/// Initial coordinates in [-10, 10]^2. `features` is required for the PCA
/// initializer. A disconnected graph gets a per-component spectral layout
/// placed on a grid of component offsets, with a warning.
inline Embedding init_embedding(const FuzzyGraph& fg, const UmapConfig& cfg,
                                const FeatureMatrix* features = nullptr) {
  const std::size_t n = fg.n();
  Rng rng(cfg.rng_seed ^ 0x9E3779B97F4A7C15ull);
  std::vector<double> coords(2 * n, 0.0);

  switch (cfg.init) {
    case InitMethod::random: {
      Rng init_rng(cfg.rng_seed);
      for (double& v : coords) v = uniform(init_rng, -10.0, 10.0);
      break;
    }
    case InitMethod::pca: {
      require(features != nullptr, ErrorKind::parameter, "PCA initialization needs the feature matrix");
      require(features->n_samples() == n, ErrorKind::alignment, "feature rows do not match graph size");
      const auto e = pca_project(*features);
      for (std::size_t i = 0; i < 2 * n; ++i) coords[i] = e.coords()[i];
      detail::scale_to_box(coords);
      break;
    }
    case InitMethod::spectral: {
      const auto labels = connected_components(fg);
      const std::size_t n_comp = component_count(labels);
      if (n_comp > 1) {
        warn("graph has " + std::to_string(n_comp) +
             " connected components; using per-component spectral layout on a grid");
      }
      const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n_comp))));
      for (std::size_t c = 0; c < n_comp; ++c) {
        const auto g = detail::extract_component(fg, labels, static_cast<int>(c));
        std::vector<double> local;
        if (g.nodes.size() >= 4) {
          local = detail::spectral_coordinates(g, cfg.spectral_max_iters, rng);
        } else {
          local.resize(2 * g.nodes.size());
          for (double& v : local) v = uniform(rng, -1.0, 1.0);
        }
        detail::scale_to_box(local, n_comp > 1 ? 0.4 : 1.0);
        const double cx = n_comp > 1 ? static_cast<double>(c % side) : 0.0;
        const double cy = n_comp > 1 ? static_cast<double>(c / side) : 0.0;
        for (std::size_t t = 0; t < g.nodes.size(); ++t) {
          coords[2 * g.nodes[t]] = local[2 * t] + cx;
          coords[2 * g.nodes[t] + 1] = local[2 * t + 1] + cy;
        }
      }
      if (n_comp > 1) {
        const double centre = 0.5 * static_cast<double>(side - 1);
        for (double& v : coords) v -= centre;
      }
      detail::scale_to_box(coords);
      for (double& v : coords) v += 1e-4 * normal01(rng);
      break;
    }
  }
  std::vector<float> out(coords.begin(), coords.end());
  return Embedding(std::move(out), "init-" + std::string(to_string(cfg.init)), cfg.hash(), cfg.rng_seed);
}

// ---------------------------------------------------------------------------
// Optimization

namespace detail {

struct EdgeSchedule {
  std::vector<std::uint32_t> head;
  std::vector<std::uint32_t> tail;
  std::vector<double> epochs_per_sample;
};

/// Edges sampled once every max_weight / weight epochs; edges lighter than
/// max_weight / n_epochs would never be sampled and are dropped.
inline EdgeSchedule make_schedule(const FuzzyGraph& fg, std::size_t n_epochs) {
  EdgeSchedule s;
  const double max_w = fg.max_weight();
  const double cutoff = max_w / static_cast<double>(n_epochs);
  for (const auto& e : fg.edges()) {
    if (e.weight < cutoff) continue;
    s.head.push_back(e.i);
    s.tail.push_back(e.j);
    s.epochs_per_sample.push_back(max_w / e.weight);
  }
  return s;
}

inline double clip(double v, double bound) { return std::clamp(v, -bound, bound); }

/// Coordinate access for the two execution modes: plain floats in
/// deterministic mode, relaxed atomics when workers share the buffer.
template <bool Atomic>
struct Coords {
  float* data;
  float load(std::size_t i) const {
    if constexpr (Atomic) {
      return std::atomic_ref<float>(data[i]).load(std::memory_order_relaxed);
    } else {
      return data[i];
    }
  }
  void add(std::size_t i, float delta) const {
    if constexpr (Atomic) {
      std::atomic_ref<float> ref(data[i]);
      ref.store(ref.load(std::memory_order_relaxed) + delta, std::memory_order_relaxed);
    } else {
      data[i] += delta;
    }
  }
};

template <bool Atomic>
void run_epoch_range(const EdgeSchedule& s, std::vector<double>& next_sample, std::vector<double>& next_negative,
                     std::size_t begin, std::size_t end, double epoch, double alpha, std::size_t n_points,
                     double neg_rate, double a, double b, const UmapConfig& cfg, Coords<Atomic> y, Rng& rng) {
  for (std::size_t e = begin; e < end; ++e) {
    if (next_sample[e] > epoch) continue;
    const std::size_t j = s.head[e];
    const std::size_t k = s.tail[e];

    double dx = double(y.load(2 * j)) - y.load(2 * k);
    double dy = double(y.load(2 * j + 1)) - y.load(2 * k + 1);
    double dist_sq = dx * dx + dy * dy;
    const double ca = attractive_coefficient(dist_sq, a, b);
    const double gx = clip(ca * dx, cfg.gradient_clip) * alpha;
    const double gy = clip(ca * dy, cfg.gradient_clip) * alpha;
    y.add(2 * j, static_cast<float>(gx));
    y.add(2 * j + 1, static_cast<float>(gy));
    y.add(2 * k, static_cast<float>(-gx));
    y.add(2 * k + 1, static_cast<float>(-gy));
    next_sample[e] += s.epochs_per_sample[e];

    const double per_negative = s.epochs_per_sample[e] / neg_rate;
    const auto n_neg = static_cast<std::size_t>((epoch - next_negative[e]) / per_negative);
    for (std::size_t p = 0; p < n_neg; ++p) {
      const std::size_t other = uniform_index(rng, n_points);
      if (other == j) continue;
      dx = double(y.load(2 * j)) - y.load(2 * other);
      dy = double(y.load(2 * j + 1)) - y.load(2 * other + 1);
      dist_sq = dx * dx + dy * dy;
      double rx = cfg.gradient_clip;
      double ry = cfg.gradient_clip;
      if (dist_sq > 0.0) {
        const double cr = repulsive_coefficient(dist_sq, a, b, cfg.repulsion_floor);
        rx = clip(cr * dx, cfg.gradient_clip);
        ry = clip(cr * dy, cfg.gradient_clip);
      }
      y.add(2 * j, static_cast<float>(rx * alpha));
      y.add(2 * j + 1, static_cast<float>(ry * alpha));
    }
    next_negative[e] += static_cast<double>(n_neg) * per_negative;
  }
}

}  // namespace detail

/// Stochastic gradient descent on the fuzzy cross-entropy. Each edge is
/// sampled in proportion to its weight; every attractive update is followed
/// by negative_sample_rate repulsive ones against uniformly drawn points.
/// The learning rate decays linearly from cfg.learning_rate towards 0.
inline Embedding optimize_layout(const FuzzyGraph& fg, const Embedding& init, const UmapConfig& cfg, double a,
                                 double b) {
  cfg.validate();
  require(init.n() == fg.n(), ErrorKind::alignment,
          "initial embedding has " + std::to_string(init.n()) + " points, graph has " + std::to_string(fg.n()));
  const std::size_t n = fg.n();
  std::vector<float> y(init.coords().begin(), init.coords().end());
  const auto schedule = detail::make_schedule(fg, cfg.n_epochs);
  const std::size_t n_edges = schedule.head.size();
  const double neg_rate = static_cast<double>(cfg.negative_sample_rate);
  std::vector<double> next_sample = schedule.epochs_per_sample;
  std::vector<double> next_negative(n_edges);
  for (std::size_t e = 0; e < n_edges; ++e) next_negative[e] = schedule.epochs_per_sample[e] / neg_rate;

  const std::size_t threads = resolve_threads(cfg.threads);
  std::vector<Rng> rngs;
  for (std::size_t t = 0; t < threads; ++t) rngs.emplace_back(cfg.rng_seed + 0x2545F4914F6CDD1Dull * (t + 1));

  for (std::size_t epoch = 1; epoch <= cfg.n_epochs; ++epoch) {
    const double alpha =
        cfg.learning_rate * (1.0 - static_cast<double>(epoch - 1) / static_cast<double>(cfg.n_epochs));
    const auto ep = static_cast<double>(epoch);
    if (threads == 1) {
      detail::run_epoch_range<false>(schedule, next_sample, next_negative, 0, n_edges, ep, alpha, n, neg_rate, a, b,
                                     cfg, {y.data()}, rngs[0]);
    } else {
      const std::size_t chunk = (n_edges + threads - 1) / threads;
      parallel_for(threads, threads, [&](std::size_t t) {
        const std::size_t begin = std::min(n_edges, t * chunk);
        const std::size_t end = std::min(n_edges, begin + chunk);
        detail::run_epoch_range<true>(schedule, next_sample, next_negative, begin, end, ep, alpha, n, neg_rate, a, b,
                                      cfg, {y.data()}, rngs[t]);
      });
    }
    for (float v : y) {
      if (!std::isfinite(v)) fail(ErrorKind::numeric, "layout diverged (NaN) at epoch " + std::to_string(epoch));
    }
  }
  return Embedding(std::move(y), "umap", cfg.hash(), cfg.rng_seed);
}

}  // namespace satellite
