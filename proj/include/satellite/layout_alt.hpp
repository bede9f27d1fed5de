#pragma once

// Baseline embedders: PCA projection and exact t-SNE with a two-phase
// exaggeration schedule.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "satellite/embedding.hpp"
#include "satellite/error.hpp"
#include "satellite/feature_store.hpp"
#include "satellite/hash.hpp"
#include "satellite/linalg.hpp"
#include "satellite/log.hpp"
#include "satellite/parallel.hpp"
#include "satellite/random.hpp"

namespace satellite {

// ---------------------------------------------------------------------------
// PCA

struct PcaOptions {
  std::size_t max_iters = 200000;
  double tolerance = 1e-15;
  /// Components whose variance is below this fraction of the total variance
  /// count as absent (rank deficiency).
  double rank_tolerance = 1e-12;
};

struct PcaResult {
  std::size_t dims = 0;
  std::size_t n_features = 0;
  std::vector<double> mean;
  /// dims x n_features, row-major; unit rows, sign fixed so the
  /// largest-magnitude loading is positive. Zero rows for missing rank.
  std::vector<double> components;
  std::vector<double> explained_variance;
  /// n x dims, row-major.
  std::vector<double> projection;
};

/// Mean-centered projection onto the top `dims` principal directions. The
/// covariance eigenvectors are found by power iteration with deflation.
inline PcaResult pca_fit(const FeatureMatrix& m, std::size_t dims = 2, const PcaOptions& opts = {}) {
  const std::size_t n = m.n_samples();
  const std::size_t d = m.n_dims();
  require(dims >= 1 && dims <= d, ErrorKind::parameter,
          "PCA dims must be in [1, n_dims] (dims=" + std::to_string(dims) + ", n_dims=" + std::to_string(d) + ")");

  PcaResult r;
  r.dims = dims;
  r.n_features = d;
  r.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = m.row(i);
    for (std::size_t j = 0; j < d; ++j) r.mean[j] += row[j];
  }
  for (double& v : r.mean) v /= static_cast<double>(n);

  std::vector<double> centered(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = m.row(i);
    for (std::size_t j = 0; j < d; ++j) centered[i * d + j] = row[j] - r.mean[j];
  }
  std::vector<double> cov(d * d, 0.0);
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = &centered[i * d];
    for (std::size_t a = 0; a < d; ++a) {
      const double xa = x[a];
      for (std::size_t b = a; b < d; ++b) cov[a * d + b] += xa * x[b];
    }
  }
  double trace = 0.0;
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b) {
      cov[a * d + b] /= denom;
      cov[b * d + a] = cov[a * d + b];
    }
    trace += cov[a * d + a];
  }

  auto matvec = [&](const std::vector<double>& v, std::vector<double>& out) {
    for (std::size_t a = 0; a < d; ++a) {
      double s = 0.0;
      for (std::size_t b = 0; b < d; ++b) s += cov[a * d + b] * v[b];
      out[a] = s;
    }
  };

  std::vector<std::vector<double>> found;
  r.components.assign(dims * d, 0.0);
  r.explained_variance.assign(dims, 0.0);
  std::vector<double> v(d), next(d);
  bool rank_deficient = false;
  for (std::size_t c = 0; c < dims && !rank_deficient; ++c) {
    // Deterministic, generic start vector.
    for (std::size_t j = 0; j < d; ++j) v[j] = 1.0 + 0.1 * std::sin(1.0 + 3.7 * double(j) + 11.3 * double(c));
    linalg::orthogonalize(v, found);
    double nv = linalg::norm(v);
    if (nv == 0.0) {
      rank_deficient = true;
      break;
    }
    linalg::scale(v, 1.0 / nv);
    double lambda = 0.0;
    for (std::size_t it = 0; it < opts.max_iters; ++it) {
      matvec(v, next);
      linalg::orthogonalize(next, found);
      const double nn = linalg::norm(next);
      if (nn <= opts.rank_tolerance * std::max(trace, 1e-300)) {
        lambda = 0.0;
        break;
      }
      linalg::scale(next, 1.0 / nn);
      double change = 0.0;
      for (std::size_t j = 0; j < d; ++j) change = std::max(change, std::abs(next[j] - v[j]));
      v.swap(next);
      lambda = nn;
      if (change < opts.tolerance) break;
    }
    if (lambda <= opts.rank_tolerance * std::max(trace, 1e-300)) {
      rank_deficient = true;
      break;
    }
    linalg::canonical_sign(v);
    std::copy(v.begin(), v.end(), r.components.begin() + static_cast<std::ptrdiff_t>(c * d));
    matvec(v, next);
    r.explained_variance[c] = linalg::dot(v, next);
    found.push_back(v);
  }
  if (rank_deficient) {
    warn("PCA: data rank " + std::to_string(found.size()) + " < " + std::to_string(dims) +
         " requested components; remaining components zero-filled");
  }

  r.projection.assign(n * dims, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < found.size(); ++c) {
      r.projection[i * dims + c] = linalg::dot(std::span<const double>(&centered[i * d], d), found[c]);
    }
  }
  return r;
}

inline Embedding pca_project(const FeatureMatrix& m, const PcaOptions& opts = {}) {
  const auto r = pca_fit(m, std::min<std::size_t>(2, m.n_dims()), opts);
  std::vector<float> coords(2 * m.n_samples(), 0.0f);
  for (std::size_t i = 0; i < m.n_samples(); ++i) {
    for (std::size_t c = 0; c < r.dims; ++c) coords[2 * i + c] = static_cast<float>(r.projection[i * r.dims + c]);
  }
  return Embedding(std::move(coords), "pca", sha256_hex(R"({"method":"pca","dims":2})"), 0);
}

// ---------------------------------------------------------------------------
// t-SNE

struct TsneConfig {
  double perplexity = 30.0;
  double early_exaggeration = 12.0;
  std::size_t early_steps = 250;
  /// 1 = regular t-SNE, 4 = exaggerated variant.
  double main_exaggeration = 1.0;
  std::size_t main_steps = 500;
  /// 0 selects max(n / early_exaggeration, 50).
  double learning_rate = 0.0;
  double momentum_early = 0.5;
  double momentum_late = 0.8;
  std::size_t momentum_switch = 250;
  double init_stddev = 1e-4;
  std::uint64_t rng_seed = 42;
  std::size_t threads = 1;

  void validate(std::size_t n) const {
    require(n >= 10, ErrorKind::parameter, "t-SNE needs at least 10 samples (got " + std::to_string(n) + ")");
    require(perplexity > 0.0 && 3.0 * perplexity < static_cast<double>(n - 1), ErrorKind::parameter,
            "perplexity infeasible: need 0 < perplexity < (n-1)/3 = " + std::to_string(double(n - 1) / 3.0));
    require(early_exaggeration >= 1.0 && main_exaggeration >= 1.0, ErrorKind::parameter,
            "exaggeration factors must be >= 1");
    require(learning_rate >= 0.0, ErrorKind::parameter, "learning_rate must be >= 0 (0 = auto)");
  }

  double effective_learning_rate(std::size_t n) const {
    if (learning_rate > 0.0) return learning_rate;
    return std::max(static_cast<double>(n) / early_exaggeration, 50.0);
  }

  nlohmann::json to_json() const {
    return {{"method", "tsne"},
            {"perplexity", perplexity},
            {"early_exaggeration", early_exaggeration},
            {"early_steps", early_steps},
            {"main_exaggeration", main_exaggeration},
            {"main_steps", main_steps},
            {"learning_rate", learning_rate},
            {"rng_seed", rng_seed}};
  }
};

/// Dense n x n row-major similarity matrices.
struct TsneAffinities {
  std::size_t n = 0;
  /// p_{j|i}, rows sum to 1.
  std::vector<double> conditional;
  /// (p_{j|i} + p_{i|j}) / 2n, symmetric, sums to 1.
  std::vector<double> joint;
};

/// Shannon entropy (natural log) of one conditional row, skipping the
/// diagonal.
inline double row_entropy(std::span<const double> row, std::size_t self) {
  double h = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (j != self && row[j] > 0.0) h -= row[j] * std::log(row[j]);
  }
  return h;
}

/// Gaussian conditional similarities whose row entropy matches
/// log(perplexity), found by bisection on the precision beta.
inline TsneAffinities tsne_affinities(const FeatureMatrix& m, double perplexity, std::size_t threads = 1,
                                      double tolerance = 1e-7) {
  const std::size_t n = m.n_samples();
  TsneAffinities out;
  out.n = n;
  out.conditional.assign(n * n, 0.0);
  const double target = std::log(perplexity);

  parallel_for(n, threads, [&](std::size_t i) {
    std::vector<double> d2(n, 0.0);
    const auto xi = m.row(i);
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const auto xj = m.row(j);
      double s = 0.0;
      for (std::size_t t = 0; t < xi.size(); ++t) {
        const double diff = double(xi[t]) - double(xj[t]);
        s += diff * diff;
      }
      d2[j] = s;
      dmin = std::min(dmin, s);
    }
    double* p = &out.conditional[i * n];
    auto evaluate = [&](double beta) {
      // Shifting by dmin leaves the normalized row unchanged but avoids
      // underflow of every term at large beta.
      double sum = 0.0;
      double weighted = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) {
          p[j] = 0.0;
          continue;
        }
        p[j] = std::exp(-beta * (d2[j] - dmin));
        sum += p[j];
        weighted += (d2[j] - dmin) * p[j];
      }
      for (std::size_t j = 0; j < n; ++j) p[j] /= sum;
      return std::log(sum) + beta * weighted / sum;
    };
    double beta = 1.0;
    double lo = 0.0;
    double hi = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 500; ++it) {
      const double h = evaluate(beta);
      const double diff = h - target;
      if (std::abs(diff) < tolerance) break;
      if (diff > 0) {  // too flat: sharpen
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
  });

  out.joint.assign(n * n, 0.0);
  const double norm = 1.0 / (2.0 * static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out.joint[i * n + j] = (out.conditional[i * n + j] + out.conditional[j * n + i]) * norm;
    }
  }
  return out;
}

/// Gradient of the exaggerated objective, split into its two forces:
///   attractive_i = 4 * alpha * sum_j p_ij w_ij (y_i - y_j)
///   repulsive_i  = -4 * sum_j q_ij w_ij (y_i - y_j)
/// with w_ij = 1 / (1 + |y_i - y_j|^2) and q_ij = w_ij / Z. The full
/// gradient is their sum; both are n x 2 row-major.
struct TsneGradient {
  std::vector<double> attractive;
  std::vector<double> repulsive;

  std::vector<double> total() const {
    std::vector<double> g(attractive.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = attractive[i] + repulsive[i];
    return g;
  }
};

inline TsneGradient tsne_gradient(std::span<const double> joint, std::span<const double> y, double exaggeration,
                                  std::size_t threads = 1) {
  const std::size_t n = y.size() / 2;
  std::vector<double> row_z(n, 0.0);
  parallel_for(n, threads, [&](std::size_t i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = y[2 * i] - y[2 * j];
      const double dy = y[2 * i + 1] - y[2 * j + 1];
      s += 1.0 / (1.0 + dx * dx + dy * dy);
    }
    row_z[i] = s;
  });
  double z = 0.0;
  for (double s : row_z) z += s;

  TsneGradient g;
  g.attractive.assign(2 * n, 0.0);
  g.repulsive.assign(2 * n, 0.0);
  parallel_for(n, threads, [&](std::size_t i) {
    double ax = 0, ay = 0, rx = 0, ry = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = y[2 * i] - y[2 * j];
      const double dy = y[2 * i + 1] - y[2 * j + 1];
      const double w = 1.0 / (1.0 + dx * dx + dy * dy);
      const double pa = exaggeration * joint[i * n + j] * w;
      const double qr = (w / z) * w;
      ax += pa * dx;
      ay += pa * dy;
      rx += qr * dx;
      ry += qr * dy;
    }
    g.attractive[2 * i] = 4.0 * ax;
    g.attractive[2 * i + 1] = 4.0 * ay;
    g.repulsive[2 * i] = -4.0 * rx;
    g.repulsive[2 * i + 1] = -4.0 * ry;
  });
  return g;
}

/// Objective whose gradient is tsne_gradient():
///   alpha * sum_ij p_ij log(p_ij / w_ij) + log Z.
/// With alpha = 1 this is KL(P || Q).
inline double tsne_objective(std::span<const double> joint, std::span<const double> y, double exaggeration) {
  const std::size_t n = y.size() / 2;
  double z = 0.0;
  double attract = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = y[2 * i] - y[2 * j];
      const double dy = y[2 * i + 1] - y[2 * j + 1];
      const double w = 1.0 / (1.0 + dx * dx + dy * dy);
      z += w;
      const double p = joint[i * n + j];
      if (p > 0.0) attract += p * (std::log(p) - std::log(w));
    }
  }
  return exaggeration * attract + std::log(z);
}

/// Exact O(n^2) t-SNE. P is multiplied by early_exaggeration for the first
/// early_steps iterations, then by main_exaggeration.
inline Embedding tsne_embed(const FeatureMatrix& m, const TsneConfig& cfg) {
  const std::size_t n = m.n_samples();
  cfg.validate(n);
  const auto aff = tsne_affinities(m, cfg.perplexity, cfg.threads);

  Rng rng(cfg.rng_seed);
  std::vector<double> y(2 * n);
  for (double& v : y) v = cfg.init_stddev * normal01(rng);
  std::vector<double> velocity(2 * n, 0.0);
  std::vector<double> gains(2 * n, 1.0);
  const double eta = cfg.effective_learning_rate(n);

  const std::size_t total_steps = cfg.early_steps + cfg.main_steps;
  for (std::size_t step = 0; step < total_steps; ++step) {
    const double alpha = step < cfg.early_steps ? cfg.early_exaggeration : cfg.main_exaggeration;
    const double momentum = step < cfg.momentum_switch ? cfg.momentum_early : cfg.momentum_late;
    const auto grad = tsne_gradient(aff.joint, y, alpha, cfg.threads).total();
    for (std::size_t t = 0; t < 2 * n; ++t) {
      // Adaptive gains: grow when the gradient flips against the velocity.
      gains[t] = (grad[t] > 0) != (velocity[t] > 0) ? gains[t] + 0.2 : gains[t] * 0.8;
      gains[t] = std::max(gains[t], 0.01);
      velocity[t] = momentum * velocity[t] - eta * gains[t] * grad[t];
      y[t] += velocity[t];
    }
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += y[2 * i];
      my += y[2 * i + 1];
    }
    mx /= double(n);
    my /= double(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[2 * i] -= mx;
      y[2 * i + 1] -= my;
    }
    for (double v : y) {
      if (!std::isfinite(v)) fail(ErrorKind::numeric, "t-SNE diverged at step " + std::to_string(step));
    }
  }
  std::vector<float> coords(y.begin(), y.end());
  return Embedding(std::move(coords), "tsne", sha256_hex(cfg.to_json().dump()), cfg.rng_seed);
}

}  // namespace satellite
