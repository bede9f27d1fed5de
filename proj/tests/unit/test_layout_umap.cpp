#include <algorithm>
#include <cmath>
#include <map>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "expect_error.hpp"
#include "fixtures.hpp"
#include "satellite/layout_umap.hpp"
#include "satellite/spatial2d.hpp"

using namespace satellite;

namespace {

// Derivative-free least squares on the same sampled curve (Nelder-Mead in
// log-parameter space), independent of the implementation's solver.
std::pair<double, double> nelder_mead_ab(double min_dist, double spread) {
  std::vector<double> xs(300), ys(300);
  for (int i = 0; i < 300; ++i) {
    xs[i] = 3.0 * spread * i / 299.0;
    ys[i] = xs[i] <= min_dist ? 1.0 : std::exp(-(xs[i] - min_dist) / spread);
  }
  auto f = [&](const std::array<double, 2>& p) {
    const double a = std::exp(p[0]), b = std::exp(p[1]);
    double s = 0;
    for (int i = 0; i < 300; ++i) s += std::pow(1.0 / (1.0 + a * std::pow(xs[i], 2 * b)) - ys[i], 2);
    return s;
  };
  std::array<std::array<double, 2>, 3> v{{{0.0, 0.0}, {0.3, 0.0}, {0.0, 0.3}}};
  for (int it = 0; it < 4000; ++it) {
    std::sort(v.begin(), v.end(), [&](auto& p, auto& q) { return f(p) < f(q); });
    if (std::abs(v[2][0] - v[0][0]) + std::abs(v[2][1] - v[0][1]) < 1e-10) break;
    const std::array<double, 2> c{(v[0][0] + v[1][0]) / 2, (v[0][1] + v[1][1]) / 2};
    auto along = [&](double t) { return std::array<double, 2>{c[0] + t * (v[2][0] - c[0]), c[1] + t * (v[2][1] - c[1])}; };
    const auto r = along(-1.0);
    if (f(r) < f(v[0])) {
      const auto e = along(-2.0);
      v[2] = f(e) < f(r) ? e : r;
    } else if (f(r) < f(v[1])) {
      v[2] = r;
    } else {
      const auto k = along(0.5);
      if (f(k) < f(v[2])) {
        v[2] = k;
      } else {
        for (int i = 1; i < 3; ++i)
          for (int d = 0; d < 2; ++d) v[i][d] = v[0][d] + 0.5 * (v[i][d] - v[0][d]);
      }
    }
  }
  return {std::exp(v[0][0]), std::exp(v[0][1])};
}

FuzzyGraph clique_pair(std::size_t size) {
  std::vector<FuzzyEdge> e;
  for (std::uint32_t base : {0u, static_cast<std::uint32_t>(size)}) {
    for (std::uint32_t i = 0; i < size; ++i)
      for (std::uint32_t j = 0; j < size; ++j)
        if (i != j) e.push_back({base + i, base + j, 1.0});
  }
  return FuzzyGraph(2 * size, e, true);
}

FuzzyGraph path_graph(std::size_t n) {
  std::vector<FuzzyEdge> e;
  for (std::uint32_t i = 0; i + 1 < n; ++i) {
    e.push_back({i, i + 1, 1.0});
    e.push_back({i + 1, i, 1.0});
  }
  return FuzzyGraph(n, e, true);
}

struct Blobs {
  FeatureMatrix features;
  std::vector<int> label;
};

Blobs blob_data(std::size_t per_blob, std::size_t n_blobs, double separation, std::uint64_t seed, std::size_t d = 8) {
  Rng rng(seed);
  std::vector<std::vector<double>> centers;
  for (std::size_t c = 0; c < n_blobs; ++c) {
    std::vector<double> mu(d, 0.0);
    mu[c % d] = separation * (1.0 + double(c / d));
    centers.push_back(mu);
  }
  Blobs b{fixtures::matrix(per_blob * n_blobs, d,
                           fixtures::blobs(centers, std::vector<std::size_t>(n_blobs, per_blob), 1.0, seed)),
          {}};
  for (std::size_t c = 0; c < n_blobs; ++c) b.label.insert(b.label.end(), per_blob, int(c));
  return b;
}

Embedding run_umap(const FeatureMatrix& m, const UmapConfig& cfg) {
  const auto fg = build_fuzzy_graph(knn_exact(m, cfg.k));
  const auto fit = fit_ab(cfg.min_dist, cfg.spread);
  return optimize_layout(fg, init_embedding(fg, cfg, &m), cfg, fit.a, fit.b);
}

// Equilibrium of one symmetric edge between two points: per epoch each point
// receives two attractive updates and, on average, rate/2 repulsive ones (half
// of the negative draws land on the point itself and are skipped), so
// 2 * |attr(s)| = rate/2 * rep(s). Solved by bisection on d.
double two_point_equilibrium(double a, double b, double rate, double floor) {
  auto balance = [&](double d) {
    const double s = d * d;
    return 2.0 * -attractive_coefficient(s, a, b) - rate / 2.0 * repulsive_coefficient(s, a, b, floor);
  };
  double lo = 1e-4, hi = 10.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (balance(mid) < 0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// Independent 1-D simulation of the same dynamics with expected (not sampled)
// repulsion, from the given start distance.
double simulate_two_point(double a, double b, double rate, double floor, std::size_t epochs, double start) {
  double x0 = 0.0, x1 = start;
  for (std::size_t e = 1; e <= epochs; ++e) {
    const double alpha = 1.0 - double(e - 1) / double(epochs);
    for (int rep = 0; rep < 2; ++rep) {
      const double d = x0 - x1;
      const double g = std::clamp(attractive_coefficient(d * d, a, b) * d, -4.0, 4.0) * alpha;
      x0 += g;
      x1 -= g;
    }
    for (double* p : {&x0, &x1}) {
      double* q = p == &x0 ? &x1 : &x0;
      const double d = *p - *q;
      *p += rate / 2.0 * std::clamp(repulsive_coefficient(d * d, a, b, floor) * d, -4.0, 4.0) * alpha;
    }
  }
  return std::abs(x1 - x0);
}

}  // namespace

TEST(FitAb, MatchesFrozenLeastSquaresReference) {
  // Reference values from an off-the-shelf trust-region least-squares solver
  // on the identical 300-point curve.
  const std::map<double, std::pair<double, double>> reference{
      {0.1, {1.5769434602697652, 0.8950608778515733}},
      {0.001, {1.929073395935085, 0.7915045334274393}},
      {0.5, {0.5830300203414425, 1.3341669924314914}}};
  for (const auto& [md, ab] : reference) {
    const auto fit = fit_ab(md, 1.0);
    EXPECT_NEAR(fit.a, ab.first, 1e-3) << "min_dist " << md;
    EXPECT_NEAR(fit.b, ab.second, 1e-3) << "min_dist " << md;
    EXPECT_GT(fit.residual, 0.0);
  }
  EXPECT_NEAR(fit_ab(0.1, 1.0).a, 1.58, 0.005);
  EXPECT_NEAR(fit_ab(0.1, 1.0).b, 0.90, 0.005);
}

TEST(FitAb, MatchesNelderMeadOracle) {
  for (double md : {0.1, 0.001, 0.05, 0.3}) {
    for (double spread : {1.0, 2.0}) {
      const auto fit = fit_ab(md, spread);
      const auto [a, b] = nelder_mead_ab(md, spread);
      EXPECT_NEAR(fit.a, a, 1e-3 * std::max(1.0, a)) << md << " " << spread;
      EXPECT_NEAR(fit.b, b, 1e-3) << md << " " << spread;
    }
  }
}

TEST(FitAb, CurveIsOneAtOrigin) {
  for (double md : {0.001, 0.1, 0.5}) {
    const auto fit = fit_ab(md, 1.0);
    EXPECT_EQ(phi(0.0, fit.a, fit.b), 1.0);
  }
}

TEST(FitAb, RejectsInvalidParameters) {
  EXPECT_SAT_ERROR(fit_ab(0.0, 1.0), ErrorKind::parameter, "min_dist");
  EXPECT_SAT_ERROR(fit_ab(1.0, 1.0), ErrorKind::parameter, "min_dist");
  EXPECT_SAT_ERROR(fit_ab(2.0, 1.0), ErrorKind::parameter, "min_dist");
}

TEST(Gradients, AttractiveMatchesFiniteDifferences) {
  Rng rng(8);
  const auto fit = fit_ab(0.1, 1.0);
  for (int t = 0; t < 20; ++t) {
    const double d = uniform(rng, 0.05, 5.0);
    const double yi = d, yj = 0.0;
    auto f = [&](double y) { return std::log(phi(std::abs(y - yj), fit.a, fit.b)); };
    const double h = 1e-6 * d;
    const double fd = (f(yi + h) - f(yi - h)) / (2 * h);
    const double analytic = attractive_coefficient(d * d, fit.a, fit.b) * (yi - yj);
    const double closed = -2 * fit.a * fit.b * std::pow(d, 2 * fit.b - 1) / (1 + fit.a * std::pow(d, 2 * fit.b));
    EXPECT_LT(std::abs(fd - analytic) / std::abs(fd), 1e-5) << "d=" << d;
    EXPECT_NEAR(analytic, closed, 1e-12 * std::abs(closed));
  }
}

TEST(Gradients, RepulsiveMatchesFiniteDifferences) {
  Rng rng(9);
  const auto fit = fit_ab(0.1, 1.0);
  for (int t = 0; t < 20; ++t) {
    const double d = uniform(rng, 0.05, 5.0);
    auto f = [&](double y) { return std::log(1.0 - phi(std::abs(y), fit.a, fit.b)); };
    const double h = 1e-6 * d;
    const double fd = (f(d + h) - f(d - h)) / (2 * h);
    const double analytic = repulsive_coefficient(d * d, fit.a, fit.b, 0.0) * d;
    EXPECT_LT(std::abs(fd - analytic) / std::abs(fd), 1e-5) << "d=" << d;
  }
}

TEST(UmapConfigTest, Validation) {
  UmapConfig c;
  EXPECT_NO_THROW(c.validate());
  c.n_epochs = 0;
  EXPECT_SAT_ERROR(c.validate(), ErrorKind::parameter, "n_epochs");
  c = {};
  c.min_dist = 1.5;
  EXPECT_SAT_ERROR(c.validate(), ErrorKind::parameter, "spread");
  c = {};
  c.negative_sample_rate = 0;
  EXPECT_SAT_ERROR(c.validate(), ErrorKind::parameter, "negative_sample_rate");
  UmapConfig a, b;
  b.n_epochs = 300;
  EXPECT_NE(a.hash(), b.hash());
  EXPECT_EQ(a.hash(), UmapConfig{}.hash());
}

TEST(InitEmbedding, RandomIsDeterministicAndBoxed) {
  UmapConfig cfg;
  cfg.init = InitMethod::random;
  const auto fg = path_graph(30);
  const auto a = init_embedding(fg, cfg);
  const auto b = init_embedding(fg, cfg);
  EXPECT_EQ(embedding_bytes(a), embedding_bytes(b));
  for (float v : a.coords()) {
    EXPECT_GE(v, -10.0f);
    EXPECT_LE(v, 10.0f);
  }
  cfg.rng_seed = 43;
  EXPECT_NE(embedding_bytes(init_embedding(fg, cfg)), embedding_bytes(a));
}

TEST(InitEmbedding, DisjointCliquesGetDistinctOffsets) {
  fixtures::TempDir dir;
  ScopedWarningCapture warnings;
  const auto e = init_embedding(clique_pair(6), UmapConfig{});
  ASSERT_EQ(warnings.messages().size(), 1u);
  EXPECT_NE(warnings.messages()[0].find("2 connected components"), std::string::npos);
  Point2 c0{0, 0}, c1{0, 0};
  double r0 = 0, r1 = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    c0.x += e.x(i) / 6.0;
    c0.y += e.y(i) / 6.0;
    c1.x += e.x(6 + i) / 6.0;
    c1.y += e.y(6 + i) / 6.0;
  }
  for (std::size_t i = 0; i < 6; ++i) {
    r0 = std::max(r0, distance(e.point(i), c0));
    r1 = std::max(r1, distance(e.point(6 + i), c1));
  }
  EXPECT_GT(distance(c0, c1), r0 + r1);
}

TEST(InitEmbedding, SpectralPathMatchesDenseEigensolver) {
  for (std::size_t n : {10u, 25u, 50u}) {
    const auto fg = path_graph(n);
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, n);
    for (const auto& e : fg.edges()) w(e.i, e.j) = e.weight;
    const Eigen::VectorXd deg = w.rowwise().sum();
    const Eigen::VectorXd is = deg.array().rsqrt();
    const Eigen::MatrixXd lap = Eigen::MatrixXd::Identity(n, n) - is.asDiagonal() * w * is.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(lap);
    // Laplacian eigenmap coordinates: D^-1/2 times the symmetric eigenvector.
    const Eigen::VectorXd fiedler = is.asDiagonal() * solver.eigenvectors().col(1);

    const auto labels = connected_components(fg);
    const auto g = detail::extract_component(fg, labels, 0);
    Rng rng(1);
    const auto coords = detail::spectral_coordinates(g, 5000, rng);
    Eigen::VectorXd ours(n);
    for (std::size_t i = 0; i < n; ++i) ours[i] = coords[2 * i];
    EXPECT_NEAR(std::abs(ours.normalized().dot(fiedler.normalized())), 1.0, 1e-8) << "n=" << n;

    const auto e = init_embedding(fg, UmapConfig{});
    const double sign = e.x(n - 1) > e.x(0) ? 1.0 : -1.0;
    for (std::size_t i = 1; i < n; ++i) EXPECT_GT(sign * (e.x(i) - e.x(i - 1)), 0.0) << "n=" << n << " i=" << i;
    double mx = 0;
    for (float v : e.coords()) mx = std::max(mx, double(std::abs(v)));
    EXPECT_NEAR(mx, 10.0, 1e-2);
  }
}

TEST(InitEmbedding, PcaNeedsFeatures) {
  UmapConfig cfg;
  cfg.init = InitMethod::pca;
  EXPECT_SAT_ERROR(init_embedding(path_graph(5), cfg), ErrorKind::parameter, "feature");
  const auto m = fixtures::uniform_matrix(5, 3, 2);
  const auto e = init_embedding(path_graph(5), cfg, &m);
  EXPECT_EQ(e.n(), 5u);
}

TEST(OptimizeLayout, SingleEpochMovesPoints) {
  const auto b = blob_data(30, 2, 8.0, 3);
  UmapConfig cfg;
  cfg.n_epochs = 1;
  const auto fg = build_fuzzy_graph(knn_exact(b.features, cfg.k));
  const auto init = init_embedding(fg, cfg, &b.features);
  const auto fit = fit_ab(cfg.min_dist, cfg.spread);
  const auto out = optimize_layout(fg, init, cfg, fit.a, fit.b);
  EXPECT_NE(embedding_bytes(out), embedding_bytes(init));
  for (float v : out.coords()) EXPECT_TRUE(std::isfinite(v));
  cfg.n_epochs = 0;
  EXPECT_SAT_ERROR(optimize_layout(fg, init, cfg, fit.a, fit.b), ErrorKind::parameter, "n_epochs");
}

TEST(OptimizeLayout, DeterministicSingleWorker) {
  const auto b = blob_data(100, 3, 8.0, 4);
  UmapConfig cfg;
  const auto e1 = run_umap(b.features, cfg);
  const auto e2 = run_umap(b.features, cfg);
  EXPECT_EQ(embedding_bytes(e1), embedding_bytes(e2));
  EXPECT_EQ(e1.method(), "umap");
  EXPECT_EQ(e1.config_hash(), cfg.hash());
}

TEST(OptimizeLayout, TwoBlobsSeparate) {
  // Two 100-point cliques with no edges between them.
  std::vector<FuzzyEdge> e;
  const auto b = blob_data(100, 2, 30.0, 5);
  const auto g = knn_exact(b.features, 15);
  const auto fg = build_fuzzy_graph(g);
  for (const auto& ed : fg.edges()) ASSERT_EQ(b.label[ed.i], b.label[ed.j]);
  UmapConfig cfg;
  const auto fit = fit_ab(cfg.min_dist, cfg.spread);
  const auto out = optimize_layout(fg, init_embedding(fg, cfg), cfg, fit.a, fit.b);
  Point2 c[2] = {{0, 0}, {0, 0}};
  for (std::size_t i = 0; i < 200; ++i) {
    c[b.label[i]].x += out.x(i) / 100.0;
    c[b.label[i]].y += out.y(i) / 100.0;
  }
  double spread = 0;
  for (std::size_t i = 0; i < 200; ++i) spread += distance(out.point(i), c[b.label[i]]) / 200.0;
  EXPECT_GT(distance(c[0], c[1]), 5.0 * spread);
}

TEST(OptimizeLayout, TwoPointEquilibrium) {
  const std::vector<FuzzyEdge> e{{0, 1, 1.0}, {1, 0, 1.0}};
  const FuzzyGraph fg(2, e, true);
  UmapConfig cfg;
  cfg.n_epochs = 500;
  const auto fit = fit_ab(cfg.min_dist, cfg.spread);
  const double eq = two_point_equilibrium(fit.a, fit.b, double(cfg.negative_sample_rate), cfg.repulsion_floor);
  const double sim = simulate_two_point(fit.a, fit.b, double(cfg.negative_sample_rate), cfg.repulsion_floor, 500, 3.0);
  EXPECT_NEAR(sim, eq, 0.1 * eq);
  for (double start : {0.05, 3.0}) {
    const auto out = optimize_layout(fg, fixtures::embedding({{0.0, 0.0}, {start, 0.0}}), cfg, fit.a, fit.b);
    const double d = distance(out.point(0), out.point(1));
    EXPECT_GE(d, eq / 2) << "start " << start;
    EXPECT_LE(d, 2 * eq) << "start " << start;
  }
}

TEST(OptimizeLayout, KnnPreservationOnBlobs) {
  const auto b = blob_data(150, 4, 10.0, 6);
  const auto out = run_umap(b.features, UmapConfig{});
  const auto knn = knn_2d(out, 10);
  double worst = 1.0;
  for (std::size_t i = 0; i < out.n(); ++i) {
    int same = 0;
    for (std::size_t t = 0; t < 10; ++t) same += b.label[knn.indices[i * 10 + t]] == b.label[i];
    worst = std::min(worst, same / 10.0);
  }
  EXPECT_GE(worst, 0.9);
}

TEST(OptimizeLayout, IsolatedComponentsStaySeparated) {
  for (std::size_t threads : {1u, 4u}) {
    const auto b = blob_data(120, 3, 40.0, 7);
    UmapConfig cfg;
    cfg.threads = threads;
    const auto fg = build_fuzzy_graph(knn_exact(b.features, cfg.k));
    const auto comp = connected_components(fg);
    ASSERT_EQ(component_count(comp), 3u);
    ScopedWarningCapture quiet;
    const auto fit = fit_ab(cfg.min_dist, cfg.spread);
    const auto out = optimize_layout(fg, init_embedding(fg, cfg), cfg, fit.a, fit.b);
    for (float v : out.coords()) ASSERT_TRUE(std::isfinite(v));
    const auto knn = knn_2d(out, 10);
    std::vector<double> intra;
    for (std::size_t i = 0; i < out.n(); ++i)
      for (std::size_t t = 0; t < 10; ++t)
        if (comp[knn.indices[i * 10 + t]] == comp[i]) intra.push_back(knn.distances[i * 10 + t]);
    std::sort(intra.begin(), intra.end());
    const double p95 = intra[static_cast<std::size_t>(0.95 * double(intra.size() - 1))];
    double inter = 1e300;
    for (std::size_t i = 0; i < out.n(); ++i)
      for (std::size_t j = 0; j < out.n(); ++j)
        if (comp[i] != comp[j]) inter = std::min(inter, distance(out.point(i), out.point(j)));
    EXPECT_GT(inter, p95) << "threads " << threads;
  }
}
