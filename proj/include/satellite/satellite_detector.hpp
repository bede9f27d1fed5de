#pragma once

// Satellite-cluster detection on a 2-D embedding: DBSCAN, knee-based eps
// selection, main/satellite classification with metadata summaries, and
// outlier manifests for curated clusters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "satellite/embedding.hpp"
#include "satellite/error.hpp"
#include "satellite/feature_store.hpp"
#include "satellite/log.hpp"
#include "satellite/spatial2d.hpp"

namespace satellite {

inline constexpr int kNoise = -1;

namespace detail {

/// Uniform grid with cell width eps; a radius-eps query only has to look at
/// the 3x3 block of cells around the query point.
class GridIndex {
 public:
  GridIndex(const Embedding& e, double eps) : e_(e), eps_(eps) {
    order_.resize(e.n());
    std::vector<std::pair<std::uint64_t, std::uint32_t>> keyed(e.n());
    for (std::uint32_t i = 0; i < e.n(); ++i) keyed[i] = {key(cell(e.x(i)), cell(e.y(i))), i};
    std::sort(keyed.begin(), keyed.end());
    for (std::size_t t = 0; t < keyed.size(); ++t) {
      order_[t] = keyed[t].second;
      if (t == 0 || keyed[t].first != keyed[t - 1].first) starts_[keyed[t].first] = t;
      ends_[keyed[t].first] = t + 1;
    }
  }

  /// Calls fn(j) for every point j (including i) with squared distance
  /// <= eps^2, in ascending index order.
  template <typename Fn>
  void for_each_neighbor(std::size_t i, Fn&& fn) const {
    buffer_.clear();
    const auto cx = cell(e_.x(i));
    const auto cy = cell(e_.y(i));
    const double eps_sq = eps_ * eps_;
    for (std::int64_t dx = -1; dx <= 1; ++dx) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        auto it = starts_.find(key(cx + dx, cy + dy));
        if (it == starts_.end()) continue;
        const std::size_t end = ends_.at(it->first);
        for (std::size_t t = it->second; t < end; ++t) {
          const auto j = order_[t];
          const double ddx = double(e_.x(i)) - double(e_.x(j));
          const double ddy = double(e_.y(i)) - double(e_.y(j));
          if (ddx * ddx + ddy * ddy <= eps_sq) buffer_.push_back(j);
        }
      }
    }
    std::sort(buffer_.begin(), buffer_.end());
    for (auto j : buffer_) fn(j);
  }

 private:
  std::int64_t cell(float v) const { return static_cast<std::int64_t>(std::floor(double(v) / eps_)); }
  static std::uint64_t key(std::int64_t cx, std::int64_t cy) {
    return (static_cast<std::uint64_t>(cx) * 0x9E3779B97F4A7C15ull) ^ static_cast<std::uint64_t>(cy);
  }

  const Embedding& e_;
  double eps_;
  std::vector<std::uint32_t> order_;
  std::unordered_map<std::uint64_t, std::size_t> starts_;
  std::unordered_map<std::uint64_t, std::size_t> ends_;
  mutable std::vector<std::uint32_t> buffer_;
};

}  // namespace detail

/// DBSCAN. A point is core when at least min_pts points (itself included)
/// lie within eps. Clusters are maximal density-connected sets of core
/// points, numbered in order of their lowest-index core point; a border point
/// joins the lowest-numbered cluster among its core neighbors. Everything
/// else is noise (-1).
inline std::vector<int> density_cluster(const Embedding& e, double eps, std::size_t min_pts) {
  require(eps > 0.0 && std::isfinite(eps), ErrorKind::parameter, "eps must be > 0");
  require(min_pts >= 2, ErrorKind::parameter, "min_pts must be >= 2");
  const std::size_t n = e.n();
  detail::GridIndex grid(e, eps);

  std::vector<std::uint8_t> core(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t count = 0;
    grid.for_each_neighbor(i, [&](std::uint32_t) { ++count; });
    core[i] = count >= min_pts ? 1 : 0;
  }

  std::vector<int> labels(n, kNoise);
  int next = 0;
  std::vector<std::uint32_t> stack;
  for (std::size_t i = 0; i < n; ++i) {
    if (!core[i] || labels[i] != kNoise) continue;
    const int id = next++;
    labels[i] = id;
    stack.assign(1, static_cast<std::uint32_t>(i));
    while (!stack.empty()) {
      const auto p = stack.back();
      stack.pop_back();
      grid.for_each_neighbor(p, [&](std::uint32_t q) {
        if (core[q] && labels[q] == kNoise) {
          labels[q] = id;
          stack.push_back(q);
        }
      });
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (core[i]) continue;
    int best = kNoise;
    grid.for_each_neighbor(i, [&](std::uint32_t q) {
      if (core[q] && (best == kNoise || labels[q] < best)) best = labels[q];
    });
    labels[i] = best;
  }
  return labels;
}

/// Sorted distances from each point to its (min_pts - 1)-th nearest other
/// point, i.e. the smallest eps that makes it a core point.
inline std::vector<double> k_distance_curve(const Embedding& e, std::size_t min_pts) {
  const std::size_t rank = min_pts - 1;
  const auto knn = knn_2d(e, rank);
  std::vector<double> curve(e.n());
  for (std::size_t i = 0; i < e.n(); ++i) curve[i] = knn.distances[i * rank + rank - 1];
  std::sort(curve.begin(), curve.end());
  return curve;
}

/// Knee of a sorted curve: the sample farthest from the chord joining its
/// end points, with both axes normalized to [0, 1].
inline std::size_t knee_index(const std::vector<double>& curve) {
  const std::size_t n = curve.size();
  if (n < 3) return n - 1;
  const double lo = curve.front();
  const double hi = curve.back();
  if (hi <= lo) return n - 1;
  std::size_t best = n - 1;
  double best_gap = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(i) / static_cast<double>(n - 1);
    const double y = (curve[i] - lo) / (hi - lo);
    // Chord is y = x; the curve sits below it for a convex rise.
    const double gap = (x - y) / std::sqrt(2.0);
    if (gap > best_gap) {
      best_gap = gap;
      best = i;
    }
  }
  return best;
}

inline constexpr double kEpsFloor = 1e-12;

inline double auto_eps(const Embedding& e, std::size_t min_pts) {
  require(min_pts >= 2, ErrorKind::parameter, "min_pts must be >= 2");
  require(e.n() > min_pts, ErrorKind::parameter,
          "auto_eps needs more than min_pts points (n=" + std::to_string(e.n()) + ")");
  const auto curve = k_distance_curve(e, min_pts);
  return std::max(curve[knee_index(curve)], kEpsFloor);
}

// ---------------------------------------------------------------------------
// Classification

enum class ClusterKind { main, satellite, noise };

constexpr std::string_view to_string(ClusterKind k) {
  switch (k) {
    case ClusterKind::main: return "main";
    case ClusterKind::satellite: return "satellite";
    case ClusterKind::noise: return "noise";
  }
  return "?";
}

struct LabelShare {
  std::string label;
  double fraction = 0.0;
};

struct ClusterSummary {
  int id = kNoise;
  std::size_t size = 0;
  Point2 centroid;
  ClusterKind kind = ClusterKind::noise;
  std::optional<LabelShare> dominant_view;
  std::optional<LabelShare> dominant_patient;
  /// Satellites only: distance to the nearest main cluster's convex hull, or
  /// to its nearest member when the satellite lies inside that hull.
  std::optional<double> separation;
  bool enclosed = false;
};

struct ClusterReport {
  std::vector<int> labels;
  /// Mains by descending size, then satellites by descending size, then the
  /// noise entry when any noise exists.
  std::vector<ClusterSummary> clusters;
  std::size_t noise_count = 0;
  double eps = 0.0;
  std::size_t min_pts = 0;
  double main_fraction = 0.0;
  double attach_factor = 0.0;

  const ClusterSummary* find(int id) const {
    for (const auto& c : clusters) {
      if (c.id == id) return &c;
    }
    return nullptr;
  }

  std::size_t count(ClusterKind kind) const {
    return static_cast<std::size_t>(
        std::count_if(clusters.begin(), clusters.end(), [&](const ClusterSummary& c) { return c.kind == kind; }));
  }
};

namespace detail {

inline double cross(const Point2& o, const Point2& a, const Point2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

/// Andrew's monotone chain; counter-clockwise, no repeated end point.
inline std::vector<Point2> convex_hull(std::vector<Point2> pts) {
  std::sort(pts.begin(), pts.end(), [](const Point2& a, const Point2& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  pts.erase(std::unique(pts.begin(), pts.end(), [](const Point2& a, const Point2& b) { return a.x == b.x && a.y == b.y; }),
            pts.end());
  if (pts.size() < 3) return pts;
  std::vector<Point2> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

inline double segment_distance(const Point2& p, const Point2& a, const Point2& b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len_sq = vx * vx + vy * vy;
  double t = len_sq > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len_sq : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * vx), p.y - (a.y + t * vy));
}

/// Distance from p to the hull polygon; 0 when p is inside or on it.
inline double hull_distance(const Point2& p, const std::vector<Point2>& hull) {
  if (hull.empty()) return std::numeric_limits<double>::infinity();
  if (hull.size() == 1) return distance(p, hull[0]);
  bool inside = hull.size() >= 3;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < hull.size(); ++i) {
    const auto& a = hull[i];
    const auto& b = hull[(i + 1) % hull.size()];
    if (hull.size() >= 3 && cross(a, b, p) < 0) inside = false;
    best = std::min(best, segment_distance(p, a, b));
  }
  return inside ? 0.0 : best;
}

inline std::optional<LabelShare> dominant(const std::vector<const std::optional<std::string>*>& values) {
  std::map<std::string, std::size_t> counts;
  for (const auto* v : values) {
    if (*v) ++counts[**v];
  }
  if (counts.empty()) return std::nullopt;
  auto best = counts.begin();
  for (auto it = counts.begin(); it != counts.end(); ++it) {
    if (it->second > best->second) best = it;
  }
  return LabelShare{best->first, static_cast<double>(best->second) / static_cast<double>(values.size())};
}

}  // namespace detail

/// Splits density clusters into main clusters (size >= main_fraction * n)
/// and satellites, and summarizes each against the manifest.
inline ClusterReport classify_clusters(const std::vector<int>& labels, const Embedding& e,
                                       const DatasetManifest& manifest, double main_fraction = 0.05) {
  const std::size_t n = labels.size();
  require(e.n() == n, ErrorKind::alignment, "labels and embedding differ in length");
  require(manifest.size() == n, ErrorKind::alignment, "labels and manifest differ in length");
  require(main_fraction > 0.0 && main_fraction <= 1.0, ErrorKind::parameter, "main_fraction must be in (0, 1]");

  ClusterReport report;
  report.labels = labels;
  report.main_fraction = main_fraction;

  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < n; ++i) {
    require(labels[i] >= kNoise, ErrorKind::validation, "invalid cluster label " + std::to_string(labels[i]));
    members[labels[i]].push_back(i);
  }

  auto summarize = [&](int id, const std::vector<std::size_t>& idx) {
    ClusterSummary s;
    s.id = id;
    s.size = idx.size();
    std::vector<const std::optional<std::string>*> views, patients;
    for (auto i : idx) {
      s.centroid.x += e.x(i);
      s.centroid.y += e.y(i);
      views.push_back(&manifest[i].view_label);
      patients.push_back(&manifest[i].patient_id);
    }
    s.centroid.x /= static_cast<double>(idx.size());
    s.centroid.y /= static_cast<double>(idx.size());
    s.dominant_view = detail::dominant(views);
    s.dominant_patient = detail::dominant(patients);
    return s;
  };

  std::vector<ClusterSummary> mains, satellites;
  const double threshold = main_fraction * static_cast<double>(n);
  for (const auto& [id, idx] : members) {
    if (id == kNoise) continue;
    auto s = summarize(id, idx);
    s.kind = static_cast<double>(s.size) >= threshold ? ClusterKind::main : ClusterKind::satellite;
    (s.kind == ClusterKind::main ? mains : satellites).push_back(std::move(s));
  }

  std::vector<std::vector<Point2>> hulls;
  for (const auto& m : mains) {
    std::vector<Point2> pts;
    for (auto i : members[m.id]) pts.push_back(e.point(i));
    hulls.push_back(detail::convex_hull(std::move(pts)));
  }
  for (auto& s : satellites) {
    if (mains.empty()) continue;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t h = 0; h < hulls.size(); ++h) {
      double d = std::numeric_limits<double>::infinity();
      for (auto i : members[s.id]) d = std::min(d, detail::hull_distance(e.point(i), hulls[h]));
      if (d == 0.0) {
        s.enclosed = true;
        d = std::numeric_limits<double>::infinity();
        for (auto i : members[s.id]) {
          for (auto j : members[mains[h].id]) d = std::min(d, distance(e.point(i), e.point(j)));
        }
      }
      best = std::min(best, d);
    }
    s.separation = best;
  }

  auto by_size = [](const ClusterSummary& a, const ClusterSummary& b) {
    return a.size > b.size || (a.size == b.size && a.id < b.id);
  };
  std::sort(mains.begin(), mains.end(), by_size);
  std::sort(satellites.begin(), satellites.end(), by_size);
  report.clusters = std::move(mains);
  report.clusters.insert(report.clusters.end(), satellites.begin(), satellites.end());
  if (auto it = members.find(kNoise); it != members.end()) {
    auto s = summarize(kNoise, it->second);
    s.kind = ClusterKind::noise;
    report.noise_count = it->second.size();
    report.clusters.push_back(std::move(s));
  }
  if (report.count(ClusterKind::main) + report.count(ClusterKind::satellite) == 0) {
    warn("clustering produced no clusters (all " + std::to_string(n) + " points are noise)");
  }
  return report;
}

inline nlohmann::json to_json(const ClusterSummary& s) {
  auto share = [](const std::optional<LabelShare>& v) -> nlohmann::json {
    if (!v) return nullptr;
    return {{"label", v->label}, {"fraction", v->fraction}};
  };
  return {{"id", s.id},
          {"size", s.size},
          {"centroid", {s.centroid.x, s.centroid.y}},
          {"kind", std::string(to_string(s.kind))},
          {"dominant_view", share(s.dominant_view)},
          {"dominant_patient", share(s.dominant_patient)},
          {"separation", s.separation ? nlohmann::json(*s.separation) : nlohmann::json(nullptr)},
          {"enclosed", s.enclosed}};
}

inline nlohmann::json to_json(const ClusterReport& r) {
  nlohmann::json clusters = nlohmann::json::array();
  for (const auto& c : r.clusters) clusters.push_back(to_json(c));
  return {{"n", r.labels.size()},
          {"eps", r.eps},
          {"min_pts", r.min_pts},
          {"main_fraction", r.main_fraction},
          {"attach_factor", r.attach_factor},
          {"noise_count", r.noise_count},
          {"clusters", clusters},
          {"labels", r.labels}};
}

inline ClusterReport cluster_report_from_json(const nlohmann::json& j) {
  ClusterReport r;
  r.labels = j.at("labels").get<std::vector<int>>();
  r.eps = j.at("eps").get<double>();
  r.min_pts = j.at("min_pts").get<std::size_t>();
  r.main_fraction = j.at("main_fraction").get<double>();
  r.attach_factor = j.value("attach_factor", 0.0);
  r.noise_count = j.at("noise_count").get<std::size_t>();
  for (const auto& c : j.at("clusters")) {
    ClusterSummary s;
    s.id = c.at("id").get<int>();
    s.size = c.at("size").get<std::size_t>();
    s.centroid = {c.at("centroid")[0].get<double>(), c.at("centroid")[1].get<double>()};
    const auto kind = c.at("kind").get<std::string>();
    s.kind = kind == "main" ? ClusterKind::main : kind == "satellite" ? ClusterKind::satellite : ClusterKind::noise;
    auto share = [&](const char* key) -> std::optional<LabelShare> {
      if (!c.contains(key) || c.at(key).is_null()) return std::nullopt;
      return LabelShare{c.at(key).at("label").get<std::string>(), c.at(key).at("fraction").get<double>()};
    };
    s.dominant_view = share("dominant_view");
    s.dominant_patient = share("dominant_patient");
    if (c.contains("separation") && !c.at("separation").is_null()) s.separation = c.at("separation").get<double>();
    s.enclosed = c.value("enclosed", false);
    r.clusters.push_back(std::move(s));
  }
  return r;
}

/// Relabels every non-main cluster that has a point within `radius` of a
/// main-cluster point into the nearest such main cluster, repeating until no
/// cluster changes. Noise stays noise. Returns the number of clusters merged.
inline std::size_t attach_fragments(std::vector<int>& labels, const Embedding& e, double radius,
                                    std::size_t main_min_size) {
  require(labels.size() == e.n(), ErrorKind::alignment, "labels and embedding differ in length");
  if (!(radius > 0.0)) return 0;
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != kNoise) members[labels[i]].push_back(i);
  }
  std::set<int> mains;
  for (const auto& [id, idx] : members) {
    if (idx.size() >= main_min_size) mains.insert(id);
  }
  if (mains.empty()) return 0;

  const detail::GridIndex grid(e, radius);
  std::size_t merged = 0;
  for (bool changed = true; changed;) {
    changed = false;
    for (auto& [id, idx] : members) {
      if (mains.count(id) || idx.empty()) continue;
      double best = std::numeric_limits<double>::infinity();
      int target = kNoise;
      for (auto i : idx) {
        grid.for_each_neighbor(i, [&](std::size_t j) {
          if (labels[j] == kNoise || !mains.count(labels[j])) return;
          const double d = distance(e.point(i), e.point(j));
          if (d < best || (d == best && labels[j] < target)) {
            best = d;
            target = labels[j];
          }
        });
      }
      if (target == kNoise) continue;
      for (auto i : idx) labels[i] = target;
      idx.clear();
      ++merged;
      changed = true;
    }
  }
  return merged;
}

struct DetectOptions {
  std::optional<double> eps;  // auto_eps when unset
  std::size_t min_pts = 5;
  double main_fraction = 0.05;
  /// Non-main clusters within attach_factor * eps of a main cluster are
  /// merged into it; 0 disables.
  double attach_factor = 3.0;
};

/// density_cluster + attach_fragments + classify_clusters with the chosen
/// parameters recorded.
inline ClusterReport detect_satellites(const Embedding& e, const DatasetManifest& manifest,
                                       const DetectOptions& opts = {}) {
  require(opts.attach_factor >= 0.0, ErrorKind::parameter, "attach_factor must be >= 0");
  const double eps = opts.eps ? *opts.eps : auto_eps(e, opts.min_pts);
  auto labels = density_cluster(e, eps, opts.min_pts);
  const auto main_min = static_cast<std::size_t>(std::ceil(opts.main_fraction * static_cast<double>(e.n())));
  attach_fragments(labels, e, opts.attach_factor * eps, std::max<std::size_t>(main_min, 1));
  auto report = classify_clusters(labels, e, manifest, opts.main_fraction);
  report.eps = eps;
  report.min_pts = opts.min_pts;
  report.attach_factor = opts.attach_factor;
  return report;
}

// ---------------------------------------------------------------------------
// Outlier manifests

struct OutlierEntry {
  std::string id;
  int cluster_id = kNoise;
  std::string flag_type;
  std::optional<std::string> image_path;

  friend bool operator==(const OutlierEntry&, const OutlierEntry&) = default;
};

inline nlohmann::json to_json(const OutlierEntry& o) {
  return {{"id", o.id},
          {"cluster_id", o.cluster_id},
          {"flag_type", o.flag_type},
          {"image_path", o.image_path ? nlohmann::json(*o.image_path) : nlohmann::json(nullptr)}};
}

/// All members of the selected clusters, ordered by sample id. Duplicate
/// selections are ignored.
inline std::vector<OutlierEntry> outlier_manifest(const ClusterReport& report, const DatasetManifest& manifest,
                                                  const std::vector<int>& selected, const std::string& flag_type) {
  require(manifest.size() == report.labels.size(), ErrorKind::alignment, "manifest and report differ in length");
  const std::set<int> wanted(selected.begin(), selected.end());
  for (int id : wanted) {
    if (!report.find(id)) fail(ErrorKind::lookup, "unknown cluster id " + std::to_string(id));
  }
  std::vector<OutlierEntry> out;
  for (std::size_t i = 0; i < report.labels.size(); ++i) {
    if (wanted.contains(report.labels[i])) {
      out.push_back({manifest[i].id, report.labels[i], flag_type, manifest[i].image_path});
    }
  }
  std::sort(out.begin(), out.end(), [](const OutlierEntry& a, const OutlierEntry& b) { return a.id < b.id; });
  return out;
}

inline std::string outliers_to_jsonl(const std::vector<OutlierEntry>& entries) {
  std::string s;
  for (const auto& e : entries) {
    s += to_json(e).dump();
    s += '\n';
  }
  return s;
}

}  // namespace satellite
