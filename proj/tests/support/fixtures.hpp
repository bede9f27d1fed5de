#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "satellite/embedding.hpp"
#include "satellite/feature_store.hpp"
#include "satellite/random.hpp"

namespace fixtures {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("satellite-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<std::string> make_ids(std::size_t n, const std::string& prefix = "s") {
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = prefix + std::to_string(i);
  return ids;
}

inline satellite::FeatureMatrix matrix(std::size_t n, std::size_t d, std::vector<float> values,
                                       const std::string& prefix = "s") {
  return satellite::FeatureMatrix(n, d, std::move(values), make_ids(n, prefix));
}

inline satellite::FeatureMatrix uniform_matrix(std::size_t n, std::size_t d, std::uint64_t seed,
                                               const std::string& prefix = "s") {
  satellite::Rng rng(seed);
  std::vector<float> v(n * d);
  for (auto& x : v) x = static_cast<float>(satellite::uniform(rng, -1.0, 1.0));
  return matrix(n, d, std::move(v), prefix);
}

/// Isotropic Gaussian blobs; `sizes[c]` points around `centers[c]`.
inline std::vector<float> blobs(const std::vector<std::vector<double>>& centers, const std::vector<std::size_t>& sizes,
                                double stddev, std::uint64_t seed) {
  satellite::Rng rng(seed);
  std::vector<float> v;
  for (std::size_t c = 0; c < centers.size(); ++c) {
    for (std::size_t i = 0; i < sizes[c]; ++i) {
      for (double mu : centers[c]) v.push_back(static_cast<float>(mu + stddev * satellite::normal01(rng)));
    }
  }
  return v;
}

inline satellite::DatasetManifest manifest(const std::vector<std::string>& ids, const std::string& source,
                                           const std::vector<std::string>& views = {},
                                           const std::vector<std::string>& patients = {}) {
  std::vector<satellite::ManifestEntry> entries(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    entries[i].id = ids[i];
    entries[i].source = source;
    if (!views.empty()) entries[i].view_label = views[i];
    if (!patients.empty()) entries[i].patient_id = patients[i];
  }
  return satellite::DatasetManifest(std::move(entries));
}

inline satellite::Embedding embedding(const std::vector<std::pair<double, double>>& pts) {
  std::vector<float> c;
  for (auto [x, y] : pts) {
    c.push_back(static_cast<float>(x));
    c.push_back(static_cast<float>(y));
  }
  return satellite::Embedding(std::move(c), "test", "", 0);
}

/// Class-B target set with `planted` class-A points mislabeled B, plus a
/// class-A seed set. A is centered at `separation` along the first axis, B at
/// the origin, both with unit variance. Planted rows come last in the target.
struct PlantedMislabels {
  satellite::LabeledDataset target;
  satellite::LabeledDataset seeds;
  std::vector<std::string> planted_ids;
};

inline PlantedMislabels planted_mislabels(std::size_t n_target, std::size_t planted, std::size_t n_seeds,
                                          std::size_t d, double separation, std::uint64_t seed) {
  std::vector<double> a(d, 0.0), b(d, 0.0);
  a[0] = separation;
  const auto tv = blobs({b, a}, {n_target - planted, planted}, 1.0, seed);
  const auto sv = blobs({a}, {n_seeds}, 1.0, seed + 1);
  const auto tids = make_ids(n_target, "img");
  const auto sids = make_ids(n_seeds, "ref");
  PlantedMislabels out;
  out.target = {satellite::FeatureMatrix(n_target, d, tv, tids),
                manifest(tids, "target", std::vector<std::string>(n_target, "B"))};
  out.seeds = {satellite::FeatureMatrix(n_seeds, d, sv, sids),
               manifest(sids, "reference", std::vector<std::string>(n_seeds, "A"))};
  out.planted_ids.assign(tids.end() - static_cast<std::ptrdiff_t>(planted), tids.end());
  return out;
}

}  // namespace fixtures
