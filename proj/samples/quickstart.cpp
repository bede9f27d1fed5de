// Embeds a synthetic dataset with two planted outlier groups, detects
// satellite clusters and prints the members of each one.

#include <cstdio>
#include <random>

#include "satellite/satellite.hpp"

using namespace satellite;

int main() {
  const std::size_t d = 32;
  std::mt19937_64 gen(7);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  std::vector<float> values;
  std::vector<ManifestEntry> entries;
  auto add = [&](std::size_t count, std::size_t axis, float offset, const std::string& view) {
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t j = 0; j < d; ++j) values.push_back(noise(gen) + (j == axis ? offset : 0.0f));
      ManifestEntry e;
      e.id = view + "-" + std::to_string(i);
      e.source = "demo";
      e.view_label = view;
      entries.push_back(e);
    }
  };
  add(1500, 0, 0.0f, "PA");
  add(25, 0, 18.0f, "L");
  add(15, 1, 18.0f, "artifact");

  std::vector<std::string> ids;
  for (const auto& e : entries) ids.push_back(e.id);
  const FeatureMatrix features(entries.size(), d, std::move(values), ids);
  const DatasetManifest manifest(std::move(entries));

  EmbedConfig cfg;
  cfg.umap.k = 10;
  cfg.umap.min_dist = 0.001;
  cfg.umap.n_epochs = 300;
  const auto result = embed_features(features, cfg);
  const auto report = detect_satellites(result.embedding, manifest, DetectOptions{});

  std::printf("eps %.4f, %zu main, %zu satellite, %zu noise\n", report.eps, report.count(ClusterKind::main),
              report.count(ClusterKind::satellite), report.noise_count);
  std::vector<int> satellites;
  for (const auto& c : report.clusters) {
    if (c.kind == ClusterKind::satellite) satellites.push_back(c.id);
    std::printf("cluster %d: %s, %zu points, dominant view %s\n", c.id, std::string(to_string(c.kind)).c_str(),
                c.size, c.dominant_view ? c.dominant_view->label.c_str() : "-");
  }
  for (const auto& o : outlier_manifest(report, manifest, satellites, "review")) {
    std::printf("  %s (cluster %d)\n", o.id.c_str(), o.cluster_id);
  }
}
