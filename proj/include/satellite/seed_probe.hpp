#pragma once

// Mislabel search by seeding: reference-labeled points are merged into a
// target set, the joint set is embedded, and target points whose embedding
// neighborhood is dominated by seeds are flagged.

#include <algorithm>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "satellite/binary_io.hpp"
#include "satellite/embedding.hpp"
#include "satellite/error.hpp"
#include "satellite/feature_store.hpp"
#include "satellite/log.hpp"
#include "satellite/pipeline.hpp"
#include "satellite/satellite_detector.hpp"
#include "satellite/spatial2d.hpp"

namespace satellite {

struct ProbeConfig {
  std::size_t k_vote = 10;
  double vote_threshold = 0.5;
  std::string seed_label = "seed";
};

struct FlaggedPoint {
  std::string id;
  double seed_vote_fraction = 0.0;
  int cluster_id = kNoise;

  friend bool operator==(const FlaggedPoint&, const FlaggedPoint&) = default;
};

struct SeedProbeResult {
  /// Descending vote fraction, ties by id.
  std::vector<FlaggedPoint> flagged;
  ProbeConfig config;
};

inline nlohmann::json to_json(const SeedProbeResult& r) {
  nlohmann::json flagged = nlohmann::json::array();
  for (const auto& f : r.flagged) {
    flagged.push_back({{"id", f.id}, {"seed_vote_fraction", f.seed_vote_fraction}, {"cluster_id", f.cluster_id}});
  }
  return {{"flagged", flagged},
          {"config",
           {{"k_vote", r.config.k_vote},
            {"vote_threshold", r.config.vote_threshold},
            {"seed_label", r.config.seed_label}}}};
}

inline SeedProbeResult seed_probe_result_from_json(const nlohmann::json& j) {
  SeedProbeResult r;
  const auto& c = j.at("config");
  r.config = {c.at("k_vote").get<std::size_t>(), c.at("vote_threshold").get<double>(),
              c.at("seed_label").get<std::string>()};
  for (const auto& f : j.at("flagged")) {
    r.flagged.push_back({f.at("id").get<std::string>(), f.at("seed_vote_fraction").get<double>(),
                         f.at("cluster_id").get<int>()});
  }
  return r;
}

/// Votes in the joint 2-D embedding: the fraction of each non-seed point's
/// k_vote nearest neighbors that are seeds. Points at or above
/// vote_threshold are flagged. `labels` (optional) supplies cluster ids.
inline SeedProbeResult probe_mislabels(const Embedding& e, const DatasetManifest& manifest, const ProbeConfig& cfg,
                                       const std::vector<int>* labels = nullptr) {
  const std::size_t n = e.n();
  require(manifest.size() == n, ErrorKind::alignment,
          "embedding has " + std::to_string(n) + " points, manifest has " + std::to_string(manifest.size()));
  require(!labels || labels->size() == n, ErrorKind::alignment, "cluster labels do not match embedding");
  const std::size_t seeds = manifest.seed_count();
  require(seeds >= 1 && seeds < n, ErrorKind::parameter, "seed probe needs at least one seed and one target point");
  require(cfg.k_vote >= 1 && cfg.k_vote < n, ErrorKind::parameter,
          "k_vote must satisfy 1 <= k_vote < n (k_vote=" + std::to_string(cfg.k_vote) + ", n=" + std::to_string(n) + ")");
  require(cfg.vote_threshold >= 0.0 && cfg.vote_threshold <= 1.0, ErrorKind::parameter,
          "vote_threshold must be in [0, 1]");

  const auto knn = knn_2d(e, cfg.k_vote);
  SeedProbeResult result;
  result.config = cfg;
  for (std::size_t i = 0; i < n; ++i) {
    if (manifest[i].is_seed) continue;
    std::size_t votes = 0;
    for (std::size_t t = 0; t < cfg.k_vote; ++t) votes += manifest[knn.indices[i * cfg.k_vote + t]].is_seed ? 1 : 0;
    const double fraction = static_cast<double>(votes) / static_cast<double>(cfg.k_vote);
    if (fraction >= cfg.vote_threshold) {
      result.flagged.push_back({manifest[i].id, fraction, labels ? (*labels)[i] : kNoise});
    }
  }
  std::sort(result.flagged.begin(), result.flagged.end(), [](const FlaggedPoint& a, const FlaggedPoint& b) {
    return a.seed_vote_fraction > b.seed_vote_fraction || (a.seed_vote_fraction == b.seed_vote_fraction && a.id < b.id);
  });
  return result;
}

/// Run directory layout written by run_seed_probe.
struct SeedProbeRunFiles {
  static constexpr const char* config = "config.json";
  static constexpr const char* features = "merged.featmat";
  static constexpr const char* manifest = "merged.jsonl";
  static constexpr const char* embedding = "embedding.emb";
  static constexpr const char* clusters = "clusters.json";
  static constexpr const char* result = "probe_result.json";
};

struct SeedProbeRun {
  LabeledDataset merged;
  Embedding embedding;
  ClusterReport clusters;
  SeedProbeResult result;
};

/// merge -> knn -> fuzzy topology -> layout -> probe. When `run_dir` is
/// given, every intermediate artifact is written there.
inline SeedProbeRun run_seed_probe(const LabeledDataset& target, const LabeledDataset& seeds,
                                   const EmbedConfig& embed_cfg, const ProbeConfig& probe_cfg,
                                   const std::optional<std::filesystem::path>& run_dir = std::nullopt) {
  if (target.manifest.size() == 0 || target.features.n_samples() == 0) {
    fail(ErrorKind::parameter, "seed probe needs at least one target point");
  }
  if (seeds.manifest.size() == 0 || seeds.features.n_samples() == 0) {
    fail(ErrorKind::parameter, "seed probe needs at least one seed point");
  }
  if (target.manifest[0].source == seeds.manifest[0].source) {
    warn("seed and target sets share the source tag \"" + seeds.manifest[0].source +
         "\"; seeds from a different dataset are preferable");
  }

  SeedProbeRun run;
  run.merged = run_stage("merge", [&] { return merge_datasets(target, seeds, probe_cfg.seed_label); });

  auto write = [&](const char* stage, auto&& fn) {
    if (run_dir) run_stage(stage, fn);
  };
  write("persist", [&] {
    std::filesystem::create_directories(*run_dir);
    nlohmann::json config{{"embed", embed_cfg.to_json()},
                          {"probe",
                           {{"k_vote", probe_cfg.k_vote},
                            {"vote_threshold", probe_cfg.vote_threshold},
                            {"seed_label", probe_cfg.seed_label}}},
                          {"n_target", target.features.n_samples()},
                          {"n_seed", seeds.features.n_samples()}};
    io::write_file_atomic(*run_dir / SeedProbeRunFiles::config, config.dump(2) + "\n");
    save_features(run.merged.features, *run_dir / SeedProbeRunFiles::features);
    save_manifest(run.merged.manifest, *run_dir / SeedProbeRunFiles::manifest);
  });

  run.embedding = embed_features(run.merged.features, embed_cfg).embedding;
  write("persist", [&] { save_embedding(run.embedding, *run_dir / SeedProbeRunFiles::embedding, embed_cfg.sidecar()); });

  run.clusters = run_stage("detect", [&] { return detect_satellites(run.embedding, run.merged.manifest); });
  run.result = run_stage("probe", [&] {
    return probe_mislabels(run.embedding, run.merged.manifest, probe_cfg, &run.clusters.labels);
  });
  write("persist", [&] {
    io::write_file_atomic(*run_dir / SeedProbeRunFiles::clusters, to_json(run.clusters).dump() + "\n");
    io::write_file_atomic(*run_dir / SeedProbeRunFiles::result, to_json(run.result).dump(2) + "\n");
  });
  return run;
}

}  // namespace satellite
