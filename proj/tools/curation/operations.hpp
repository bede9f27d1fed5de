#pragma once

// Run-level operations shared by the CLI and the HTTP service.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "run_store.hpp"

namespace satellite::curation {

/// A feature file plus optional manifest (the companion manifest is used when
/// none is given and one exists).
struct DatasetRef {
  std::filesystem::path features;
  std::optional<std::filesystem::path> manifest;
  std::string default_source = "unknown";

  std::optional<std::filesystem::path> resolved_manifest() const;
  LabeledDataset load() const;
  /// Inputs named `<prefix>features` and `<prefix>manifest`.
  std::vector<InputRef> inputs(const std::string& prefix = "") const;
  nlohmann::json to_json() const;
  static DatasetRef from_json(const nlohmann::json& j);
};

struct EmbedRequest {
  DatasetRef data;
  EmbedConfig config;
  DetectOptions detect;
  bool detect_after = true;
};

/// Runs embed (and detect unless disabled) into `<root>/<run_id>/`. Failures
/// are recorded in run.json and rethrown.
RunRecord embed_run(RunStore& store, const EmbedRequest& req);

/// (Re)runs satellite detection on a finished embedding.
ClusterReport detect_run(RunStore& store, const std::string& run_id, const DetectOptions& opts);

struct SeedProbeRequest {
  DatasetRef target;
  DatasetRef seeds;
  EmbedConfig config;
  ProbeConfig probe;
  std::optional<std::string> parent_run;
};

/// Writes a pending run record and returns it; the run id is known before
/// the pipeline starts. A finished run with the same id is returned as is.
RunRecord plan_seed_probe(RunStore& store, const SeedProbeRequest& req);
/// Executes a planned seed probe; failures are recorded and rethrown.
RunRecord seed_probe_run(RunStore& store, const SeedProbeRequest& req, RunRecord planned);

/// A seed-probe request that reuses the inputs of an existing run as target
/// (`target_run`) and, optionally, as seeds (`seed_run`).
SeedProbeRequest seed_probe_from_runs(const RunStore& store, const std::string& target_run,
                                      const std::optional<std::string>& seed_run,
                                      const std::optional<DatasetRef>& seeds);

Embedding load_run_embedding(const RunStore& store, const RunRecord& run);
DatasetManifest load_run_manifest(const RunStore& store, const RunRecord& run);
ClusterReport load_run_clusters(const RunStore& store, const RunRecord& run);

/// Every member of every flagged cluster, one entry per (member, flag),
/// ordered by id then flag type.
std::vector<OutlierEntry> export_flags(const RunStore& store, const std::string& run_id);

/// Appends a flag after checking the cluster exists; serialized per run.
Flag add_flag(RunStore& store, const std::string& run_id, int cluster_id, const std::string& flag_type,
              const std::string& note = "");
/// Lookup error when no flag has that id.
void delete_flag(RunStore& store, const std::string& run_id, int flag_id);

}  // namespace satellite::curation
