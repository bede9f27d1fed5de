#include "operations.hpp"

#include <algorithm>

namespace satellite::curation {

namespace fs = std::filesystem;

namespace {

constexpr const char* kEmbeddingFile = "embedding.emb";
constexpr const char* kManifestFile = "manifest.jsonl";
constexpr const char* kClustersFile = "clusters.json";

void write_clusters(const fs::path& path, const ClusterReport& report) {
  io::write_file_atomic(path, to_json(report).dump() + "\n");
}

/// Marks the first unfinished stage failed and persists the error.
void record_failure(const RunStore& store, RunRecord& r, const std::exception& e) {
  for (auto& [name, s] : r.stages) {
    if (s != StageStatus::done) {
      s = StageStatus::failed;
      break;
    }
  }
  r.error = e.what();
  try {
    store.save(r);
  } catch (const std::exception& inner) {
    warn(std::string("could not record failure: ") + inner.what());
  }
}

DatasetRef ref_from_run(const RunStore& store, const std::string& run_id) {
  const auto run = store.load(run_id);
  require(run.kind == kEmbedKind, ErrorKind::parameter, "run " + run_id + " is not an embed run");
  const auto* f = run.input("features");
  require(f != nullptr, ErrorKind::format, "run " + run_id + " records no features input");
  DatasetRef ref;
  ref.features = f->path;
  if (const auto* m = run.input("manifest")) ref.manifest = m->path;
  for (const auto& in : ref.inputs()) {
    const auto* recorded = run.input(in.role);
    require(recorded && recorded->sha256 == in.sha256, ErrorKind::validation,
            "input " + in.path.string() + " changed since run " + run_id);
  }
  return ref;
}

}  // namespace

std::optional<fs::path> DatasetRef::resolved_manifest() const {
  if (manifest) return manifest;
  auto companion = companion_manifest_path(features);
  if (fs::exists(companion)) return companion;
  return std::nullopt;
}

LabeledDataset DatasetRef::load() const {
  if (!fs::exists(features)) fail(ErrorKind::parameter, "feature file not found: " + features.string());
  if (manifest && !fs::exists(*manifest)) fail(ErrorKind::parameter, "manifest not found: " + manifest->string());
  return load_dataset(features, manifest, default_source);
}

std::vector<InputRef> DatasetRef::inputs(const std::string& prefix) const {
  std::vector<InputRef> out{make_input(prefix + "features", features)};
  if (auto m = resolved_manifest()) out.push_back(make_input(prefix + "manifest", *m));
  return out;
}

nlohmann::json DatasetRef::to_json() const {
  return {{"features", features.string()},
          {"manifest", manifest ? nlohmann::json(manifest->string()) : nlohmann::json(nullptr)},
          {"default_source", default_source}};
}

DatasetRef DatasetRef::from_json(const nlohmann::json& j) {
  try {
    DatasetRef r;
    r.features = j.at("features").get<std::string>();
    if (j.contains("manifest") && !j.at("manifest").is_null()) r.manifest = j.at("manifest").get<std::string>();
    r.default_source = j.value("default_source", r.default_source);
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parameter, std::string("malformed dataset reference: ") + e.what());
  }
}

RunRecord embed_run(RunStore& store, const EmbedRequest& req) {
  const auto inputs = run_stage("load", [&] { return req.data.inputs(); });
  const auto config = req.config.to_json();
  RunRecord r;
  r.run_id = compute_run_id(kEmbedKind, config, inputs);
  r.kind = kEmbedKind;
  r.created_at = utc_now();
  r.inputs = inputs;
  r.config = config;
  r.stages = {{"embed", StageStatus::pending}};
  if (req.detect_after) r.stages.emplace_back("detect", StageStatus::pending);

  std::lock_guard lock(store.writer(r.run_id));
  store.save(r);
  const auto dir = store.dir(r.run_id);
  try {
    const auto data = run_stage("load", [&] { return req.data.load(); });
    const auto result = embed_features(data.features, req.config);
    run_stage("persist", [&] {
      auto sidecar = req.config.sidecar();
      sidecar["run_id"] = r.run_id;
      save_embedding(result.embedding, dir / kEmbeddingFile, sidecar);
      save_manifest(data.manifest, dir / kManifestFile);
    });
    r.artifacts[artifact::embedding] = kEmbeddingFile;
    r.artifacts[artifact::manifest] = kManifestFile;
    r.set("embed", StageStatus::done);
    store.save(r);
    if (req.detect_after) {
      const auto report = run_stage("detect", [&] { return detect_satellites(result.embedding, data.manifest, req.detect); });
      run_stage("persist", [&] { write_clusters(dir / kClustersFile, report); });
      r.artifacts[artifact::clusters] = kClustersFile;
      r.set("detect", StageStatus::done);
      store.save(r);
    }
  } catch (const std::exception& e) {
    record_failure(store, r, e);
    throw;
  }
  return r;
}

ClusterReport detect_run(RunStore& store, const std::string& run_id, const DetectOptions& opts) {
  std::lock_guard lock(store.writer(run_id));
  auto r = store.load(run_id);
  const auto e = load_run_embedding(store, r);
  const auto m = load_run_manifest(store, r);
  r.set("detect", StageStatus::pending);
  try {
    const auto report = run_stage("detect", [&] { return detect_satellites(e, m, opts); });
    const auto file = r.artifacts.count(artifact::clusters) ? r.artifacts.at(artifact::clusters) : kClustersFile;
    run_stage("persist", [&] { write_clusters(store.dir(run_id) / file, report); });
    r.artifacts[artifact::clusters] = file;
    r.set("detect", StageStatus::done);
    r.error.reset();
    store.save(r);
    return report;
  } catch (const std::exception& ex) {
    r.set("detect", StageStatus::failed);
    r.error = ex.what();
    store.save(r);
    throw;
  }
}

RunRecord plan_seed_probe(RunStore& store, const SeedProbeRequest& req) {
  auto inputs = run_stage("load", [&] { return req.target.inputs("target_"); });
  const auto seed_inputs = run_stage("load", [&] { return req.seeds.inputs("seed_"); });
  inputs.insert(inputs.end(), seed_inputs.begin(), seed_inputs.end());
  const nlohmann::json config{{"embed", req.config.to_json()},
                              {"probe",
                               {{"k_vote", req.probe.k_vote},
                                {"vote_threshold", req.probe.vote_threshold},
                                {"seed_label", req.probe.seed_label}}}};
  RunRecord r;
  r.run_id = compute_run_id(kSeedProbeKind, config, inputs);
  r.kind = kSeedProbeKind;
  r.created_at = utc_now();
  r.inputs = std::move(inputs);
  r.config = config;
  r.parent_run = req.parent_run;
  r.stages = {{"seed-probe", StageStatus::pending}};
  std::lock_guard lock(store.writer(r.run_id));
  if (store.exists(r.run_id)) {
    auto existing = store.load(r.run_id);
    if (existing.finished()) return existing;
  }
  store.save(r);
  return r;
}

RunRecord seed_probe_run(RunStore& store, const SeedProbeRequest& req, RunRecord r) {
  std::lock_guard lock(store.writer(r.run_id));
  try {
    const auto target = run_stage("load", [&] { return req.target.load(); });
    const auto seeds = run_stage("load", [&] { return req.seeds.load(); });
    run_seed_probe(target, seeds, req.config, req.probe, store.dir(r.run_id));
    r.artifacts[artifact::features] = SeedProbeRunFiles::features;
    r.artifacts[artifact::manifest] = SeedProbeRunFiles::manifest;
    r.artifacts[artifact::embedding] = SeedProbeRunFiles::embedding;
    r.artifacts[artifact::clusters] = SeedProbeRunFiles::clusters;
    r.artifacts[artifact::probe] = SeedProbeRunFiles::result;
    r.set("seed-probe", StageStatus::done);
    r.error.reset();
    store.save(r);
  } catch (const std::exception& e) {
    record_failure(store, r, e);
    throw;
  }
  return r;
}

SeedProbeRequest seed_probe_from_runs(const RunStore& store, const std::string& target_run,
                                      const std::optional<std::string>& seed_run,
                                      const std::optional<DatasetRef>& seeds) {
  require(seed_run.has_value() != seeds.has_value(), ErrorKind::parameter,
          "give exactly one of a seed run or a seed dataset");
  SeedProbeRequest req;
  req.target = ref_from_run(store, target_run);
  req.seeds = seed_run ? ref_from_run(store, *seed_run) : *seeds;
  const auto parent = store.load(target_run);
  req.config = embed_config_from_json(parent.config);
  if (req.config.method != EmbedMethod::umap) req.config = EmbedConfig{};
  req.parent_run = target_run;
  return req;
}

Embedding load_run_embedding(const RunStore& store, const RunRecord& run) {
  return load_embedding(store.artifact(run, artifact::embedding));
}

DatasetManifest load_run_manifest(const RunStore& store, const RunRecord& run) {
  return load_manifest(store.artifact(run, artifact::manifest));
}

ClusterReport load_run_clusters(const RunStore& store, const RunRecord& run) {
  const auto path = store.artifact(run, artifact::clusters);
  try {
    return cluster_report_from_json(nlohmann::json::parse(io::read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, path.string() + ": " + e.what());
  }
}

std::vector<OutlierEntry> export_flags(const RunStore& store, const std::string& run_id) {
  const auto run = store.load(run_id);
  const auto flags = load_flags(store.dir(run_id));
  std::vector<OutlierEntry> out;
  if (flags.flags.empty()) return out;
  const auto report = load_run_clusters(store, run);
  const auto manifest = load_run_manifest(store, run);
  for (const auto& f : flags.flags) {
    auto entries = outlier_manifest(report, manifest, {f.cluster_id}, f.flag_type);
    out.insert(out.end(), entries.begin(), entries.end());
  }
  std::stable_sort(out.begin(), out.end(), [](const OutlierEntry& a, const OutlierEntry& b) {
    return a.id < b.id || (a.id == b.id && a.flag_type < b.flag_type);
  });
  return out;
}

Flag add_flag(RunStore& store, const std::string& run_id, int cluster_id, const std::string& flag_type,
              const std::string& note) {
  require(!flag_type.empty(), ErrorKind::parameter, "flag_type must not be empty");
  std::lock_guard lock(store.writer(run_id));
  const auto run = store.load(run_id);
  const auto report = load_run_clusters(store, run);
  if (!report.find(cluster_id)) fail(ErrorKind::lookup, "unknown cluster id " + std::to_string(cluster_id));
  const auto dir = store.dir(run_id);
  auto flags = load_flags(dir);
  Flag f{flags.next_id++, cluster_id, flag_type, note, utc_now()};
  flags.flags.push_back(f);
  save_flags(dir, flags);
  return f;
}

void delete_flag(RunStore& store, const std::string& run_id, int flag_id) {
  std::lock_guard lock(store.writer(run_id));
  store.load(run_id);
  const auto dir = store.dir(run_id);
  auto flags = load_flags(dir);
  const auto it = std::find_if(flags.flags.begin(), flags.flags.end(), [&](const Flag& f) { return f.flag_id == flag_id; });
  if (it == flags.flags.end()) fail(ErrorKind::lookup, "unknown flag id " + std::to_string(flag_id));
  flags.flags.erase(it);
  save_flags(dir, flags);
}

}  // namespace satellite::curation
