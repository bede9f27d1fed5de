#pragma once

// Flat, file-system backed run management: one directory per run id holding
// run.json plus the artifacts of each pipeline stage.

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "satellite/satellite.hpp"

namespace satellite::curation {

enum class StageStatus { pending, done, failed };

std::string_view to_string(StageStatus s);
StageStatus parse_stage_status(std::string_view s);

/// An input file identified by role ("features", "manifest", "seed_features",
/// ...) and content digest. The path is informational; only the digest
/// enters the run id.
struct InputRef {
  std::string role;
  std::filesystem::path path;
  std::string sha256;
};

InputRef make_input(std::string role, const std::filesystem::path& path);

namespace artifact {
inline constexpr const char* embedding = "embedding";
inline constexpr const char* manifest = "manifest";
inline constexpr const char* clusters = "clusters";
inline constexpr const char* probe = "probe_result";
inline constexpr const char* features = "features";
}  // namespace artifact

inline constexpr const char* kEmbedKind = "embed";
inline constexpr const char* kSeedProbeKind = "seed-probe";

struct RunRecord {
  std::string run_id;
  std::string kind;
  std::string created_at;
  /// Ordered stage name -> status.
  std::vector<std::pair<std::string, StageStatus>> stages;
  /// Artifact name -> file name inside the run directory.
  std::map<std::string, std::string> artifacts;
  std::vector<InputRef> inputs;
  nlohmann::json config = nlohmann::json::object();
  std::optional<std::string> parent_run;
  std::optional<std::string> error;

  StageStatus status(const std::string& stage) const;
  void set(const std::string& stage, StageStatus s);
  bool finished() const;
  const InputRef* input(const std::string& role) const;

  nlohmann::json to_json() const;
  static RunRecord from_json(const nlohmann::json& j);
};

/// SHA-256 over the kind, the canonical config dump and the (role, digest)
/// pairs in role order.
std::string compute_run_id(const std::string& kind, const nlohmann::json& config, std::vector<InputRef> inputs);

std::string utc_now();

class RunStore {
 public:
  explicit RunStore(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  /// Lookup error for ids that are not lowercase hex (keeps requests inside
  /// the root).
  std::filesystem::path dir(const std::string& run_id) const;
  bool exists(const std::string& run_id) const;
  /// Oldest first, ties by id. Unreadable run directories are skipped with a
  /// warning.
  std::vector<RunRecord> list() const;
  RunRecord load(const std::string& run_id) const;
  void save(const RunRecord& record) const;
  /// Path of a named artifact; lookup error when the run has not produced it.
  std::filesystem::path artifact(const RunRecord& record, const std::string& name) const;

  /// Serializes mutations of one run.
  std::mutex& writer(const std::string& run_id);

 private:
  std::filesystem::path root_;
  std::mutex registry_;
  std::map<std::string, std::unique_ptr<std::mutex>> writers_;
};

struct Flag {
  int flag_id = 0;
  int cluster_id = kNoise;
  std::string flag_type;
  std::string note;
  std::string created_at;

  nlohmann::json to_json() const;
};

struct FlagSet {
  int next_id = 1;
  std::vector<Flag> flags;

  nlohmann::json to_json() const;
  static FlagSet from_json(const nlohmann::json& j);
};

inline constexpr const char* kFlagsFile = "flags.json";
inline constexpr const char* kRunFile = "run.json";

/// Empty set when the run has no flags file.
FlagSet load_flags(const std::filesystem::path& run_dir);
void save_flags(const std::filesystem::path& run_dir, const FlagSet& flags);

}  // namespace satellite::curation
