#pragma once

// Feature matrices, dataset manifests and their on-disk formats.
//
// Feature file layout (all integers little-endian):
//   "FEATMAT1" | u32 version = 1 | u64 n_samples | u64 n_dims
//   | n_samples * n_dims binary32 values, row-major
//   | id block: per row, u16 byte length + UTF-8 bytes
// A file may end right after the values; the ids then come from the
// companion JSON-lines manifest.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "satellite/binary_io.hpp"
#include "satellite/error.hpp"

namespace satellite {

inline constexpr std::string_view kFeatureMagic = "FEATMAT1";
inline constexpr std::uint32_t kFeatureVersion = 1;

class FeatureMatrix {
 public:
  FeatureMatrix() = default;

  /// Validates every invariant; throws validation/alignment errors.
  FeatureMatrix(std::size_t n_samples, std::size_t n_dims, std::vector<float> values,
                std::vector<std::string> ids)
      : n_samples_(n_samples), n_dims_(n_dims), values_(std::move(values)), ids_(std::move(ids)) {
    require(n_samples_ >= 1, ErrorKind::validation, "feature matrix needs at least one sample");
    require(n_dims_ >= 1, ErrorKind::validation, "feature matrix needs at least one dimension");
    require(values_.size() == n_samples_ * n_dims_, ErrorKind::validation,
            "value count " + std::to_string(values_.size()) + " != n_samples*n_dims " +
                std::to_string(n_samples_ * n_dims_));
    require(ids_.size() == n_samples_, ErrorKind::alignment,
            "id count " + std::to_string(ids_.size()) + " != n_samples " + std::to_string(n_samples_));
    for (std::size_t i = 0; i < n_samples_; ++i) {
      for (std::size_t j = 0; j < n_dims_; ++j) {
        if (!std::isfinite(values_[i * n_dims_ + j])) {
          fail(ErrorKind::validation, "non-finite value at row " + std::to_string(i) + ", column " +
                                          std::to_string(j));
        }
      }
    }
    std::unordered_set<std::string_view> seen;
    seen.reserve(ids_.size());
    for (const auto& id : ids_) {
      if (!seen.insert(id).second) fail(ErrorKind::validation, "duplicate sample id \"" + id + "\"");
    }
  }

  std::size_t n_samples() const { return n_samples_; }
  std::size_t n_dims() const { return n_dims_; }
  std::span<const float> values() const { return values_; }
  const std::vector<std::string>& ids() const { return ids_; }

  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(values_).subspan(i * n_dims_, n_dims_);
  }

  friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;

 private:
  std::size_t n_samples_ = 0;
  std::size_t n_dims_ = 0;
  std::vector<float> values_;
  std::vector<std::string> ids_;
};

struct ManifestEntry {
  std::string id;
  std::optional<std::string> image_path;
  std::optional<std::string> view_label;
  std::optional<std::string> patient_id;
  std::string source;
  bool is_seed = false;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

inline void to_json(nlohmann::json& j, const ManifestEntry& e) {
  auto opt = [](const std::optional<std::string>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  j = nlohmann::json{{"id", e.id},
                     {"image_path", opt(e.image_path)},
                     {"view_label", opt(e.view_label)},
                     {"patient_id", opt(e.patient_id)},
                     {"source", e.source},
                     {"is_seed", e.is_seed}};
}

inline void from_json(const nlohmann::json& j, ManifestEntry& e) {
  auto opt = [&](const char* key) -> std::optional<std::string> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<std::string>();
  };
  e.id = j.at("id").get<std::string>();
  e.image_path = opt("image_path");
  e.view_label = opt("view_label");
  e.patient_id = opt("patient_id");
  e.source = j.value("source", std::string{});
  e.is_seed = j.value("is_seed", false);
}

class DatasetManifest {
 public:
  DatasetManifest() = default;

  explicit DatasetManifest(std::vector<ManifestEntry> entries) : entries_(std::move(entries)) {
    index_.reserve(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (!index_.emplace(entries_[i].id, i).second) {
        fail(ErrorKind::validation, "duplicate manifest id \"" + entries_[i].id + "\"");
      }
    }
  }

  /// Entries with only ids filled in; used when a feature file comes without
  /// a manifest.
  static DatasetManifest from_ids(const std::vector<std::string>& ids, const std::string& source) {
    std::vector<ManifestEntry> entries;
    entries.reserve(ids.size());
    for (const auto& id : ids) {
      ManifestEntry e;
      e.id = id;
      e.source = source;
      entries.push_back(std::move(e));
    }
    return DatasetManifest(std::move(entries));
  }

  const std::vector<ManifestEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  const ManifestEntry& operator[](std::size_t i) const { return entries_[i]; }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t seed_count() const {
    std::size_t c = 0;
    for (const auto& e : entries_) c += e.is_seed ? 1 : 0;
    return c;
  }

  friend bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
    return a.entries_ == b.entries_;
  }

 private:
  std::vector<ManifestEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Row-aligned feature matrix and manifest.
struct LabeledDataset {
  FeatureMatrix features;
  DatasetManifest manifest;
};

inline void check_aligned(const FeatureMatrix& m, const DatasetManifest& manifest) {
  require(m.n_samples() == manifest.size(), ErrorKind::alignment,
          "feature rows (" + std::to_string(m.n_samples()) + ") != manifest entries (" +
              std::to_string(manifest.size()) + ")");
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    if (m.ids()[i] != manifest[i].id) {
      fail(ErrorKind::alignment, "row " + std::to_string(i) + ": feature id \"" + m.ids()[i] +
                                     "\" != manifest id \"" + manifest[i].id + "\"");
    }
  }
}

// ---------------------------------------------------------------------------
// Manifest JSON-lines

inline DatasetManifest parse_manifest(std::istream& in, const std::string& source_name) {
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      entries.push_back(nlohmann::json::parse(line).get<ManifestEntry>());
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::format, source_name + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return DatasetManifest(std::move(entries));
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  auto in = io::open_in(path);
  return parse_manifest(in, path.string());
}

inline std::string manifest_to_jsonl(const DatasetManifest& manifest) {
  std::string out;
  for (const auto& e : manifest.entries()) {
    out += nlohmann::json(e).dump();
    out += '\n';
  }
  return out;
}

inline void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  out << manifest_to_jsonl(manifest);
  if (!out) fail(ErrorKind::io, "write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Feature file

inline void write_features(const FeatureMatrix& m, std::ostream& out) {
  io::Writer w(out);
  w.magic(kFeatureMagic);
  w.scalar<std::uint32_t>(kFeatureVersion);
  w.scalar<std::uint64_t>(m.n_samples());
  w.scalar<std::uint64_t>(m.n_dims());
  w.array(m.values());
  for (const auto& id : m.ids()) w.short_string(id);
}

inline void save_features(const FeatureMatrix& m, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  write_features(m, out);
  out.flush();
  if (!out) fail(ErrorKind::io, "write failed: " + path.string());
}

/// Companion manifest convention: same stem, ".jsonl" extension.
inline std::filesystem::path companion_manifest_path(const std::filesystem::path& features) {
  auto p = features;
  p.replace_extension(".jsonl");
  return p;
}

inline FeatureMatrix read_features(std::istream& in, const std::string& source,
                                   const std::optional<std::filesystem::path>& manifest_path = std::nullopt) {
  io::Reader r(in, source);
  r.expect_magic(kFeatureMagic);
  const auto version = r.scalar<std::uint32_t>("version");
  require(version == kFeatureVersion, ErrorKind::format,
          source + ": unsupported version " + std::to_string(version));
  const auto n = r.scalar<std::uint64_t>("n_samples");
  const auto d = r.scalar<std::uint64_t>("n_dims");
  require(n >= 1 && d >= 1, ErrorKind::format, source + ": empty shape " + std::to_string(n) + "x" + std::to_string(d));
  require(d <= (std::uint64_t{1} << 40) / n, ErrorKind::format, source + ": implausible shape");

  std::vector<float> values(n * d);
  r.array(std::span<float>(values), "values");
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      if (!std::isfinite(values[i * d + j])) {
        fail(ErrorKind::validation, source + ": non-finite value at row " + std::to_string(i));
      }
    }
  }

  std::vector<std::string> ids;
  if (!r.at_eof()) {
    ids.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (r.at_eof()) {
        fail(ErrorKind::alignment, source + ": id block has " + std::to_string(i) + " ids for " +
                                       std::to_string(n) + " rows");
      }
      ids.push_back(r.short_string("id block"));
    }
    require(r.at_eof(), ErrorKind::alignment, source + ": id block has more ids than rows");
  } else {
    if (!manifest_path || !std::filesystem::exists(*manifest_path)) {
      fail(ErrorKind::alignment, source + ": no id block and no companion manifest");
    }
    const auto manifest = load_manifest(*manifest_path);
    require(manifest.size() == n, ErrorKind::alignment,
            source + ": manifest has " + std::to_string(manifest.size()) + " entries for " +
                std::to_string(n) + " rows");
    for (const auto& e : manifest.entries()) ids.push_back(e.id);
  }
  return FeatureMatrix(n, d, std::move(values), std::move(ids));
}

inline FeatureMatrix load_features(const std::filesystem::path& path,
                                   std::optional<std::filesystem::path> manifest_path = std::nullopt) {
  if (!std::filesystem::exists(path)) fail(ErrorKind::io, "feature file not found: " + path.string());
  if (!manifest_path) manifest_path = companion_manifest_path(path);
  auto in = io::open_in(path);
  return read_features(in, path.string(), manifest_path);
}

/// Loads features plus manifest; synthesizes an id-only manifest when none
/// exists.
inline LabeledDataset load_dataset(const std::filesystem::path& features_path,
                                   std::optional<std::filesystem::path> manifest_path = std::nullopt,
                                   const std::string& default_source = "unknown") {
  if (!manifest_path) {
    auto companion = companion_manifest_path(features_path);
    if (std::filesystem::exists(companion)) manifest_path = companion;
  }
  auto m = load_features(features_path, manifest_path);
  DatasetManifest manifest = manifest_path ? load_manifest(*manifest_path)
                                           : DatasetManifest::from_ids(m.ids(), default_source);
  check_aligned(m, manifest);
  return {std::move(m), std::move(manifest)};
}

// ---------------------------------------------------------------------------
// Merging (seed injection)

/// Concatenates target and seed rows. Every seed entry is marked is_seed with
/// view_label = seed_label. Ids present in both sets are prefixed with their
/// source tag ("<source>/<id>"); if the tags do not tell the sets apart,
/// "target/" and "seeds/" are used.
inline LabeledDataset merge_datasets(const LabeledDataset& target, const LabeledDataset& seeds,
                                     const std::string& seed_label) {
  check_aligned(target.features, target.manifest);
  if (seeds.manifest.size() == 0) return target;
  check_aligned(seeds.features, seeds.manifest);
  const auto d_target = target.features.n_dims();
  const auto d_seed = seeds.features.n_dims();
  if (d_target != d_seed) {
    fail(ErrorKind::merge, "dimension mismatch: target has " + std::to_string(d_target) +
                               " dims, seeds have " + std::to_string(d_seed));
  }

  std::unordered_set<std::string> seed_ids(seeds.features.ids().begin(), seeds.features.ids().end());
  std::unordered_set<std::string> target_ids(target.features.ids().begin(), target.features.ids().end());

  auto prefix_for = [](const ManifestEntry& e, const std::string& other_source, const char* fallback) {
    if (!e.source.empty() && e.source != other_source) return e.source + "/";
    return std::string(fallback) + "/";
  };
  const std::string target_source = target.manifest.size() ? target.manifest[0].source : "";
  const std::string seed_source = seeds.manifest[0].source;

  const std::size_t n = target.features.n_samples() + seeds.features.n_samples();
  std::vector<float> values;
  values.reserve(n * d_target);
  values.insert(values.end(), target.features.values().begin(), target.features.values().end());
  values.insert(values.end(), seeds.features.values().begin(), seeds.features.values().end());

  std::vector<std::string> ids;
  std::vector<ManifestEntry> entries;
  ids.reserve(n);
  entries.reserve(n);
  for (const auto& e : target.manifest.entries()) {
    ManifestEntry out = e;
    if (seed_ids.contains(e.id)) out.id = prefix_for(e, seed_source, "target") + e.id;
    ids.push_back(out.id);
    entries.push_back(std::move(out));
  }
  for (const auto& e : seeds.manifest.entries()) {
    ManifestEntry out = e;
    if (target_ids.contains(e.id)) out.id = prefix_for(e, target_source, "seeds") + e.id;
    out.is_seed = true;
    out.view_label = seed_label;
    ids.push_back(out.id);
    entries.push_back(std::move(out));
  }
  return {FeatureMatrix(n, d_target, std::move(values), std::move(ids)), DatasetManifest(std::move(entries))};
}

}  // namespace satellite
