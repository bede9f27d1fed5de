#include "run_store.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>

namespace satellite::curation {

namespace fs = std::filesystem;

std::string_view to_string(StageStatus s) {
  switch (s) {
    case StageStatus::pending: return "pending";
    case StageStatus::done: return "done";
    case StageStatus::failed: return "failed";
  }
  return "?";
}

StageStatus parse_stage_status(std::string_view s) {
  if (s == "pending") return StageStatus::pending;
  if (s == "done") return StageStatus::done;
  if (s == "failed") return StageStatus::failed;
  fail(ErrorKind::format, "unknown stage status \"" + std::string(s) + "\"");
}

InputRef make_input(std::string role, const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorKind::parameter, "input not found: " + path.string());
  return {std::move(role), fs::absolute(path).lexically_normal(), sha256_file(path)};
}

StageStatus RunRecord::status(const std::string& stage) const {
  for (const auto& [name, s] : stages) {
    if (name == stage) return s;
  }
  fail(ErrorKind::lookup, "run " + run_id + " has no stage \"" + stage + "\"");
}

void RunRecord::set(const std::string& stage, StageStatus s) {
  for (auto& [name, st] : stages) {
    if (name == stage) {
      st = s;
      return;
    }
  }
  stages.emplace_back(stage, s);
}

bool RunRecord::finished() const {
  return std::all_of(stages.begin(), stages.end(), [](const auto& p) { return p.second == StageStatus::done; });
}

const InputRef* RunRecord::input(const std::string& role) const {
  for (const auto& in : inputs) {
    if (in.role == role) return &in;
  }
  return nullptr;
}

nlohmann::json RunRecord::to_json() const {
  nlohmann::json stage_status = nlohmann::json::object();
  nlohmann::json stage_order = nlohmann::json::array();
  for (const auto& [name, s] : stages) {
    stage_status[name] = std::string(curation::to_string(s));
    stage_order.push_back(name);
  }
  nlohmann::json ins = nlohmann::json::array();
  for (const auto& in : inputs) ins.push_back({{"role", in.role}, {"path", in.path.string()}, {"sha256", in.sha256}});
  return {{"run_id", run_id},
          {"kind", kind},
          {"created_at", created_at},
          {"stage_status", stage_status},
          {"stage_order", stage_order},
          {"artifacts", artifacts},
          {"inputs", ins},
          {"config", config},
          {"parent_run", parent_run ? nlohmann::json(*parent_run) : nlohmann::json(nullptr)},
          {"error", error ? nlohmann::json(*error) : nlohmann::json(nullptr)}};
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
  try {
    RunRecord r;
    r.run_id = j.at("run_id").get<std::string>();
    r.kind = j.at("kind").get<std::string>();
    r.created_at = j.at("created_at").get<std::string>();
    const auto& status = j.at("stage_status");
    for (const auto& name : j.at("stage_order")) {
      const auto key = name.get<std::string>();
      r.stages.emplace_back(key, parse_stage_status(status.at(key).get<std::string>()));
    }
    r.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    for (const auto& in : j.at("inputs")) {
      r.inputs.push_back({in.at("role").get<std::string>(), in.at("path").get<std::string>(),
                          in.at("sha256").get<std::string>()});
    }
    r.config = j.at("config");
    if (j.contains("parent_run") && !j.at("parent_run").is_null()) r.parent_run = j.at("parent_run").get<std::string>();
    if (j.contains("error") && !j.at("error").is_null()) r.error = j.at("error").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("malformed run record: ") + e.what());
  }
}

std::string compute_run_id(const std::string& kind, const nlohmann::json& config, std::vector<InputRef> inputs) {
  std::sort(inputs.begin(), inputs.end(), [](const InputRef& a, const InputRef& b) { return a.role < b.role; });
  std::string material = kind + "\n" + config.dump() + "\n";
  for (const auto& in : inputs) material += in.role + "=" + in.sha256 + "\n";
  return sha256_hex(material);
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

RunStore::RunStore(fs::path root) : root_(std::move(root)) {}

fs::path RunStore::dir(const std::string& run_id) const {
  const bool ok = !run_id.empty() && run_id.size() <= 64 &&
                  std::all_of(run_id.begin(), run_id.end(), [](char c) { return std::isxdigit(c) && !std::isupper(c); });
  if (!ok) fail(ErrorKind::lookup, "invalid run id \"" + run_id + "\"");
  return root_ / run_id;
}

bool RunStore::exists(const std::string& run_id) const {
  return fs::exists(dir(run_id) / kRunFile);
}

std::vector<RunRecord> RunStore::list() const {
  std::vector<RunRecord> out;
  if (!fs::is_directory(root_)) return out;
  for (const auto& entry : fs::directory_iterator(root_)) {
    if (!entry.is_directory() || !fs::exists(entry.path() / kRunFile)) continue;
    try {
      out.push_back(RunRecord::from_json(nlohmann::json::parse(io::read_file(entry.path() / kRunFile))));
    } catch (const std::exception& e) {
      warn("skipping " + entry.path().string() + ": " + e.what());
    }
  }
  std::sort(out.begin(), out.end(), [](const RunRecord& a, const RunRecord& b) {
    return a.created_at < b.created_at || (a.created_at == b.created_at && a.run_id < b.run_id);
  });
  return out;
}

RunRecord RunStore::load(const std::string& run_id) const {
  const auto path = dir(run_id) / kRunFile;
  if (!fs::exists(path)) fail(ErrorKind::lookup, "unknown run " + run_id);
  try {
    return RunRecord::from_json(nlohmann::json::parse(io::read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, path.string() + ": " + e.what());
  }
}

void RunStore::save(const RunRecord& record) const {
  const auto d = dir(record.run_id);
  fs::create_directories(d);
  io::write_file_atomic(d / kRunFile, record.to_json().dump(2) + "\n");
}

fs::path RunStore::artifact(const RunRecord& record, const std::string& name) const {
  auto it = record.artifacts.find(name);
  if (it == record.artifacts.end()) fail(ErrorKind::lookup, "run " + record.run_id + " has no " + name + " artifact");
  auto path = dir(record.run_id) / it->second;
  if (!fs::exists(path)) fail(ErrorKind::lookup, "run " + record.run_id + ": " + name + " artifact missing on disk");
  return path;
}

std::mutex& RunStore::writer(const std::string& run_id) {
  std::lock_guard lock(registry_);
  auto& slot = writers_[run_id];
  if (!slot) slot = std::make_unique<std::mutex>();
  return *slot;
}

nlohmann::json Flag::to_json() const {
  return {{"flag_id", flag_id},
          {"cluster_id", cluster_id},
          {"flag_type", flag_type},
          {"note", note},
          {"created_at", created_at}};
}

nlohmann::json FlagSet::to_json() const {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& f : flags) list.push_back(f.to_json());
  return {{"next_id", next_id}, {"flags", list}};
}

FlagSet FlagSet::from_json(const nlohmann::json& j) {
  try {
    FlagSet s;
    s.next_id = j.at("next_id").get<int>();
    for (const auto& f : j.at("flags")) {
      s.flags.push_back({f.at("flag_id").get<int>(), f.at("cluster_id").get<int>(), f.at("flag_type").get<std::string>(),
                         f.value("note", ""), f.value("created_at", "")});
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("malformed flags file: ") + e.what());
  }
}

FlagSet load_flags(const fs::path& run_dir) {
  const auto path = run_dir / kFlagsFile;
  if (!fs::exists(path)) return {};
  try {
    return FlagSet::from_json(nlohmann::json::parse(io::read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, path.string() + ": " + e.what());
  }
}

void save_flags(const fs::path& run_dir, const FlagSet& flags) {
  io::write_file_atomic(run_dir / kFlagsFile, flags.to_json().dump(2) + "\n");
}

}  // namespace satellite::curation
