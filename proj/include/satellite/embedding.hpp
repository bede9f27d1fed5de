#pragma once

// 2-D embeddings and their file format.
//
// Embedding file (little-endian):
//   "EMBED2D1" | u64 n | n (x, y) binary32 pairs | u16 length + config hash
// A JSON sidecar next to it (same stem, ".json") carries the method and the
// run parameters.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "satellite/binary_io.hpp"
#include "satellite/error.hpp"

namespace satellite {

inline constexpr std::string_view kEmbeddingMagic = "EMBED2D1";

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

class Embedding {
 public:
  Embedding() = default;

  /// coords holds n interleaved (x, y) pairs.
  Embedding(std::vector<float> coords, std::string method, std::string config_hash, std::uint64_t rng_seed)
      : coords_(std::move(coords)), method_(std::move(method)), config_hash_(std::move(config_hash)),
        rng_seed_(rng_seed) {
    require(coords_.size() % 2 == 0, ErrorKind::validation, "embedding coordinate count is odd");
    for (std::size_t i = 0; i < coords_.size(); ++i) {
      if (!std::isfinite(coords_[i])) {
        fail(ErrorKind::validation, "non-finite embedding coordinate at point " + std::to_string(i / 2));
      }
    }
  }

  std::size_t n() const { return coords_.size() / 2; }
  float x(std::size_t i) const { return coords_[2 * i]; }
  float y(std::size_t i) const { return coords_[2 * i + 1]; }
  Point2 point(std::size_t i) const { return {coords_[2 * i], coords_[2 * i + 1]}; }
  std::span<const float> coords() const { return coords_; }
  const std::string& method() const { return method_; }
  const std::string& config_hash() const { return config_hash_; }
  std::uint64_t rng_seed() const { return rng_seed_; }

  friend bool operator==(const Embedding&, const Embedding&) = default;

 private:
  std::vector<float> coords_;
  std::string method_;
  std::string config_hash_;
  std::uint64_t rng_seed_ = 0;
};

inline double distance(const Point2& a, const Point2& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

inline std::string embedding_bytes(const Embedding& e) {
  std::ostringstream out(std::ios::binary);
  io::Writer w(out);
  w.magic(kEmbeddingMagic);
  w.scalar<std::uint64_t>(e.n());
  w.array(e.coords());
  w.short_string(e.config_hash());
  return std::move(out).str();
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& embedding_path) {
  auto p = embedding_path;
  p.replace_extension(".json");
  return p;
}

/// Writes the binary file and its JSON sidecar. `sidecar` is merged with the
/// method, config hash and seed recorded on the embedding.
inline void save_embedding(const Embedding& e, const std::filesystem::path& path,
                           nlohmann::json sidecar = nlohmann::json::object()) {
  io::write_file_atomic(path, embedding_bytes(e));
  sidecar["method"] = e.method();
  sidecar["config_hash"] = e.config_hash();
  sidecar["rng_seed"] = e.rng_seed();
  io::write_file_atomic(sidecar_path(path), sidecar.dump(2) + "\n");
}

inline Embedding load_embedding(const std::filesystem::path& path) {
  auto in = io::open_in(path);
  io::Reader r(in, path.string());
  r.expect_magic(kEmbeddingMagic);
  const auto n = r.scalar<std::uint64_t>("n");
  require(n < (std::uint64_t{1} << 36), ErrorKind::format, path.string() + ": implausible point count");
  std::vector<float> coords(2 * n);
  r.array(std::span<float>(coords), "coordinates");
  auto hash = r.short_string("config hash");

  std::string method = "unknown";
  std::uint64_t seed = 0;
  const auto side = sidecar_path(path);
  if (std::filesystem::exists(side)) {
    try {
      const auto j = nlohmann::json::parse(io::read_file(side));
      method = j.value("method", method);
      seed = j.value("rng_seed", seed);
    } catch (const nlohmann::json::exception& ex) {
      fail(ErrorKind::format, side.string() + ": " + ex.what());
    }
  }
  return Embedding(std::move(coords), std::move(method), std::move(hash), seed);
}

}  // namespace satellite
