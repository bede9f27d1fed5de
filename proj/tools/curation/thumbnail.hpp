#pragma once

#include <filesystem>
#include <string>

#include "lru_cache.hpp"

namespace satellite::curation {

/// Decodes an image and re-encodes it as JPEG with the longer side scaled
/// down to at most `max_side` pixels (never enlarged). Throws lookup errors
/// for missing files and format errors for undecodable ones.
std::string make_thumbnail(const std::filesystem::path& image, int max_side = 128, int quality = 85);

/// make_thumbnail behind an LRU cache keyed by path and modification time.
class ThumbnailCache {
 public:
  explicit ThumbnailCache(std::size_t capacity = 1000, int max_side = 128) : cache_(capacity), max_side_(max_side) {}

  std::string get(const std::filesystem::path& image);
  std::size_t size() const { return cache_.size(); }

 private:
  LruCache<std::string, std::string> cache_;
  int max_side_;
};

}  // namespace satellite::curation
