#pragma once

// HTTP API over a run directory, consumed by the curation UI.

#include <filesystem>
#include <memory>
#include <string>

#include "satellite/embedding.hpp"
#include "satellite/feature_store.hpp"

namespace satellite::curation {

struct ServiceOptions {
  std::string host = "127.0.0.1";
  /// 0 picks a free port.
  int port = 8080;
  std::size_t thumbnail_cache = 1000;
  int thumbnail_size = 128;
};

class Service {
 public:
  Service(std::filesystem::path runs_dir, ServiceOptions opts = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds the listening socket; io error when the address is unavailable.
  void bind();
  int port() const;
  /// Serves requests until stop(); requires bind().
  void serve();
  /// Stops accepting requests, lets in-flight requests and the running
  /// background job finish, and marks queued jobs failed.
  void stop();
  /// Blocks until the background queue is empty (tests, shutdown).
  void drain();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Layout of GET /api/runs/{id}/embedding: n little-endian float32 (x, y)
/// pairs followed by the sample ids, each terminated by '\n'.
std::string embedding_payload(const Embedding& e, const DatasetManifest& manifest);

}  // namespace satellite::curation
