#include "service.hpp"

#include <bit>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <map>
#include <mutex>
#include <thread>
#include <unordered_map>

#include <sys/socket.h>

#include <httplib.h>

#include "operations.hpp"
#include "thumbnail.hpp"

namespace satellite::curation {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "embedding payload assumes a little-endian host");

std::string embedding_payload(const Embedding& e, const DatasetManifest& manifest) {
  require(e.n() == manifest.size(), ErrorKind::alignment,
          "embedding has " + std::to_string(e.n()) + " points, manifest has " + std::to_string(manifest.size()));
  std::string out(8 * e.n(), '\0');
  std::memcpy(out.data(), e.coords().data(), out.size());
  for (const auto& entry : manifest.entries()) {
    out += entry.id;
    out += '\n';
  }
  return out;
}

namespace {

int http_status(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::lookup: return 404;
    case ErrorKind::numeric: return 422;
    case ErrorKind::io: return 500;
    default: return 400;
  }
}

void send_json(httplib::Response& res, const nlohmann::json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& kind, const std::string& message) {
  send_json(res, {{"error", message}, {"kind", kind}}, status);
}

/// Wraps a handler so library errors become JSON error responses.
template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const Error& e) {
      send_error(res, http_status(e.kind()), std::string(to_string(e.kind())), e.what());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, 400, "format", std::string("malformed JSON: ") + e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  };
}

int parse_int(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::parameter, what + " must be an integer (got \"" + s + "\")");
}

nlohmann::json point_json(std::size_t i, const Embedding& e, const DatasetManifest& m, const ClusterReport* report) {
  const auto& entry = m[i];
  auto opt = [](const std::optional<std::string>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"index", i},
          {"id", entry.id},
          {"x", e.x(i)},
          {"y", e.y(i)},
          {"cluster_id", report ? report->labels[i] : kNoise},
          {"view_label", opt(entry.view_label)},
          {"patient_id", opt(entry.patient_id)},
          {"image_path", opt(entry.image_path)},
          {"source", entry.source},
          {"is_seed", entry.is_seed}};
}

}  // namespace

struct Service::Impl {
  RunStore store;
  ServiceOptions opts;
  httplib::Server server;
  ThumbnailCache thumbnails;
  bool bound = false;
  int bound_port = 0;

  // Sample id -> image path per manifest file, refreshed when the file changes.
  struct ManifestIndex {
    fs::file_time_type stamp;
    std::unordered_map<std::string, std::optional<std::string>> images;
  };
  std::mutex index_mutex;
  std::map<fs::path, ManifestIndex> indexes;

  struct Job {
    RunRecord planned;
    SeedProbeRequest request;
  };
  std::mutex queue_mutex;
  std::condition_variable queue_cv;
  std::condition_variable idle_cv;
  std::deque<Job> queue;
  bool busy = false;
  std::string running;
  bool stopping = false;
  std::thread worker;

  Impl(fs::path root, ServiceOptions o)
      : store(std::move(root)), opts(std::move(o)), thumbnails(opts.thumbnail_cache, opts.thumbnail_size) {
    server.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    });
    routes();
    worker = std::thread([this] { work(); });
  }

  ~Impl() { shutdown_worker(); }

  void work() {
    for (;;) {
      Job job;
      {
        std::unique_lock lock(queue_mutex);
        queue_cv.wait(lock, [&] { return stopping || !queue.empty(); });
        if (queue.empty()) return;
        job = std::move(queue.front());
        queue.pop_front();
        busy = true;
        running = job.planned.run_id;
      }
      try {
        seed_probe_run(store, job.request, job.planned);
      } catch (const std::exception& e) {
        warn("seed probe " + job.planned.run_id + " failed: " + e.what());
      }
      {
        std::lock_guard lock(queue_mutex);
        busy = false;
        running.clear();
      }
      idle_cv.notify_all();
    }
  }

  void shutdown_worker() {
    std::deque<Job> cancelled;
    {
      std::lock_guard lock(queue_mutex);
      if (stopping && !worker.joinable()) return;
      stopping = true;
      cancelled.swap(queue);
    }
    queue_cv.notify_all();
    if (worker.joinable()) worker.join();
    for (auto& job : cancelled) {
      job.planned.set("seed-probe", StageStatus::failed);
      job.planned.error = "service stopped before the job ran";
      try {
        std::lock_guard lock(store.writer(job.planned.run_id));
        store.save(job.planned);
      } catch (const std::exception& e) {
        warn(std::string("could not record cancelled job: ") + e.what());
      }
    }
    idle_cv.notify_all();
  }

  bool enqueue(Job job) {
    {
      std::lock_guard lock(queue_mutex);
      if (stopping) return false;
      if (running == job.planned.run_id) return true;
      for (const auto& q : queue) {
        if (q.planned.run_id == job.planned.run_id) return true;
      }
      queue.push_back(std::move(job));
    }
    queue_cv.notify_all();
    return true;
  }

  void drain() {
    std::unique_lock lock(queue_mutex);
    idle_cv.wait(lock, [&] { return queue.empty() && !busy; });
  }

  std::optional<fs::path> find_image(const std::string& sample_id, const std::optional<std::string>& run_id) {
    std::vector<RunRecord> runs;
    if (run_id) runs.push_back(store.load(*run_id));
    else runs = store.list();
    for (const auto& run : runs) {
      auto it = run.artifacts.find(artifact::manifest);
      if (it == run.artifacts.end()) continue;
      const auto path = store.dir(run.run_id) / it->second;
      std::error_code ec;
      const auto stamp = fs::last_write_time(path, ec);
      if (ec) continue;
      std::lock_guard lock(index_mutex);
      auto& idx = indexes[path];
      if (idx.images.empty() || idx.stamp != stamp) {
        idx.images.clear();
        const auto manifest = load_manifest(path);
        for (const auto& e : manifest.entries()) idx.images.emplace(e.id, e.image_path);
        idx.stamp = stamp;
      }
      if (auto hit = idx.images.find(sample_id); hit != idx.images.end()) {
        if (!hit->second) fail(ErrorKind::lookup, "sample " + sample_id + " has no image path");
        const fs::path p = *hit->second;
        if (p.is_absolute()) return p;
        // Relative paths are relative to the manifest the run was built from.
        for (const char* role : {"manifest", "target_manifest", "seed_manifest"}) {
          if (const auto* in = run.input(role)) {
            auto candidate = in->path.parent_path() / p;
            if (fs::exists(candidate)) return candidate;
          }
        }
        return p;
      }
    }
    return std::nullopt;
  }

  void routes() {
    server.Get("/api/runs", guarded([this](const httplib::Request&, httplib::Response& res) {
      nlohmann::json out = nlohmann::json::array();
      for (const auto& r : store.list()) out.push_back(r.to_json());
      send_json(res, out);
    }));

    server.Get("/api/runs/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, store.load(req.path_params.at("id")).to_json());
    }));

    server.Get("/api/runs/:id/embedding", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto run = store.load(req.path_params.at("id"));
      const auto e = load_run_embedding(store, run);
      const auto m = load_run_manifest(store, run);
      res.set_header("X-Point-Count", std::to_string(e.n()));
      res.set_header("X-Coordinate-Bytes", std::to_string(8 * e.n()));
      res.set_content(embedding_payload(e, m), "application/octet-stream");
    }));

    server.Get("/api/runs/:id/clusters", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto run = store.load(req.path_params.at("id"));
      res.set_content(io::read_file(store.artifact(run, artifact::clusters)), "application/json");
    }));

    server.Get("/api/runs/:id/probe", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto run = store.load(req.path_params.at("id"));
      res.set_content(io::read_file(store.artifact(run, artifact::probe)), "application/json");
    }));

    server.Get("/api/runs/:id/points", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto run = store.load(req.path_params.at("id"));
      const auto e = load_run_embedding(store, run);
      const auto m = load_run_manifest(store, run);
      std::optional<ClusterReport> report;
      if (run.artifacts.count(artifact::clusters)) report = load_run_clusters(store, run);
      require(e.n() == m.size(), ErrorKind::alignment, "embedding and manifest differ in length");
      std::optional<int> cluster;
      if (req.has_param("cluster")) {
        cluster = parse_int(req.get_param_value("cluster"), "cluster");
        require(report.has_value(), ErrorKind::lookup, "run has no cluster report");
        if (!report->find(*cluster)) fail(ErrorKind::lookup, "unknown cluster id " + std::to_string(*cluster));
      }
      nlohmann::json out = nlohmann::json::array();
      for (std::size_t i = 0; i < e.n(); ++i) {
        if (cluster && report->labels[i] != *cluster) continue;
        out.push_back(point_json(i, e, m, report ? &*report : nullptr));
      }
      send_json(res, out);
    }));

    server.Get("/api/images/:sample/thumb", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto& sample = req.path_params.at("sample");
      std::optional<std::string> run;
      if (req.has_param("run")) run = req.get_param_value("run");
      const auto path = find_image(sample, run);
      if (!path) fail(ErrorKind::lookup, "unknown sample " + sample);
      res.set_header("Cache-Control", "max-age=3600");
      res.set_content(thumbnails.get(*path), "image/jpeg");
    }));

    server.Get("/api/runs/:id/flags", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto& id = req.path_params.at("id");
      store.load(id);
      nlohmann::json out = nlohmann::json::array();
      for (const auto& f : load_flags(store.dir(id)).flags) out.push_back(f.to_json());
      send_json(res, out);
    }));

    server.Post("/api/runs/:id/flags", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = nlohmann::json::parse(req.body);
      require(body.contains("cluster_id") && body.at("cluster_id").is_number_integer(), ErrorKind::parameter,
              "cluster_id (integer) is required");
      require(body.contains("flag_type") && body.at("flag_type").is_string(), ErrorKind::parameter,
              "flag_type (string) is required");
      const auto f = add_flag(store, req.path_params.at("id"), body.at("cluster_id").get<int>(),
                              body.at("flag_type").get<std::string>(), body.value("note", ""));
      send_json(res, f.to_json());
    }));

    server.Delete("/api/runs/:id/flags/:flag", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const int flag = parse_int(req.path_params.at("flag"), "flag id");
      delete_flag(store, req.path_params.at("id"), flag);
      send_json(res, {{"deleted", flag}});
    }));

    server.Post("/api/runs/:id/seed-probe", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
      std::optional<std::string> seed_run;
      std::optional<DatasetRef> seeds;
      if (body.contains("seed_run")) seed_run = body.at("seed_run").get<std::string>();
      if (body.contains("seeds")) seeds = DatasetRef::from_json(body.at("seeds"));
      auto request = seed_probe_from_runs(store, req.path_params.at("id"), seed_run, seeds);
      auto& p = request.probe;
      p.seed_label = body.value("seed_label", p.seed_label);
      p.k_vote = body.value("k_vote", p.k_vote);
      p.vote_threshold = body.value("vote_threshold", p.vote_threshold);
      auto& u = request.config.umap;
      u.k = body.value("k", u.k);
      u.min_dist = body.value("min_dist", u.min_dist);
      u.n_epochs = body.value("n_epochs", u.n_epochs);
      u.rng_seed = body.value("rng_seed", u.rng_seed);
      run_stage("config", [&] { u.validate(); });
      require(p.k_vote >= 1, ErrorKind::parameter, "k_vote must be >= 1");
      require(p.vote_threshold >= 0.0 && p.vote_threshold <= 1.0, ErrorKind::parameter,
              "vote_threshold must be in [0, 1]");

      auto planned = plan_seed_probe(store, request);
      const auto id = planned.run_id;
      const nlohmann::json body_out{{"run_id", id}, {"status", "/api/runs/" + id}};
      if (planned.finished()) {
        send_json(res, body_out, 200);
        return;
      }
      if (!enqueue({std::move(planned), std::move(request)})) {
        send_error(res, 503, "unavailable", "service is shutting down");
        return;
      }
      send_json(res, body_out, 202);
    }));

    server.Get("/api/runs/:id/export", guarded([this](const httplib::Request& req, httplib::Response& res) {
      res.set_content(outliers_to_jsonl(export_flags(store, req.path_params.at("id"))), "application/x-ndjson");
    }));
  }
};

Service::Service(fs::path runs_dir, ServiceOptions opts) : impl_(std::make_unique<Impl>(std::move(runs_dir), std::move(opts))) {}

Service::~Service() {
  stop();
}

void Service::bind() {
  auto& s = *impl_;
  if (!fs::is_directory(s.store.root())) fail(ErrorKind::io, "run directory not found: " + s.store.root().string());
  if (s.opts.port == 0) {
    s.bound_port = s.server.bind_to_any_port(s.opts.host);
    if (s.bound_port <= 0) fail(ErrorKind::io, "cannot bind " + s.opts.host);
  } else {
    if (!s.server.bind_to_port(s.opts.host, s.opts.port)) {
      fail(ErrorKind::io, "cannot bind " + s.opts.host + ":" + std::to_string(s.opts.port) + " (port in use?)");
    }
    s.bound_port = s.opts.port;
  }
  s.bound = true;
}

int Service::port() const {
  return impl_->bound_port;
}

void Service::serve() {
  require(impl_->bound, ErrorKind::parameter, "serve() before bind()");
  impl_->server.listen_after_bind();
}

void Service::stop() {
  impl_->server.stop();
  impl_->shutdown_worker();
}

void Service::drain() {
  impl_->drain();
}

}  // namespace satellite::curation
