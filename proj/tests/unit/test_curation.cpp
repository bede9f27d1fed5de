#include <csignal>
#include <cstdio>
#include <fstream>
#include <regex>
#include <set>
#include <thread>

#include <sys/wait.h>
#include <unistd.h>

#include <gtest/gtest.h>
#include <httplib.h>

#include "cli.hpp"
#include "expect_error.hpp"
#include "fixtures.hpp"
#include "lru_cache.hpp"
#include "operations.hpp"
#include "service.hpp"
#include "thumbnail.hpp"

using namespace satellite;
using namespace satellite::curation;
namespace fs = std::filesystem;

namespace {

void write_ppm(const fs::path& path, int w, int h, unsigned char shade) {
  std::ofstream out(path, std::ios::binary);
  out << "P6\n" << w << " " << h << "\n255\n";
  for (int i = 0; i < w * h; ++i) {
    const unsigned char px[3] = {shade, static_cast<unsigned char>(i % 256), 40};
    out.write(reinterpret_cast<const char*>(px), 3);
  }
}

/// Width and height from the first SOF marker of a JPEG stream.
std::pair<int, int> jpeg_size(const std::string& jpeg) {
  if (jpeg.size() < 4 || static_cast<unsigned char>(jpeg[0]) != 0xFF || static_cast<unsigned char>(jpeg[1]) != 0xD8) {
    return {-1, -1};
  }
  std::size_t i = 2;
  while (i + 9 < jpeg.size()) {
    if (static_cast<unsigned char>(jpeg[i]) != 0xFF) return {-1, -1};
    const auto marker = static_cast<unsigned char>(jpeg[i + 1]);
    const std::size_t len = (static_cast<unsigned char>(jpeg[i + 2]) << 8) | static_cast<unsigned char>(jpeg[i + 3]);
    if (marker >= 0xC0 && marker <= 0xC3) {
      const int h = (static_cast<unsigned char>(jpeg[i + 5]) << 8) | static_cast<unsigned char>(jpeg[i + 6]);
      const int w = (static_cast<unsigned char>(jpeg[i + 7]) << 8) | static_cast<unsigned char>(jpeg[i + 8]);
      return {w, h};
    }
    i += 2 + len;
  }
  return {-1, -1};
}

/// 300-point main blob plus two 15-point satellites in 8-D, with a manifest
/// whose first five entries point at small images.
struct Workspace {
  fixtures::TempDir tmp;
  fs::path data = tmp / "data";
  fs::path runs = tmp / "runs";
  fs::path features = data / "f.featmat";
  fs::path manifest = data / "f.jsonl";

  Workspace() {
    fs::create_directories(data / "img");
    fs::create_directories(runs);
    std::vector<double> zero(8, 0.0), a(8, 0.0), b(8, 0.0);
    a[0] = 15.0;
    b[1] = 15.0;
    const auto values = fixtures::blobs({zero, a, b}, {300, 15, 15}, 1.0, 77);
    const auto ids = fixtures::make_ids(330, "x");
    save_features(FeatureMatrix(330, 8, values, ids), features);
    std::vector<ManifestEntry> entries(330);
    for (std::size_t i = 0; i < 330; ++i) {
      entries[i].id = ids[i];
      entries[i].source = "synthetic";
      entries[i].view_label = i < 300 ? "PA" : "L";
      entries[i].patient_id = i < 300 ? "p" + std::to_string(i) : "p-sat";
    }
    for (int i = 0; i < 5; ++i) {
      const auto rel = "img/x" + std::to_string(i) + ".ppm";
      write_ppm(data / rel, 300, 200, static_cast<unsigned char>(50 * i));
      entries[i].image_path = rel;
    }
    entries[5].image_path = "img/missing.ppm";
    save_manifest(DatasetManifest(std::move(entries)), manifest);
  }

  EmbedRequest request(std::uint64_t seed = 42) const {
    EmbedRequest req;
    req.data = {features, manifest, "synthetic"};
    req.config.umap.k = 10;
    req.config.umap.n_epochs = 120;
    req.config.umap.rng_seed = seed;
    return req;
  }
};

std::string read(const fs::path& p) {
  return io::read_file(p);
}

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run_binary(const std::string& args, const fs::path& scratch) {
  const auto out = scratch / "cli.out";
  const auto err = scratch / "cli.err";
  const std::string cmd = std::string(SATELLITE_CLI) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, fs::exists(out) ? read(out) : "",
          fs::exists(err) ? read(err) : ""};
}

}  // namespace

// ---------------------------------------------------------------------------
// Run records and the store

TEST(RunStore, RecordJsonRoundTrip) {
  RunRecord r;
  r.run_id = "abc123";
  r.kind = kEmbedKind;
  r.created_at = "2026-01-01T00:00:00Z";
  r.stages = {{"embed", StageStatus::done}, {"detect", StageStatus::failed}};
  r.artifacts = {{"embedding", "embedding.emb"}};
  r.inputs = {{"features", "/x/f.featmat", "00ff"}};
  r.config = {{"k", 10}};
  r.parent_run = "beef";
  r.error = "boom";
  const auto back = RunRecord::from_json(nlohmann::json::parse(r.to_json().dump()));
  EXPECT_EQ(back.to_json(), r.to_json());
  EXPECT_EQ(back.status("detect"), StageStatus::failed);
  EXPECT_FALSE(back.finished());
  EXPECT_SAT_ERROR(back.status("layout"), ErrorKind::lookup, "layout");
}

TEST(RunStore, RunIdDependsOnContentNotPaths) {
  fixtures::TempDir tmp;
  const auto f1 = tmp / "a.bin";
  const auto f2 = tmp / "b.bin";
  io::write_file_atomic(f1, "same bytes");
  io::write_file_atomic(f2, "same bytes");
  const nlohmann::json cfg{{"k", 10}};
  const auto id1 = compute_run_id("embed", cfg, {make_input("features", f1)});
  EXPECT_EQ(id1, compute_run_id("embed", cfg, {make_input("features", f2)}));
  EXPECT_EQ(id1.size(), 64u);
  EXPECT_NE(id1, compute_run_id("embed", {{"k", 11}}, {make_input("features", f1)}));
  EXPECT_NE(id1, compute_run_id("seed-probe", cfg, {make_input("features", f1)}));
  io::write_file_atomic(f2, "other bytes");
  EXPECT_NE(id1, compute_run_id("embed", cfg, {make_input("features", f2)}));
  // Role order does not matter.
  EXPECT_EQ(compute_run_id("embed", cfg, {make_input("a", f1), make_input("b", f2)}),
            compute_run_id("embed", cfg, {make_input("b", f2), make_input("a", f1)}));
}

TEST(RunStore, RejectsUnsafeIds) {
  fixtures::TempDir tmp;
  RunStore store(tmp.path());
  for (const char* bad : {"", "../etc", "ABC", "a/b", "zz"}) {
    EXPECT_SAT_ERROR(store.dir(bad), ErrorKind::lookup, "invalid run id");
  }
  EXPECT_SAT_ERROR(store.load("abcdef"), ErrorKind::lookup, "unknown run");
  EXPECT_TRUE(store.list().empty());
}

TEST(LruCache, EvictsLeastRecentlyUsed) {
  LruCache<int, std::string> cache(2);
  cache.put(1, "a");
  cache.put(2, "b");
  EXPECT_EQ(cache.get(1), "a");
  cache.put(3, "c");
  EXPECT_FALSE(cache.get(2).has_value());
  EXPECT_EQ(cache.get(1), "a");
  EXPECT_EQ(cache.get(3), "c");
  cache.put(3, "d");
  EXPECT_EQ(cache.get(3), "d");
  EXPECT_EQ(cache.size(), 2u);
  LruCache<int, int> none(0);
  none.put(1, 1);
  EXPECT_FALSE(none.get(1).has_value());
}

TEST(Thumbnail, DownscalesLongerSideTo128) {
  fixtures::TempDir tmp;
  write_ppm(tmp / "wide.ppm", 300, 200, 10);
  write_ppm(tmp / "small.ppm", 40, 90, 10);
  EXPECT_EQ(jpeg_size(make_thumbnail(tmp / "wide.ppm")), std::make_pair(128, 85));
  EXPECT_EQ(jpeg_size(make_thumbnail(tmp / "small.ppm")), std::make_pair(40, 90));
  io::write_file_atomic(tmp / "junk.png", "not an image");
  EXPECT_SAT_ERROR(make_thumbnail(tmp / "junk.png"), ErrorKind::format, "decode");
  EXPECT_SAT_ERROR(make_thumbnail(tmp / "absent.png"), ErrorKind::lookup, "not found");
  ThumbnailCache cache(1);
  const auto a = cache.get(tmp / "wide.ppm");
  EXPECT_EQ(cache.get(tmp / "wide.ppm"), a);
  cache.get(tmp / "small.ppm");
  EXPECT_EQ(cache.size(), 1u);
}

TEST(EmbeddingPayload, CoordinatesThenIdBlock) {
  const auto e = fixtures::embedding({{1.5, -2.0}, {0.25, 8.0}});
  const auto m = fixtures::manifest({"a", "bb"}, "s");
  const auto p = embedding_payload(e, m);
  ASSERT_EQ(p.size(), 16u + 5u);
  float xy[4];
  std::memcpy(xy, p.data(), 16);
  EXPECT_EQ(xy[0], 1.5f);
  EXPECT_EQ(xy[3], 8.0f);
  EXPECT_EQ(p.substr(16), "a\nbb\n");
  EXPECT_SAT_ERROR(embedding_payload(e, fixtures::manifest({"a"}, "s")), ErrorKind::alignment, "manifest");
}

// ---------------------------------------------------------------------------
// Operations

TEST(Operations, EmbedRunIsReproducible) {
  Workspace ws;
  RunStore a(ws.tmp / "a"), b(ws.tmp / "b");
  const auto ra = embed_run(a, ws.request());
  const auto rb = embed_run(b, ws.request());
  EXPECT_EQ(ra.run_id, rb.run_id);
  EXPECT_TRUE(ra.finished());
  EXPECT_EQ(read(a.artifact(ra, artifact::embedding)), read(b.artifact(rb, artifact::embedding)));
  EXPECT_EQ(read(a.artifact(ra, artifact::clusters)), read(b.artifact(rb, artifact::clusters)));
  EXPECT_NE(embed_run(a, ws.request(7)).run_id, ra.run_id);
  EXPECT_EQ(a.list().size(), 2u);
  const auto reloaded = a.load(ra.run_id);
  EXPECT_EQ(reloaded.status("embed"), StageStatus::done);
  EXPECT_EQ(reloaded.status("detect"), StageStatus::done);
  ASSERT_NE(reloaded.input("features"), nullptr);
  EXPECT_EQ(reloaded.input("features")->sha256, sha256_file(ws.features));
  for (const auto& [name, file] : reloaded.artifacts) EXPECT_TRUE(fs::exists(a.dir(ra.run_id) / file)) << name;
}

TEST(Operations, FailureIsRecordedWithStage) {
  Workspace ws;
  RunStore store(ws.runs);
  auto req = ws.request();
  req.config.umap.k = 400;
  try {
    embed_run(store, req);
    ADD_FAILURE() << "expected failure";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "knn");
  }
  const auto runs = store.list();
  ASSERT_EQ(runs.size(), 1u);
  EXPECT_EQ(runs[0].status("embed"), StageStatus::failed);
  EXPECT_EQ(runs[0].status("detect"), StageStatus::pending);
  ASSERT_TRUE(runs[0].error.has_value());
  EXPECT_NE(runs[0].error->find("knn"), std::string::npos);
}

TEST(Operations, DetectRerunOverwritesReport) {
  Workspace ws;
  RunStore store(ws.runs);
  auto req = ws.request();
  req.detect_after = false;
  const auto run = embed_run(store, req);
  EXPECT_SAT_ERROR(load_run_clusters(store, run), ErrorKind::lookup, "clusters");
  DetectOptions opts;
  const auto report = detect_run(store, run.run_id, opts);
  EXPECT_EQ(store.load(run.run_id).status("detect"), StageStatus::done);
  EXPECT_EQ(to_json(load_run_clusters(store, store.load(run.run_id))), to_json(report));
  opts.min_pts = 1;
  EXPECT_SAT_ERROR(detect_run(store, run.run_id, opts), ErrorKind::parameter, "min_pts");
  EXPECT_EQ(store.load(run.run_id).status("detect"), StageStatus::failed);
}

TEST(Operations, FlagsPersistAndExport) {
  Workspace ws;
  RunStore store(ws.runs);
  const auto run = embed_run(store, ws.request());
  const auto report = load_run_clusters(store, run);
  ASSERT_GE(report.count(ClusterKind::satellite), 1u);
  const auto& sat = report.clusters[report.count(ClusterKind::main)];
  ASSERT_EQ(sat.kind, ClusterKind::satellite);

  EXPECT_TRUE(export_flags(store, run.run_id).empty());
  const auto f1 = add_flag(store, run.run_id, sat.id, "lateral-view");
  const auto f2 = add_flag(store, run.run_id, sat.id, "artifact", "second look");
  EXPECT_EQ(f1.flag_id, 1);
  EXPECT_EQ(f2.flag_id, 2);
  EXPECT_FALSE(fs::exists(store.dir(run.run_id) / "flags.json.tmp"));
  EXPECT_SAT_ERROR(add_flag(store, run.run_id, 9999, "x"), ErrorKind::lookup, "9999");
  EXPECT_SAT_ERROR(add_flag(store, run.run_id, sat.id, ""), ErrorKind::parameter, "flag_type");

  const auto entries = export_flags(store, run.run_id);
  ASSERT_EQ(entries.size(), 2 * sat.size);
  std::set<std::string> members;
  for (std::size_t i = 0; i < report.labels.size(); ++i) {
    if (report.labels[i] == sat.id) members.insert(load_run_manifest(store, run)[i].id);
  }
  for (std::size_t t = 0; t < entries.size(); t += 2) {
    EXPECT_EQ(entries[t].id, entries[t + 1].id);
    EXPECT_EQ(entries[t].flag_type, "artifact");
    EXPECT_EQ(entries[t + 1].flag_type, "lateral-view");
    EXPECT_TRUE(members.count(entries[t].id));
  }

  delete_flag(store, run.run_id, f2.flag_id);
  EXPECT_SAT_ERROR(delete_flag(store, run.run_id, f2.flag_id), ErrorKind::lookup, "flag");
  EXPECT_EQ(export_flags(store, run.run_id).size(), sat.size);
  delete_flag(store, run.run_id, f1.flag_id);
  EXPECT_TRUE(export_flags(store, run.run_id).empty());
  EXPECT_EQ(add_flag(store, run.run_id, sat.id, "again").flag_id, 3);
}

TEST(Operations, ConcurrentFlagWritesAreSerialized) {
  Workspace ws;
  RunStore store(ws.runs);
  const auto run = embed_run(store, ws.request());
  const int cluster = load_run_clusters(store, run).clusters.front().id;
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      for (int i = 0; i < 10; ++i) add_flag(store, run.run_id, cluster, "t" + std::to_string(t));
    });
  }
  for (auto& th : threads) th.join();
  const auto flags = load_flags(store.dir(run.run_id));
  EXPECT_EQ(flags.flags.size(), 40u);
  std::set<int> ids;
  for (const auto& f : flags.flags) ids.insert(f.flag_id);
  EXPECT_EQ(ids.size(), 40u);
}

TEST(Operations, SeedProbeFromRuns) {
  fixtures::TempDir tmp;
  const auto fx = fixtures::planted_mislabels(300, 6, 40, 8, 8.0, 5);
  save_features(fx.target.features, tmp / "t.featmat");
  save_manifest(fx.target.manifest, tmp / "t.jsonl");
  save_features(fx.seeds.features, tmp / "s.featmat");
  save_manifest(fx.seeds.manifest, tmp / "s.jsonl");
  RunStore store(tmp / "runs");
  EmbedRequest req;
  req.data = {tmp / "t.featmat", tmp / "t.jsonl"};
  req.config.umap.n_epochs = 150;
  const auto target = embed_run(store, req);
  req.data = {tmp / "s.featmat", tmp / "s.jsonl"};
  const auto seeds = embed_run(store, req);

  auto probe = seed_probe_from_runs(store, target.run_id, seeds.run_id, std::nullopt);
  EXPECT_EQ(probe.config.umap.n_epochs, 150u);
  EXPECT_EQ(probe.parent_run, target.run_id);
  const auto planned = plan_seed_probe(store, probe);
  EXPECT_EQ(planned.status("seed-probe"), StageStatus::pending);
  const auto done = seed_probe_run(store, probe, planned);
  EXPECT_TRUE(done.finished());
  EXPECT_TRUE(plan_seed_probe(store, probe).finished());
  const auto result = seed_probe_result_from_json(nlohmann::json::parse(read(store.artifact(done, artifact::probe))));
  std::set<std::string> flagged;
  for (const auto& f : result.flagged) flagged.insert(f.id);
  EXPECT_EQ(flagged, std::set<std::string>(fx.planted_ids.begin(), fx.planted_ids.end()));

  EXPECT_SAT_ERROR(seed_probe_from_runs(store, target.run_id, std::nullopt, std::nullopt), ErrorKind::parameter,
                   "seed");
  EXPECT_SAT_ERROR(seed_probe_from_runs(store, done.run_id, seeds.run_id, std::nullopt), ErrorKind::parameter,
                   "not an embed run");
  // Inputs edited after the run are detected.
  save_manifest(fx.seeds.manifest, tmp / "t.jsonl");
  EXPECT_SAT_ERROR(seed_probe_from_runs(store, target.run_id, seeds.run_id, std::nullopt), ErrorKind::validation,
                   "changed");
}

// ---------------------------------------------------------------------------
// HTTP service

namespace {

struct LiveService {
  Workspace ws;
  RunStore store{ws.runs};
  RunRecord run;
  std::unique_ptr<Service> service;
  std::thread thread;
  std::unique_ptr<httplib::Client> client;

  LiveService() {
    run = embed_run(store, ws.request());
    ServiceOptions opts;
    opts.port = 0;
    service = std::make_unique<Service>(ws.runs, opts);
    service->bind();
    thread = std::thread([this] { service->serve(); });
    client = std::make_unique<httplib::Client>("127.0.0.1", service->port());
    client->set_read_timeout(120, 0);
    for (int i = 0; i < 100 && !client->Get("/api/runs"); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }

  ~LiveService() {
    service->stop();
    thread.join();
  }

  std::string url(const std::string& suffix = "") const { return "/api/runs/" + run.run_id + suffix; }
};

}  // namespace

TEST(Service, ListsAndFetchesRuns) {
  LiveService s;
  auto res = s.client->Get("/api/runs");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto list = nlohmann::json::parse(res->body);
  ASSERT_EQ(list.size(), 1u);
  EXPECT_EQ(list[0].at("run_id"), s.run.run_id);
  EXPECT_EQ(list[0].at("stage_status").at("embed"), "done");

  res = s.client->Get(s.url());
  ASSERT_TRUE(res);
  EXPECT_EQ(nlohmann::json::parse(res->body), s.store.load(s.run.run_id).to_json());
  res = s.client->Get("/api/runs/0123456789abcdef");
  EXPECT_EQ(res->status, 404);
  res = s.client->Get("/api/runs/NOT-HEX");
  EXPECT_EQ(res->status, 404);
  EXPECT_EQ(nlohmann::json::parse(res->body).at("kind"), "lookup");
}

TEST(Service, EmbeddingIsBinary) {
  LiveService s;
  const auto res = s.client->Get(s.url("/embedding"));
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(res->get_header_value("Content-Type"), "application/octet-stream");
  const auto e = load_run_embedding(s.store, s.run);
  const auto m = load_run_manifest(s.store, s.run);
  std::size_t id_block = 0;
  for (const auto& entry : m.entries()) id_block += entry.id.size() + 1;
  EXPECT_EQ(res->body.size(), 8 * e.n() + id_block);
  EXPECT_EQ(res->get_header_value("Content-Length"), std::to_string(8 * e.n() + id_block));
  EXPECT_EQ(res->get_header_value("X-Point-Count"), std::to_string(e.n()));
  std::vector<float> coords(2 * e.n());
  std::memcpy(coords.data(), res->body.data(), 8 * e.n());
  EXPECT_TRUE(std::ranges::equal(coords, e.coords()));
  EXPECT_EQ(res->body.substr(8 * e.n(), 3), "x0\n");
}

TEST(Service, ClustersAndPoints) {
  LiveService s;
  auto res = s.client->Get(s.url("/clusters"));
  ASSERT_TRUE(res);
  const auto report = cluster_report_from_json(nlohmann::json::parse(res->body));
  EXPECT_EQ(report.labels, load_run_clusters(s.store, s.run).labels);
  const int cid = report.clusters.back().id;
  res = s.client->Get(s.url("/points?cluster=" + std::to_string(cid)));
  ASSERT_TRUE(res);
  const auto pts = nlohmann::json::parse(res->body);
  EXPECT_EQ(pts.size(), report.find(cid)->size);
  for (const auto& p : pts) EXPECT_EQ(p.at("cluster_id"), cid);
  res = s.client->Get(s.url("/points"));
  EXPECT_EQ(nlohmann::json::parse(res->body).size(), 330u);
  EXPECT_EQ(s.client->Get(s.url("/points?cluster=12345"))->status, 404);
  EXPECT_EQ(s.client->Get(s.url("/points?cluster=abc"))->status, 400);
}

TEST(Service, Thumbnails) {
  LiveService s;
  auto res = s.client->Get("/api/images/x1/thumb");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200) << res->body;
  EXPECT_EQ(res->get_header_value("Content-Type"), "image/jpeg");
  EXPECT_EQ(jpeg_size(res->body), std::make_pair(128, 85));
  res = s.client->Get("/api/images/x2/thumb?run=" + s.run.run_id);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(s.client->Get("/api/images/x5/thumb")->status, 404);    // file missing
  EXPECT_EQ(s.client->Get("/api/images/x9/thumb")->status, 404);    // no image path
  EXPECT_EQ(s.client->Get("/api/images/nope/thumb")->status, 404);  // unknown sample
}

TEST(Service, FlagRoundTripAndExport) {
  LiveService s;
  const auto report = load_run_clusters(s.store, s.run);
  const auto& sat = report.clusters[report.count(ClusterKind::main)];
  const nlohmann::json body{{"cluster_id", sat.id}, {"flag_type", "lateral-view"}};
  auto res = s.client->Post(s.url("/flags"), body.dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto flag = nlohmann::json::parse(res->body);
  EXPECT_EQ(flag.at("cluster_id"), sat.id);
  EXPECT_EQ(flag.at("flag_type"), "lateral-view");

  res = s.client->Get(s.url("/flags"));
  const auto flags = nlohmann::json::parse(res->body);
  ASSERT_EQ(flags.size(), 1u);
  EXPECT_EQ(flags[0].at("flag_id"), flag.at("flag_id"));

  res = s.client->Get(s.url("/export"));
  ASSERT_TRUE(res);
  std::istringstream lines(res->body);
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("flag_type"), "lateral-view");
    EXPECT_EQ(j.at("cluster_id"), sat.id);
    ++count;
  }
  EXPECT_EQ(count, sat.size);

  EXPECT_EQ(s.client->Post(s.url("/flags"), "{\"flag_type\": \"x\"}", "application/json")->status, 400);
  EXPECT_EQ(s.client->Post(s.url("/flags"), "not json", "application/json")->status, 400);
  EXPECT_EQ(s.client->Post(s.url("/flags"), nlohmann::json{{"cluster_id", 777}, {"flag_type", "x"}}.dump(),
                           "application/json")->status,
            404);

  const auto del = s.url("/flags/" + std::to_string(flag.at("flag_id").get<int>()));
  EXPECT_EQ(s.client->Delete(del)->status, 200);
  EXPECT_EQ(s.client->Delete(del)->status, 404);
  EXPECT_TRUE(s.client->Get(s.url("/export"))->body.empty());
}

TEST(Service, SeedProbeRunsInBackground) {
  LiveService s;
  const auto fx = fixtures::planted_mislabels(30, 0, 20, 8, 0.0, 9);
  save_features(fx.seeds.features, s.ws.data / "seeds.featmat");
  save_manifest(fx.seeds.manifest, s.ws.data / "seeds.jsonl");
  const nlohmann::json body{
      {"seeds", {{"features", (s.ws.data / "seeds.featmat").string()}, {"manifest", (s.ws.data / "seeds.jsonl").string()}}},
      {"seed_label", "chest"},
      {"n_epochs", 60}};
  auto res = s.client->Post(s.url("/seed-probe"), body.dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 202);
  const auto id = nlohmann::json::parse(res->body).at("run_id").get<std::string>();
  s.service->drain();
  const auto record = nlohmann::json::parse(s.client->Get("/api/runs/" + id)->body);
  EXPECT_EQ(record.at("stage_status").at("seed-probe"), "done");
  EXPECT_EQ(record.at("parent_run"), s.run.run_id);
  res = s.client->Get("/api/runs/" + id + "/probe");
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(nlohmann::json::parse(res->body).at("config").at("seed_label"), "chest");
  res = s.client->Get("/api/runs/" + id + "/embedding");
  EXPECT_EQ(res->get_header_value("X-Point-Count"), "350");
  // Identical request: the finished run is reused.
  EXPECT_EQ(s.client->Post(s.url("/seed-probe"), body.dump(), "application/json")->status, 200);
  EXPECT_EQ(s.client->Post(s.url("/seed-probe"), "{}", "application/json")->status, 400);
  const nlohmann::json bad{{"seeds", {{"features", "/no/such.featmat"}}}};
  EXPECT_EQ(s.client->Post(s.url("/seed-probe"), bad.dump(), "application/json")->status, 400);
}

TEST(Service, PortInUseIsAnIoError) {
  LiveService s;
  ServiceOptions opts;
  opts.port = s.service->port();
  Service second(s.ws.runs, opts);
  EXPECT_SAT_ERROR(second.bind(), ErrorKind::io, "port");
}

// ---------------------------------------------------------------------------
// Command line

TEST(Cli, ExitCodeClasses) {
  EXPECT_EQ(exit_code(ErrorKind::parameter), 2);
  EXPECT_EQ(exit_code(ErrorKind::format), 2);
  EXPECT_EQ(exit_code(ErrorKind::merge), 2);
  EXPECT_EQ(exit_code(ErrorKind::alignment), 2);
  EXPECT_EQ(exit_code(ErrorKind::numeric), 3);
  EXPECT_EQ(exit_code(ErrorKind::io), 4);
}

TEST(Cli, MissingFeatureFileNamesPath) {
  fixtures::TempDir tmp;
  const auto r = run_binary("embed --features " + (tmp / "absent.featmat").string(), tmp.path());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("absent.featmat"), std::string::npos) << r.err;
}

TEST(Cli, EmbedSettingsAndDeterminism) {
  Workspace ws;
  const auto base = "--runs-dir " + ws.runs.string() + " embed --features " + ws.features.string();
  auto r1 = run_binary(base + " --k 10 --min-dist 0.001 --epochs 300 --seed 42 --out " + (ws.tmp / "a.emb").string(),
                       ws.tmp.path());
  ASSERT_EQ(r1.code, 0) << r1.err;
  EXPECT_TRUE(fs::exists(ws.tmp / "a.emb"));
  EXPECT_NE(r1.out.find("satellite"), std::string::npos);
  auto r2 = run_binary("--runs-dir " + (ws.tmp / "other").string() + " embed --features " + ws.features.string() +
                           " --k 10 --min-dist 0.001 --epochs 300 --seed 42 --out " + (ws.tmp / "b.emb").string(),
                       ws.tmp.path());
  ASSERT_EQ(r2.code, 0) << r2.err;
  EXPECT_EQ(r1.out.substr(0, 68), r2.out.substr(0, 68));  // "run <64 hex>"
  EXPECT_EQ(read(ws.tmp / "a.emb"), read(ws.tmp / "b.emb"));

  auto r3 = run_binary(base + " --method umap --k 50 --min-dist 0.1 --epochs 200 --no-detect", ws.tmp.path());
  EXPECT_EQ(r3.code, 0) << r3.err;
  auto r4 = run_binary(base + " --method pca", ws.tmp.path());
  EXPECT_EQ(r4.code, 0) << r4.err;
  auto r5 = run_binary(base + " --method tsne --perplexity 20 --tsne-steps 100", ws.tmp.path());
  EXPECT_EQ(r5.code, 0) << r5.err;
  auto r6 = run_binary(base + " --method magic", ws.tmp.path());
  EXPECT_EQ(r6.code, 2);
  auto r7 = run_binary(base + " --k 1000", ws.tmp.path());
  EXPECT_EQ(r7.code, 2);
  EXPECT_NE(r7.err.find("knn"), std::string::npos) << r7.err;
}

TEST(Cli, DetectParameters) {
  Workspace ws;
  RunStore store(ws.runs);
  const auto run = embed_run(store, ws.request());
  const auto base = "--runs-dir " + ws.runs.string() + " detect --run " + run.run_id;
  auto ok = run_binary(base, ws.tmp.path());
  EXPECT_EQ(ok.code, 0) << ok.err;
  EXPECT_NE(ok.out.find("main"), std::string::npos);
  EXPECT_EQ(run_binary(base + " --min-pts 1", ws.tmp.path()).code, 2);
  EXPECT_EQ(run_binary(base + " --eps 0.0", ws.tmp.path()).code, 2);
  auto file = run_binary("detect --embedding " + store.artifact(run, artifact::embedding).string() + " --manifest " +
                             ws.manifest.string() + " --out " + (ws.tmp / "r.json").string(),
                         ws.tmp.path());
  EXPECT_EQ(file.code, 0) << file.err;
  EXPECT_EQ(cluster_report_from_json(nlohmann::json::parse(read(ws.tmp / "r.json"))).labels,
            load_run_clusters(store, run).labels);
  EXPECT_EQ(run_binary("--runs-dir " + ws.runs.string() + " detect --run 00aa", ws.tmp.path()).code, 2);
}

TEST(Cli, SeedProbe) {
  fixtures::TempDir tmp;
  const auto fx = fixtures::planted_mislabels(400, 8, 50, 16, 8.0, 31);
  save_features(fx.target.features, tmp / "t.featmat");
  save_manifest(fx.target.manifest, tmp / "t.jsonl");
  save_features(fx.seeds.features, tmp / "s.featmat");
  save_manifest(fx.seeds.manifest, tmp / "s.jsonl");
  const auto runs = "--runs-dir " + (tmp / "runs").string();
  auto r = run_binary(runs + " seed-probe --target " + (tmp / "t.featmat").string() + " --seeds " +
                          (tmp / "s.featmat").string() + " --json",
                      tmp.path());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  std::set<std::string> flagged;
  for (const auto& f : j.at("flagged")) flagged.insert(f.at("id").get<std::string>());
  EXPECT_EQ(flagged, std::set<std::string>(fx.planted_ids.begin(), fx.planted_ids.end()));

  // No planted points: exit 0 with an empty list.
  const auto clean = fixtures::planted_mislabels(200, 0, 30, 16, 8.0, 32);
  save_features(clean.target.features, tmp / "c.featmat");
  save_manifest(clean.target.manifest, tmp / "c.jsonl");
  r = run_binary(runs + " seed-probe --target " + (tmp / "c.featmat").string() + " --seeds " +
                     (tmp / "s.featmat").string(),
                 tmp.path());
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("\n0 flagged"), std::string::npos) << r.out;

  // Incompatible widths name both.
  const auto wide = fixtures::uniform_matrix(20, 1024, 1, "w");
  const auto narrow = fixtures::uniform_matrix(20, 512, 2, "n");
  save_features(wide, tmp / "w.featmat");
  save_manifest(fixtures::manifest(wide.ids(), "a"), tmp / "w.jsonl");
  save_features(narrow, tmp / "n.featmat");
  save_manifest(fixtures::manifest(narrow.ids(), "b"), tmp / "n.jsonl");
  r = run_binary(runs + " seed-probe --target " + (tmp / "w.featmat").string() + " --seeds " +
                     (tmp / "n.featmat").string(),
                 tmp.path());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("1024"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("512"), std::string::npos) << r.err;
}

TEST(Cli, ExtractInfoAndExport) {
  Workspace ws;
  auto r = run_binary("extract-info --features " + ws.features.string(), ws.tmp.path());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto info = nlohmann::json::parse(r.out);
  EXPECT_EQ(info.at("n_samples"), 330);
  EXPECT_EQ(info.at("n_dims"), 8);
  EXPECT_EQ(info.at("view_labels").at("L"), 30);
  EXPECT_EQ(info.at("with_image_path"), 6);

  RunStore store(ws.runs);
  const auto run = embed_run(store, ws.request());
  const auto report = load_run_clusters(store, run);
  const int sat = report.clusters[report.count(ClusterKind::main)].id;
  add_flag(store, run.run_id, sat, "lateral-view");
  const auto base = "--runs-dir " + ws.runs.string() + " export --run " + run.run_id;
  r = run_binary(base, ws.tmp.path());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, outliers_to_jsonl(export_flags(store, run.run_id)));
  r = run_binary(base + " --cluster " + std::to_string(sat) + " --flag-type artifact", ws.tmp.path());
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("\"artifact\""), std::string::npos);
  EXPECT_EQ(run_binary(base + " --out " + (ws.tmp / "no" / "such" / "dir.jsonl").string(), ws.tmp.path()).code, 4);
}

TEST(Cli, ServeStopsOnSignalAndRejectsBusyPort) {
  Workspace ws;
  int pipefd[2];
  ASSERT_EQ(pipe(pipefd), 0);
  const pid_t pid = fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    dup2(pipefd[1], STDOUT_FILENO);
    close(pipefd[0]);
    execl(SATELLITE_CLI, SATELLITE_CLI, "--runs-dir", ws.runs.c_str(), "serve", "--port", "0", nullptr);
    _exit(127);
  }
  close(pipefd[1]);
  std::string banner;
  char c;
  while (read(pipefd[0], &c, 1) == 1 && c != '\n') banner += c;
  std::smatch m;
  ASSERT_TRUE(std::regex_search(banner, m, std::regex(":(\\d+)$"))) << banner;
  const int port = std::stoi(m[1]);

  httplib::Client client("127.0.0.1", port);
  auto res = client.Get("/api/runs");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->body, "[]");

  auto busy = run_binary("--runs-dir " + ws.runs.string() + " serve --port " + std::to_string(port), ws.tmp.path());
  EXPECT_EQ(busy.code, 4) << busy.err;

  kill(pid, SIGTERM);
  int status = 0;
  waitpid(pid, &status, 0);
  close(pipefd[0]);
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0);
  EXPECT_EQ(run_binary("--runs-dir " + (ws.tmp / "absent").string() + " serve", ws.tmp.path()).code, 2);
}
