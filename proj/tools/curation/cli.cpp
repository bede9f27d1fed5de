#include "cli.hpp"

#include <atomic>
#include <csignal>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <thread>

#include <pthread.h>

#include <CLI11.hpp>

#include "operations.hpp"
#include "service.hpp"

namespace satellite::curation {

namespace fs = std::filesystem;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::numeric: return kExitNumeric;
    case ErrorKind::io: return kExitIo;
    default: return kExitInput;
  }
}

namespace {

struct UmapFlags {
  std::string method = "umap";
  EmbedConfig cfg;
  std::string metric = "euclidean";
  std::string init = "spectral";
  std::string knn = "auto";

  void add(CLI::App* app, bool with_alternatives) {
    auto& u = cfg.umap;
    if (with_alternatives) app->add_option("--method", method, "umap, pca or tsne")->capture_default_str();
    app->add_option("--k", u.k, "neighbors per point")->capture_default_str();
    app->add_option("--min-dist", u.min_dist, "minimum embedded distance")->capture_default_str();
    app->add_option("--spread", u.spread, "embedded scale")->capture_default_str();
    app->add_option("--epochs", u.n_epochs, "optimization epochs")->capture_default_str();
    app->add_option("--learning-rate", u.learning_rate)->capture_default_str();
    app->add_option("--neg-rate", u.negative_sample_rate, "negative samples per edge sample")->capture_default_str();
    app->add_option("--seed", u.rng_seed, "random seed")->capture_default_str();
    app->add_option("--metric", metric, "euclidean or cosine")->capture_default_str();
    app->add_option("--init", init, "spectral, random or pca")->capture_default_str();
    app->add_option("--knn", knn, "auto, exact or descent")->capture_default_str();
    app->add_option("--threads", u.threads, "1 = deterministic; 0 = all cores")->capture_default_str();
    if (with_alternatives) {
      auto& t = cfg.tsne;
      app->add_option("--perplexity", t.perplexity)->capture_default_str();
      app->add_option("--exaggeration", t.main_exaggeration, "t-SNE exaggeration after the early phase")
          ->capture_default_str();
      app->add_option("--early-exaggeration", t.early_exaggeration)->capture_default_str();
      app->add_option("--tsne-steps", t.main_steps, "t-SNE steps after the early phase")->capture_default_str();
    }
  }

  EmbedConfig resolve() {
    cfg.method = parse_method(method);
    cfg.umap.metric = parse_metric(metric);
    cfg.umap.init = parse_init(init);
    cfg.knn = parse_knn_mode(knn);
    cfg.tsne.rng_seed = cfg.umap.rng_seed;
    cfg.tsne.threads = cfg.umap.threads;
    return cfg;
  }
};

struct DetectFlags {
  std::optional<double> eps;
  DetectOptions opts;

  void add(CLI::App* app) {
    app->add_option("--eps", eps, "DBSCAN radius (default: knee of the k-distance curve)");
    app->add_option("--min-pts", opts.min_pts, "DBSCAN core size")->capture_default_str();
    app->add_option("--main-fraction", opts.main_fraction, "main clusters hold at least this share of points")
        ->capture_default_str();
    app->add_option("--attach-factor", opts.attach_factor, "merge clusters within this many eps of a main cluster")
        ->capture_default_str();
  }

  DetectOptions resolve() const {
    auto o = opts;
    o.eps = eps;
    require(o.min_pts >= 2, ErrorKind::parameter, "min_pts must be >= 2 (got " + std::to_string(o.min_pts) + ")");
    if (eps) require(*eps > 0.0, ErrorKind::parameter, "eps must be > 0");
    return o;
  }
};

std::string share(const std::optional<LabelShare>& s) {
  if (!s) return "-";
  std::ostringstream o;
  o << s->label << " (" << std::fixed << std::setprecision(2) << s->fraction << ")";
  return o.str();
}

void print_report(std::ostream& out, const ClusterReport& r) {
  out << "eps " << r.eps << ", min_pts " << r.min_pts << ", " << r.count(ClusterKind::main) << " main, "
      << r.count(ClusterKind::satellite) << " satellite, " << r.noise_count << " noise\n";
  out << std::left << std::setw(8) << "cluster" << std::setw(8) << "size" << std::setw(11) << "kind" << std::setw(28)
      << "dominant view" << std::setw(28) << "dominant patient"
      << "separation\n";
  for (const auto& c : r.clusters) {
    out << std::left << std::setw(8) << c.id << std::setw(8) << c.size << std::setw(11) << to_string(c.kind)
        << std::setw(28) << share(c.dominant_view) << std::setw(28) << share(c.dominant_patient);
    if (c.separation) out << *c.separation;
    else out << "-";
    out << '\n';
  }
}

nlohmann::json count_map(const std::map<std::string, std::size_t>& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

int cmd_extract_info(const fs::path& features, const std::optional<fs::path>& manifest, std::ostream& out) {
  DatasetRef ref{features, manifest};
  const auto data = ref.load();
  std::map<std::string, std::size_t> sources, views;
  std::set<std::string> patients;
  std::size_t seeds = 0, images = 0;
  for (const auto& e : data.manifest.entries()) {
    ++sources[e.source];
    if (e.view_label) ++views[*e.view_label];
    if (e.patient_id) patients.insert(*e.patient_id);
    seeds += e.is_seed ? 1 : 0;
    images += e.image_path ? 1 : 0;
  }
  const auto m = ref.resolved_manifest();
  const nlohmann::json info{{"features", fs::absolute(features).string()},
                            {"sha256", sha256_file(features)},
                            {"n_samples", data.features.n_samples()},
                            {"n_dims", data.features.n_dims()},
                            {"manifest", m ? nlohmann::json(fs::absolute(*m).string()) : nlohmann::json(nullptr)},
                            {"sources", count_map(sources)},
                            {"view_labels", count_map(views)},
                            {"distinct_patients", patients.size()},
                            {"seeds", seeds},
                            {"with_image_path", images}};
  out << info.dump(2) << '\n';
  return kExitOk;
}

int cmd_serve(const fs::path& runs_dir, const std::string& host, int port, std::ostream& out, std::ostream& err) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  sigset_t previous;
  pthread_sigmask(SIG_BLOCK, &set, &previous);

  ServiceOptions opts;
  opts.host = host;
  opts.port = port;
  {
    Service service(runs_dir, opts);
    try {
      service.bind();
    } catch (const Error& e) {
      err << "error: " << e.what() << '\n';
      pthread_sigmask(SIG_SETMASK, &previous, nullptr);
      return exit_code(e.kind());
    }
    out << "serving " << fs::absolute(runs_dir).string() << " on http://" << host << ":" << service.port() << std::endl;

    std::atomic<bool> done{false};
    std::thread watcher([&] {
      const timespec tick{0, 100'000'000};
      while (!done) {
        siginfo_t info;
        if (sigtimedwait(&set, &info, &tick) > 0) {
          out << "signal " << info.si_signo << ", shutting down" << std::endl;
          service.stop();
          return;
        }
      }
    });
    service.serve();
    done = true;
    watcher.join();
    service.stop();
  }
  pthread_sigmask(SIG_SETMASK, &previous, nullptr);
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Satellite-cluster discovery and curation for image-feature datasets", "satellite"};
  app.require_subcommand(1);
  std::string runs_dir = "runs";
  app.add_option("--runs-dir", runs_dir, "root of the run directories")->capture_default_str();

  // extract-info
  auto* info = app.add_subcommand("extract-info", "summarize a feature file and its manifest");
  std::string info_features;
  std::optional<std::string> info_manifest;
  info->add_option("--features", info_features, "feature matrix file")->required()->check(CLI::ExistingFile);
  info->add_option("--manifest", info_manifest, "JSON-lines manifest")->check(CLI::ExistingFile);

  // embed
  auto* embed = app.add_subcommand("embed", "project a feature file to 2-D and detect satellite clusters");
  std::string embed_features;
  std::optional<std::string> embed_manifest, embed_out;
  std::string embed_source = "unknown";
  bool no_detect = false;
  UmapFlags embed_flags;
  DetectFlags embed_detect;
  embed->add_option("--features", embed_features, "feature matrix file")->required()->check(CLI::ExistingFile);
  embed->add_option("--manifest", embed_manifest, "JSON-lines manifest")->check(CLI::ExistingFile);
  embed->add_option("--source", embed_source, "source tag for a synthesized manifest")->capture_default_str();
  embed->add_option("--out", embed_out, "also copy the embedding file here");
  embed->add_flag("--no-detect", no_detect, "skip satellite detection");
  embed_flags.add(embed, true);
  embed_detect.add(embed);

  // detect
  auto* detect = app.add_subcommand("detect", "density-cluster an embedding and classify satellites");
  std::optional<std::string> detect_run_id, detect_embedding, detect_manifest, detect_out;
  DetectFlags detect_flags;
  detect->add_option("--run", detect_run_id, "run id under --runs-dir");
  detect->add_option("--embedding", detect_embedding, "embedding file")->check(CLI::ExistingFile);
  detect->add_option("--manifest", detect_manifest, "manifest for --embedding")->check(CLI::ExistingFile);
  detect->add_option("--out", detect_out, "write the cluster report here");
  detect_flags.add(detect);

  // seed-probe
  auto* probe = app.add_subcommand("seed-probe", "merge seeds into a target set and flag seed-dominated points");
  std::string probe_target, probe_seeds;
  std::optional<std::string> probe_target_manifest, probe_seeds_manifest;
  ProbeConfig probe_cfg;
  UmapFlags probe_flags;
  bool probe_json = false;
  probe->add_option("--target", probe_target, "target feature file")->required()->check(CLI::ExistingFile);
  probe->add_option("--target-manifest", probe_target_manifest)->check(CLI::ExistingFile);
  probe->add_option("--seeds", probe_seeds, "seed feature file")->required()->check(CLI::ExistingFile);
  probe->add_option("--seeds-manifest", probe_seeds_manifest)->check(CLI::ExistingFile);
  probe->add_option("--seed-label", probe_cfg.seed_label)->capture_default_str();
  probe->add_option("--k-vote", probe_cfg.k_vote, "embedding neighbors that vote")->capture_default_str();
  probe->add_option("--threshold", probe_cfg.vote_threshold, "seed share needed to flag")->capture_default_str();
  probe->add_flag("--json", probe_json, "print the full result as JSON");
  probe_flags.add(probe, false);

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP API for the curation UI");
  int port = 8080;
  std::string host = "127.0.0.1";
  serve->add_option("--port", port)->capture_default_str()->check(CLI::Range(0, 65535));
  serve->add_option("--host", host)->capture_default_str();

  // export
  auto* exp = app.add_subcommand("export", "write the outlier manifest of a run as JSON lines");
  std::string export_run;
  std::optional<std::string> export_out, export_type;
  std::vector<int> export_clusters;
  exp->add_option("--run", export_run, "run id under --runs-dir")->required();
  exp->add_option("--out", export_out, "output file (default: stdout)");
  exp->add_option("--cluster", export_clusters, "export these clusters instead of the stored flags");
  exp->add_option("--flag-type", export_type, "flag type for --cluster");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }

  try {
    RunStore store(runs_dir);
    if (info->parsed()) {
      return cmd_extract_info(info_features, info_manifest ? std::optional<fs::path>(*info_manifest) : std::nullopt, out);
    }
    if (embed->parsed()) {
      EmbedRequest req;
      req.data = {embed_features, embed_manifest ? std::optional<fs::path>(*embed_manifest) : std::nullopt, embed_source};
      req.config = embed_flags.resolve();
      req.detect = embed_detect.resolve();
      req.detect_after = !no_detect;
      const auto run = embed_run(store, req);
      const auto emb = store.artifact(run, artifact::embedding);
      if (embed_out) {
        save_embedding(load_embedding(emb), *embed_out, req.config.sidecar());
      }
      out << "run " << run.run_id << '\n' << "embedding " << (embed_out ? fs::path(*embed_out) : emb).string() << '\n';
      if (req.detect_after) print_report(out, load_run_clusters(store, run));
      return kExitOk;
    }
    if (detect->parsed()) {
      const auto opts = detect_flags.resolve();
      require(detect_run_id.has_value() != detect_embedding.has_value(), ErrorKind::parameter,
              "give exactly one of --run or --embedding");
      ClusterReport report;
      if (detect_run_id) {
        report = detect_run(store, *detect_run_id, opts);
      } else {
        const auto e = load_embedding(*detect_embedding);
        const auto m = detect_manifest ? load_manifest(*detect_manifest) : DatasetManifest::from_ids([&] {
          std::vector<std::string> ids(e.n());
          for (std::size_t i = 0; i < e.n(); ++i) ids[i] = std::to_string(i);
          return ids;
        }(), "unknown");
        report = detect_satellites(e, m, opts);
      }
      if (detect_out) io::write_file_atomic(*detect_out, to_json(report).dump() + "\n");
      print_report(out, report);
      return kExitOk;
    }
    if (probe->parsed()) {
      SeedProbeRequest req;
      req.target = {probe_target,
                    probe_target_manifest ? std::optional<fs::path>(*probe_target_manifest) : std::nullopt, "target"};
      req.seeds = {probe_seeds, probe_seeds_manifest ? std::optional<fs::path>(*probe_seeds_manifest) : std::nullopt,
                   "seeds"};
      req.config = probe_flags.resolve();
      req.probe = probe_cfg;
      auto planned = plan_seed_probe(store, req);
      const auto run = planned.finished() ? planned : seed_probe_run(store, req, planned);
      const auto result = seed_probe_result_from_json(nlohmann::json::parse(io::read_file(store.artifact(run, artifact::probe))));
      if (probe_json) {
        auto j = to_json(result);
        j["run_id"] = run.run_id;
        out << j.dump(2) << '\n';
      } else {
        out << "run " << run.run_id << '\n' << result.flagged.size() << " flagged\n";
        for (const auto& f : result.flagged) {
          out << f.id << '\t' << std::fixed << std::setprecision(3) << f.seed_vote_fraction << '\t' << f.cluster_id
              << '\n';
        }
      }
      return kExitOk;
    }
    if (serve->parsed()) {
      if (!fs::is_directory(runs_dir)) {
        err << "error: run directory not found: " << runs_dir << '\n';
        return kExitInput;
      }
      return cmd_serve(runs_dir, host, port, out, err);
    }
    if (exp->parsed()) {
      std::vector<OutlierEntry> entries;
      if (!export_clusters.empty()) {
        require(export_type.has_value(), ErrorKind::parameter, "--cluster needs --flag-type");
        const auto run = store.load(export_run);
        entries = outlier_manifest(load_run_clusters(store, run), load_run_manifest(store, run), export_clusters,
                                   *export_type);
      } else {
        entries = export_flags(store, export_run);
      }
      const auto text = outliers_to_jsonl(entries);
      if (export_out) io::write_file_atomic(*export_out, text);
      else out << text;
      return kExitOk;
    }
  } catch (const StageError& e) {
    err << "error [" << e.stage() << "]: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }
  return kExitInput;
}

}  // namespace satellite::curation
