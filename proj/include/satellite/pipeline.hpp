#pragma once

// Feature matrix -> 2-D embedding, for any of the three methods.

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "satellite/embedding.hpp"
#include "satellite/error.hpp"
#include "satellite/feature_store.hpp"
#include "satellite/fuzzy_topology.hpp"
#include "satellite/hash.hpp"
#include "satellite/layout_alt.hpp"
#include "satellite/layout_umap.hpp"
#include "satellite/neighbor_graph.hpp"

namespace satellite {

enum class EmbedMethod { umap, pca, tsne };

inline EmbedMethod parse_method(std::string_view s) {
  if (s == "umap") return EmbedMethod::umap;
  if (s == "pca") return EmbedMethod::pca;
  if (s == "tsne") return EmbedMethod::tsne;
  fail(ErrorKind::parameter, "unknown method \"" + std::string(s) + "\"");
}

constexpr std::string_view to_string(EmbedMethod m) {
  switch (m) {
    case EmbedMethod::umap: return "umap";
    case EmbedMethod::pca: return "pca";
    case EmbedMethod::tsne: return "tsne";
  }
  return "?";
}

enum class KnnMode { automatic, exact, descent };

inline KnnMode parse_knn_mode(std::string_view s) {
  if (s == "auto") return KnnMode::automatic;
  if (s == "exact") return KnnMode::exact;
  if (s == "descent") return KnnMode::descent;
  fail(ErrorKind::parameter, "unknown knn mode \"" + std::string(s) + "\"");
}

constexpr std::string_view to_string(KnnMode m) {
  switch (m) {
    case KnnMode::automatic: return "auto";
    case KnnMode::exact: return "exact";
    case KnnMode::descent: return "descent";
  }
  return "?";
}

struct EmbedConfig {
  EmbedMethod method = EmbedMethod::umap;
  UmapConfig umap;
  TsneConfig tsne;
  KnnMode knn = KnnMode::automatic;
  /// Largest n for which automatic mode uses brute-force kNN.
  std::size_t exact_knn_limit = 20000;
  NnDescentOptions descent;

  nlohmann::json to_json() const {
    nlohmann::json j;
    switch (method) {
      case EmbedMethod::umap:
        j = umap.to_json();
        j["knn"] = std::string(to_string(knn));
        break;
      case EmbedMethod::tsne: j = tsne.to_json(); break;
      case EmbedMethod::pca: j = {{"method", "pca"}, {"dims", 2}}; break;
    }
    return j;
  }

  /// The sidecar fields written next to every embedding file.
  nlohmann::json sidecar() const {
    nlohmann::json j{{"method", std::string(to_string(method))}};
    if (method == EmbedMethod::umap) {
      j["k"] = umap.k;
      j["min_dist"] = umap.min_dist;
      j["n_epochs"] = umap.n_epochs;
      j["rng_seed"] = umap.rng_seed;
    } else if (method == EmbedMethod::tsne) {
      j["perplexity"] = tsne.perplexity;
      j["main_exaggeration"] = tsne.main_exaggeration;
      j["rng_seed"] = tsne.rng_seed;
    }
    j["config"] = to_json();
    return j;
  }
};

/// Inverse of EmbedConfig::to_json; missing keys keep their defaults.
inline EmbedConfig embed_config_from_json(const nlohmann::json& j) {
  EmbedConfig cfg;
  try {
    cfg.method = parse_method(j.value("method", "umap"));
    auto& u = cfg.umap;
    u.k = j.value("k", u.k);
    u.metric = parse_metric(j.value("metric", std::string(to_string(u.metric))));
    u.min_dist = j.value("min_dist", u.min_dist);
    u.spread = j.value("spread", u.spread);
    u.n_epochs = j.value("n_epochs", u.n_epochs);
    u.learning_rate = j.value("learning_rate", u.learning_rate);
    u.negative_sample_rate = j.value("negative_sample_rate", u.negative_sample_rate);
    u.init = parse_init(j.value("init", std::string(to_string(u.init))));
    u.rng_seed = j.value("rng_seed", u.rng_seed);
    u.gradient_clip = j.value("gradient_clip", u.gradient_clip);
    u.repulsion_floor = j.value("repulsion_floor", u.repulsion_floor);
    u.threads = j.value("deterministic", true) ? 1 : 0;
    cfg.knn = parse_knn_mode(j.value("knn", std::string(to_string(cfg.knn))));
    auto& t = cfg.tsne;
    t.perplexity = j.value("perplexity", t.perplexity);
    t.early_exaggeration = j.value("early_exaggeration", t.early_exaggeration);
    t.early_steps = j.value("early_steps", t.early_steps);
    t.main_exaggeration = j.value("main_exaggeration", t.main_exaggeration);
    t.main_steps = j.value("main_steps", t.main_steps);
    if (cfg.method == EmbedMethod::tsne) t.learning_rate = j.value("learning_rate", t.learning_rate);
    t.rng_seed = j.value("rng_seed", t.rng_seed);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("malformed embed config: ") + e.what());
  }
  return cfg;
}

struct EmbedResult {
  Embedding embedding;
  std::optional<NeighborGraph> graph;
  std::optional<CurveFit> curve;
  std::size_t components = 0;
  std::size_t clamped_rows = 0;
};

/// Runs `fn`, re-throwing any library error tagged with the stage name.
template <typename Fn>
auto run_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(stage, e);
  }
}

/// knn -> fuzzy topology -> layout for UMAP; direct projection for PCA and
/// t-SNE.
inline EmbedResult embed_features(const FeatureMatrix& features, const EmbedConfig& cfg) {
  EmbedResult out;
  if (cfg.method == EmbedMethod::pca) {
    out.embedding = run_stage("pca", [&] { return pca_project(features); });
    return out;
  }
  if (cfg.method == EmbedMethod::tsne) {
    out.embedding = run_stage("tsne", [&] { return tsne_embed(features, cfg.tsne); });
    return out;
  }

  const auto& u = cfg.umap;
  run_stage("config", [&] { u.validate(); });
  out.graph = run_stage("knn", [&] {
    const bool exact = cfg.knn == KnnMode::exact ||
                       (cfg.knn == KnnMode::automatic && features.n_samples() <= cfg.exact_knn_limit);
    if (exact) return knn_exact(features, u.k, u.metric, u.threads);
    auto opts = cfg.descent;
    opts.threads = u.threads;
    return knn_descent(features, u.k, u.metric, u.rng_seed, opts);
  });
  Calibration calibration;
  const auto fuzzy = run_stage("fuzzy", [&] {
    SmoothKnnOptions opts;
    opts.threads = u.threads;
    return build_fuzzy_graph(*out.graph, opts, &calibration);
  });
  out.clamped_rows = calibration.clamped_count();
  out.components = component_count(connected_components(fuzzy));
  out.embedding = run_stage("layout", [&] {
    const auto fit = fit_ab(u.min_dist, u.spread);
    out.curve = fit;
    const auto init = init_embedding(fuzzy, u, &features);
    return optimize_layout(fuzzy, init, u, fit.a, fit.b);
  });
  return out;
}

}  // namespace satellite
