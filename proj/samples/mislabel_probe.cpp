// Seed probe: mixes reference points of class A into a set labeled B and
// lists the B points whose embedding neighborhoods are dominated by seeds.

#include <cstdio>
#include <random>

#include "satellite/satellite.hpp"

using namespace satellite;

namespace {

LabeledDataset make_set(std::size_t n_b, std::size_t n_a, const std::string& prefix, const std::string& source,
                        std::uint64_t seed) {
  const std::size_t d = 16;
  std::mt19937_64 gen(seed);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  std::vector<float> values;
  std::vector<ManifestEntry> entries;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n_b + n_a; ++i) {
    const bool from_a = i >= n_b;
    for (std::size_t j = 0; j < d; ++j) values.push_back(noise(gen) + (j == 0 && from_a ? 8.0f : 0.0f));
    ManifestEntry e;
    e.id = prefix + std::to_string(i);
    e.source = source;
    e.view_label = source == "reference" ? "A" : "B";
    ids.push_back(e.id);
    entries.push_back(e);
  }
  return {FeatureMatrix(ids.size(), d, std::move(values), ids), DatasetManifest(std::move(entries))};
}

}  // namespace

int main() {
  // The last five target rows come from class A but carry label B.
  const auto target = make_set(495, 5, "img", "target", 1);
  const auto seeds = make_set(0, 60, "ref", "reference", 2);
  const auto run = run_seed_probe(target, seeds, EmbedConfig{}, ProbeConfig{});
  std::printf("%zu flagged of %zu targets\n", run.result.flagged.size(), target.manifest.size());
  for (const auto& f : run.result.flagged) std::printf("  %s  seed fraction %.2f\n", f.id.c_str(), f.seed_vote_fraction);
}
