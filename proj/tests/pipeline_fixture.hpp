#pragma once

// On-disk workspaces for end-to-end pipeline runs.

#include <random>

#include "lnup/pipeline.hpp"
#include "support.hpp"

namespace testing_support {

struct Workspace {
  fs::path root;
  fs::path embeddings() const { return root / "embeddings.jsonl"; }
  fs::path images() const { return root / "images"; }
  fs::path output() const { return root / "out"; }
};

// Random corpus plus one smooth PGM per image. Noise is set so that roughly
// one lineup in six fails.
inline Workspace write_workspace(const fs::path& root, std::uint64_t seed, std::size_t n = 240,
                                 std::size_t identities = 40, std::size_t dim = 16, double noise = 0.6) {
  Workspace w{root};
  fs::create_directories(w.images());
  std::mt19937_64 rng(seed);
  const auto corpus = random_corpus(rng, n, dim, identities, noise);
  lnup::write_embeddings_jsonl(w.embeddings(), corpus);
  for (const auto& r : corpus.records()) lnup::write_pgm(w.images() / (r.image_id.str() + ".pgm"), smooth_image(rng, 32, 32));
  return w;
}

inline std::vector<std::pair<std::string, std::string>> workspace_overrides(const Workspace& w) {
  return {{"paths.embeddings", w.embeddings().string()},
          {"paths.images", w.images().string()},
          {"paths.output", w.output().string()},
          {"lineup.seed", "7"},
          {"ensemble.seed", "3"},
          {"ensemble.n_estimators", "10"},
          {"ensemble.max_iterations", "300"},
          {"split.seed", "5"}};
}

// evaluate -> features -> train -> predict. Returns the config used.
inline lnup::PipelineConfig run_through_predict(const Workspace& w,
                                                std::vector<std::pair<std::string, std::string>> extra = {}) {
  auto ov = workspace_overrides(w);
  ov.insert(ov.end(), extra.begin(), extra.end());
  const auto cfg = lnup::load_config(std::nullopt, ov);
  lnup::run_evaluate(cfg);
  lnup::run_features(cfg);
  lnup::run_train(cfg);
  lnup::run_predict(cfg);
  return cfg;
}

}  // namespace testing_support
