#pragma once

// Shared fixtures: scratch directories, random corpora and images.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lnup/corpus.hpp"
#include "lnup/image.hpp"

namespace testing_support {

namespace fs = std::filesystem;

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("lnup_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

inline std::string id_of(const char* prefix, std::size_t i, int width = 5) {
  std::string s = std::to_string(i);
  return prefix + std::string(width > static_cast<int>(s.size()) ? width - s.size() : 0, '0') + s;
}

// n images spread round-robin over `identities` identities. Each identity has
// a random center; images are center + noise * gaussian.
inline std::vector<lnup::EmbeddingRecord> random_records(std::mt19937_64& rng, std::size_t n, std::size_t dim,
                                                         std::size_t identities, double noise = 0.5) {
  std::normal_distribution<float> g(0.f, 1.f);
  std::vector<std::vector<float>> centers(identities, std::vector<float>(dim));
  for (auto& c : centers)
    for (auto& x : c) x = g(rng);
  std::vector<lnup::EmbeddingRecord> recs;
  for (std::size_t i = 0; i < n; ++i) {
    lnup::EmbeddingRecord r{lnup::ImageId(id_of("img", i)), id_of("id", i % identities, 4), std::vector<float>(dim)};
    for (std::size_t k = 0; k < dim; ++k) r.vector[k] = centers[i % identities][k] + static_cast<float>(noise) * g(rng);
    recs.push_back(std::move(r));
  }
  return recs;
}

inline lnup::CorpusHandle random_corpus(std::mt19937_64& rng, std::size_t n, std::size_t dim,
                                        std::size_t identities, double noise = 0.5) {
  return lnup::CorpusHandle::from_records(random_records(rng, n, dim, identities, noise), {"random"}, dim);
}

inline lnup::ImageGray random_image(std::mt19937_64& rng, int w, int h) {
  std::uniform_int_distribution<int> u(0, 255);
  std::vector<std::uint8_t> px(static_cast<std::size_t>(w) * h);
  for (auto& p : px) p = static_cast<std::uint8_t>(u(rng));
  return lnup::ImageGray(w, h, std::move(px));
}

// Smooth random image: a few gradients plus mild noise, so Canny finds
// structure rather than speckle everywhere.
inline lnup::ImageGray smooth_image(std::mt19937_64& rng, int w, int h) {
  std::uniform_real_distribution<double> u(-1, 1);
  const double a = 80 * u(rng), b = 80 * u(rng), c = 128 + 40 * u(rng), f = 0.3 + 0.2 * u(rng);
  std::vector<std::uint8_t> px(static_cast<std::size_t>(w) * h);
  for (int r = 0; r < h; ++r)
    for (int k = 0; k < w; ++k) {
      double v = c + a * std::sin(f * k) + b * std::cos(0.7 * f * r) + 10 * u(rng);
      if ((r / 8 + k / 8) % 2) v += 60;
      px[static_cast<std::size_t>(r) * w + k] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  return lnup::ImageGray(w, h, std::move(px));
}

}  // namespace testing_support
