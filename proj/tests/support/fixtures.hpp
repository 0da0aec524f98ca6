#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "bbgc/embedding.hpp"
#include "bbgc/sample.hpp"
#include "bbgc/store.hpp"
#include "oracles.hpp"

namespace fixture {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("bbgc-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

// Sample with a random f32-representable latent and a random unit embedding.
inline bbgc::Sample random_sample(std::mt19937_64& rng, std::size_t latent_dim, std::size_t embed_dim) {
  std::normal_distribution<double> g;
  std::vector<double> z(latent_dim);
  for (double& x : z) x = static_cast<float>(g(rng));
  bbgc::Sample s;
  s.latent = bbgc::LatentCode(std::move(z));
  s.embedding = bbgc::normalize(oracle::random_unit(rng, embed_dim));
  return s;
}

// Collection whose embeddings cluster around a few random centres, so that
// neighbour counts and similarities are non-trivial.
inline bbgc::Collection clustered_collection(std::uint64_t seed, std::size_t n, std::size_t embed_dim,
                                             std::size_t centres = 4, double spread = 0.15) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<double>> c;
  for (std::size_t i = 0; i < centres; ++i) c.push_back(oracle::random_unit(rng, embed_dim));
  std::uniform_int_distribution<std::size_t> pick(0, centres - 1);
  std::uniform_real_distribution<double> dist(0.0, spread);
  std::normal_distribution<double> g;
  std::vector<bbgc::Sample> samples;
  for (std::size_t i = 0; i < n; ++i) {
    bbgc::Sample s;
    s.latent = bbgc::LatentCode({static_cast<float>(g(rng)), static_cast<float>(g(rng))});
    const auto e = oracle::at_distance(c[pick(rng)], dist(rng), rng);
    std::vector<double> rounded(e.begin(), e.end());
    s.embedding = bbgc::normalize(rounded);
    samples.push_back(std::move(s));
  }
  return bbgc::Collection::from_samples(samples);
}

inline std::vector<std::vector<double>> rows_of(const bbgc::EmbeddingMatrix& m) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < m.rows(); ++i) out.push_back(to_vec(m.row(i)));
  return out;
}

}  // namespace fixture
