#pragma once

// Latent-space reshaping with a Gaussian mixture: cluster prior draws with
// K-means, count each cluster's samples that land near the dense modes, and
// resample from a mixture that weights cluster k by 1 / (count_k + 1).

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "bbgc/embedding.hpp"
#include "bbgc/sample.hpp"
#include "bbgc/source.hpp"

namespace bbgc {

struct KMeansOptions {
  std::size_t max_iters = 100;
  double tol = 1e-6;  // stop when the relative inertia improvement falls below this
  bool reseed_empty = true;
};

struct ClusterAssignment {
  std::vector<std::size_t> labels;  // 0-based
  double inertia = 0.0;
};

struct KMeansResult {
  RowMatrix<double> means;
  ClusterAssignment assignment;
  std::size_t iterations = 0;
};

RowMatrix<double> latent_matrix(std::span<const LatentCode> latents);

// k-means++ seeding, then Lloyd iterations. Throws KTooLarge if K > n,
// EmptyCluster if a cluster empties with reseeding disabled.
KMeansResult kmeans_fit(const RowMatrix<double>& points, std::size_t k, std::uint64_t seed,
                        const KMeansOptions& options = {});

struct ClusterWeights {
  std::vector<std::size_t> raw_counts;
  std::vector<double> weights;  // normalized 1 / (raw + 1)
};

// Throws EmptyDenseModeList if dense_modes is empty.
ClusterWeights compute_cluster_weights(std::span<const std::size_t> labels, std::size_t k,
                                       const EmbeddingMatrix& embeddings, std::span<const EmbeddingVector> dense_modes,
                                       double r0);

// Normalizes 1 / (raw + 1).
std::vector<double> weights_from_counts(std::span<const std::size_t> raw_counts);

struct CovarianceEstimate {
  std::vector<double> variances;
  bool floored = false;  // some dimension was below 1e-12 and was raised to it
};

// Pooled within-cluster per-dimension variance, denominator n - K.
CovarianceEstimate estimate_covariance(const RowMatrix<double>& points, const ClusterAssignment& assignment,
                                       const RowMatrix<double>& means);

struct MixtureModel {
  RowMatrix<double> means;
  std::vector<double> variances;
  std::vector<double> weights;
  std::uint64_t source_seed = 0;

  std::size_t k() const noexcept { return means.rows(); }
  std::size_t latent_dim() const noexcept { return means.cols(); }

  // Throws InvalidConfig on a broken invariant.
  void validate() const;

  // Standard-normal prior as a one-component mixture.
  static MixtureModel identity(std::size_t latent_dim);

  nlohmann::ordered_json to_json() const;
  static MixtureModel from_json(const nlohmann::json& j);
};

// Draw i: a component by weight, then N(mu_k, diag(variances)), all from
// the counter stream (seed, first_index + i).
std::vector<LatentCode> sample_calibrated(const MixtureModel& model, std::size_t n, std::uint64_t seed,
                                          std::uint64_t first_index = 0,
                                          std::vector<std::size_t>* components = nullptr);

struct GmmOptions {
  std::size_t k = 64;
  double r0 = 0.25;
  std::size_t n_fit = 100000;
  std::uint64_t seed = 0;
  KMeansOptions kmeans;
};

struct GmmFit {
  MixtureModel model;
  ClusterWeights weights;
  bool covariance_floored = false;
  std::size_t kmeans_iterations = 0;
};

// Fits on n_fit fresh prior draws sent through the generator.
GmmFit calibrate_gmm(Generator& generator, std::size_t latent_dim, std::span<const EmbeddingVector> dense_modes,
                     const GmmOptions& options);

}  // namespace bbgc
