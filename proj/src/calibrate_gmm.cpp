#include "bbgc/calibrate_gmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "bbgc/parallel.hpp"
#include "bbgc/rng.hpp"

namespace bbgc {

namespace {

constexpr double kVarianceFloor = 1e-12;

double squared_distance(std::span<const double> a, std::span<const double> b) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Nearest mean for every point; writes labels and squared distances.
void assign(const RowMatrix<double>& points, const RowMatrix<double>& means, std::vector<std::size_t>& labels,
            std::vector<double>& dist) {
  parallel_for(
      points.rows(),
      [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
          std::size_t best = 0;
          double best_d = std::numeric_limits<double>::infinity();
          for (std::size_t k = 0; k < means.rows(); ++k) {
            const double d = squared_distance(points.row(i), means.row(k));
            if (d < best_d) {
              best_d = d;
              best = k;
            }
          }
          labels[i] = best;
          dist[i] = best_d;
        }
      },
      512);
}

double total(std::span<const double> values) {
  CompensatedSum s;
  for (double v : values) s.add(v);
  return s.value();
}

RowMatrix<double> kmeanspp(const RowMatrix<double>& points, std::size_t k, std::uint64_t seed) {
  const std::size_t n = points.rows();
  CounterRng rng(derive_seed(seed, "kmeans++"));
  RowMatrix<double> means(points.cols());
  means.reserve_rows(k);
  std::vector<char> chosen(n, 0);
  std::size_t first = static_cast<std::size_t>(rng.uniform() * static_cast<double>(n));
  first = std::min(first, n - 1);
  means.append_row(points.row(first));
  chosen[first] = 1;
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(points.row(i), points.row(first));
  while (means.rows() < k) {
    const double sum = total(d2);
    std::size_t pick = n;
    if (sum > 0.0) {
      const double target = rng.uniform() * sum;
      double running = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        running += d2[i];
        if (d2[i] > 0.0 && running > target) {
          pick = i;
          break;
        }
      }
      if (pick == n) {
        // Rounding left the target past the last positive weight.
        for (std::size_t i = n; i-- > 0;) {
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
        }
      }
    } else {
      // Every remaining point duplicates a chosen centre.
      for (std::size_t i = 0; i < n; ++i) {
        if (!chosen[i]) {
          pick = i;
          break;
        }
      }
    }
    chosen[pick] = 1;
    means.append_row(points.row(pick));
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(points.row(i), points.row(pick)));
  }
  return means;
}

}  // namespace

RowMatrix<double> latent_matrix(std::span<const LatentCode> latents) {
  if (latents.empty()) return RowMatrix<double>{};
  RowMatrix<double> m(latents.front().dim());
  m.reserve_rows(latents.size());
  for (const auto& z : latents) m.append_row(z.values());
  return m;
}

KMeansResult kmeans_fit(const RowMatrix<double>& points, std::size_t k, std::uint64_t seed,
                        const KMeansOptions& options) {
  const std::size_t n = points.rows();
  if (k < 1) throw Error(ErrorKind::InvalidConfig, "K must be at least 1");
  if (k > n) {
    throw Error(ErrorKind::KTooLarge, "K = " + std::to_string(k) + " exceeds the " + std::to_string(n) + " points");
  }
  for (std::size_t i = 0; i < n * points.cols(); ++i) {
    if (!std::isfinite(points.data()[i])) throw Error(ErrorKind::NonFinite, "k-means input is not finite");
  }
  const std::size_t dim = points.cols();

  KMeansResult result;
  result.means = kmeanspp(points, k, seed);
  std::vector<std::size_t>& labels = result.assignment.labels;
  labels.assign(n, 0);
  std::vector<double> dist(n);
  double previous = std::numeric_limits<double>::infinity();

  for (std::size_t iter = 0;; ++iter) {
    assign(points, result.means, labels, dist);
    const double inertia = total(dist);
    result.assignment.inertia = inertia;
    result.iterations = iter + 1;
    const bool converged = inertia == 0.0 || (std::isfinite(previous) && (previous - inertia) <= options.tol * previous);
    if (converged || iter + 1 >= options.max_iters) break;
    previous = inertia;

    // Centroid update in index order with compensated sums.
    std::vector<CompensatedSum> sums(k * dim);
    std::vector<std::size_t> sizes(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = points.row(i);
      ++sizes[labels[i]];
      for (std::size_t d = 0; d < dim; ++d) sums[labels[i] * dim + d].add(row[d]);
    }
    std::vector<char> taken(n, 0);
    for (std::size_t c = 0; c < k; ++c) {
      auto mean = result.means.row(c);
      if (sizes[c] > 0) {
        for (std::size_t d = 0; d < dim; ++d) mean[d] = sums[c * dim + d].value() / static_cast<double>(sizes[c]);
        continue;
      }
      if (!options.reseed_empty) {
        throw Error(ErrorKind::EmptyCluster, "cluster " + std::to_string(c) + " has no points");
      }
      // Re-seed from the point farthest from its centre.
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (!taken[i] && dist[i] > far_d) {
          far_d = dist[i];
          far = i;
        }
      }
      taken[far] = 1;
      dist[far] = 0.0;
      std::copy(points.row(far).begin(), points.row(far).end(), mean.begin());
    }
  }
  return result;
}

std::vector<double> weights_from_counts(std::span<const std::size_t> raw_counts) {
  std::vector<double> w(raw_counts.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    w[k] = 1.0 / (static_cast<double>(raw_counts[k]) + 1.0);
    sum += w[k];
  }
  for (double& v : w) v /= sum;
  return w;
}

ClusterWeights compute_cluster_weights(std::span<const std::size_t> labels, std::size_t k,
                                       const EmbeddingMatrix& embeddings, std::span<const EmbeddingVector> dense_modes,
                                       double r0) {
  if (dense_modes.empty()) throw Error(ErrorKind::EmptyDenseModeList, "no dense modes to calibrate against");
  if (labels.size() != embeddings.rows()) {
    throw Error(ErrorKind::DimensionMismatch, "labels and samples differ in length");
  }
  for (std::size_t label : labels) {
    if (label >= k) throw Error(ErrorKind::InvalidConfig, "cluster label out of range");
  }
  std::vector<std::size_t> per_sample(labels.size(), 0);
  for (const auto& mode : dense_modes) {
    if (mode.dim() != embeddings.cols()) throw Error(ErrorKind::DimensionMismatch, "dense mode dimension mismatch");
  }
  parallel_for(
      labels.size(),
      [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
          for (const auto& mode : dense_modes) {
            if (distance_from_dot(dot(mode.values(), embeddings.row(i))) <= r0) ++per_sample[i];
          }
        }
      },
      1024);
  ClusterWeights out;
  out.raw_counts.assign(k, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) out.raw_counts[labels[i]] += per_sample[i];
  out.weights = weights_from_counts(out.raw_counts);
  return out;
}

CovarianceEstimate estimate_covariance(const RowMatrix<double>& points, const ClusterAssignment& assignment,
                                       const RowMatrix<double>& means) {
  const std::size_t n = points.rows();
  const std::size_t k = means.rows();
  if (n <= k) {
    throw Error(ErrorKind::InvalidConfig, "covariance needs more points (" + std::to_string(n) + ") than clusters (" +
                                              std::to_string(k) + ")");
  }
  const std::size_t dim = points.cols();
  std::vector<CompensatedSum> sums(dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = points.row(i);
    const auto mean = means.row(assignment.labels[i]);
    for (std::size_t d = 0; d < dim; ++d) {
      const double diff = row[d] - mean[d];
      sums[d].add(diff * diff);
    }
  }
  CovarianceEstimate out;
  out.variances.resize(dim);
  for (std::size_t d = 0; d < dim; ++d) {
    out.variances[d] = sums[d].value() / static_cast<double>(n - k);
    if (!(out.variances[d] >= kVarianceFloor)) {
      out.variances[d] = kVarianceFloor;
      out.floored = true;
    }
  }
  return out;
}

void MixtureModel::validate() const {
  if (k() < 1) throw Error(ErrorKind::InvalidConfig, "mixture has no components");
  if (weights.size() != k()) throw Error(ErrorKind::InvalidConfig, "mixture weights and means differ in count");
  if (variances.size() != latent_dim()) throw Error(ErrorKind::InvalidConfig, "variance vector has wrong length");
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw Error(ErrorKind::InvalidConfig, "mixture weight is negative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw Error(ErrorKind::InvalidConfig, "mixture weights do not sum to 1");
  for (double v : variances) {
    if (!(v > 0.0) || !std::isfinite(v)) throw Error(ErrorKind::InvalidConfig, "variance must be positive");
  }
  for (std::size_t i = 0; i < k() * latent_dim(); ++i) {
    if (!std::isfinite(means.data()[i])) throw Error(ErrorKind::InvalidConfig, "mixture mean is not finite");
  }
}

MixtureModel MixtureModel::identity(std::size_t latent_dim) {
  MixtureModel m;
  m.means = RowMatrix<double>(1, latent_dim);
  m.variances.assign(latent_dim, 1.0);
  m.weights = {1.0};
  return m;
}

nlohmann::ordered_json MixtureModel::to_json() const {
  nlohmann::ordered_json j;
  j["type"] = "gmm";
  j["k"] = k();
  j["latent_dim"] = latent_dim();
  j["seed"] = source_seed;
  j["weights"] = weights;
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < k(); ++c) rows.push_back(std::vector<double>(means.row(c).begin(), means.row(c).end()));
  j["means"] = std::move(rows);
  j["variances"] = variances;
  return j;
}

MixtureModel MixtureModel::from_json(const nlohmann::json& j) {
  MixtureModel m;
  try {
    if (j.at("type").get<std::string>() != "gmm") throw Error(ErrorKind::InvalidConfig, "model is not a gmm");
    const auto k = j.at("k").get<std::size_t>();
    const auto dim = j.at("latent_dim").get<std::size_t>();
    m.source_seed = j.value("seed", std::uint64_t{0});
    m.weights = j.at("weights").get<std::vector<double>>();
    m.variances = j.at("variances").get<std::vector<double>>();
    m.means = RowMatrix<double>(dim);
    for (const auto& row : j.at("means")) m.means.append_row(std::span<const double>(row.get<std::vector<double>>()));
    if (m.k() != k) throw Error(ErrorKind::InvalidConfig, "mixture k does not match its means");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("mixture model: ") + e.what());
  }
  m.validate();
  return m;
}

std::vector<LatentCode> sample_calibrated(const MixtureModel& model, std::size_t n, std::uint64_t seed,
                                          std::uint64_t first_index, std::vector<std::size_t>* components) {
  model.validate();
  std::vector<double> cumulative(model.k());
  double running = 0.0;
  for (std::size_t c = 0; c < model.k(); ++c) {
    running += model.weights[c];
    cumulative[c] = running;
  }
  std::vector<double> sd(model.latent_dim());
  for (std::size_t d = 0; d < sd.size(); ++d) sd[d] = std::sqrt(model.variances[d]);

  std::vector<LatentCode> out(n);
  if (components) components->assign(n, 0);
  parallel_for(
      n,
      [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
          CounterRng rng(seed, first_index + i);
          const double u = rng.uniform() * running;
          std::size_t c = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) -
                                                   cumulative.begin());
          c = std::min(c, model.k() - 1);
          // Skip zero-weight components that share a cumulative value.
          while (model.weights[c] == 0.0 && c + 1 < model.k()) ++c;
          std::vector<double> z(model.latent_dim());
          const auto mu = model.means.row(c);
          for (std::size_t d = 0; d < z.size(); ++d) {
            z[d] = static_cast<double>(static_cast<float>(mu[d] + sd[d] * rng.normal()));
          }
          out[i] = LatentCode(std::move(z));
          if (components) (*components)[i] = c;
        }
      },
      1024);
  return out;
}

GmmFit calibrate_gmm(Generator& generator, std::size_t latent_dim, std::span<const EmbeddingVector> dense_modes,
                     const GmmOptions& options) {
  if (dense_modes.empty()) throw Error(ErrorKind::EmptyDenseModeList, "no dense modes to calibrate against");
  if (options.n_fit <= options.k) {
    throw Error(ErrorKind::KTooLarge, "n_fit must exceed K (" + std::to_string(options.k) + ")");
  }
  const auto latents = sample_latents(options.n_fit, latent_dim, derive_seed(options.seed, "gmm-fit"));
  const auto samples = generator.generate(latents);
  EmbeddingMatrix embeddings(samples.empty() ? 0 : samples.front().embedding.dim());
  embeddings.reserve_rows(samples.size());
  for (const auto& s : samples) embeddings.append_row(s.embedding.values());

  const RowMatrix<double> points = latent_matrix(latents);
  KMeansResult km = kmeans_fit(points, options.k, derive_seed(options.seed, "gmm-kmeans"), options.kmeans);
  GmmFit fit;
  fit.weights = compute_cluster_weights(km.assignment.labels, options.k, embeddings, dense_modes, options.r0);
  const CovarianceEstimate cov = estimate_covariance(points, km.assignment, km.means);
  fit.covariance_floored = cov.floored;
  fit.kmeans_iterations = km.iterations;
  fit.model.means = std::move(km.means);
  fit.model.variances = cov.variances;
  fit.model.weights = fit.weights.weights;
  fit.model.source_seed = options.seed;
  fit.model.validate();
  return fit;
}

}  // namespace bbgc
