#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "bbgc/calibrate_gmm.hpp"
#include "bbgc/parallel.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace bbgc;

namespace {

RowMatrix<double> points_from(const std::vector<std::vector<double>>& rows) {
  RowMatrix<double> m(rows.front().size());
  for (const auto& r : rows) m.append_row<double>(r);
  return m;
}

double sq(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Minimum within-cluster sum of squares over every 2-partition.
double best_two_partition(const std::vector<std::vector<double>>& pts) {
  const std::size_t n = pts.size();
  const std::size_t dim = pts[0].size();
  double best = std::numeric_limits<double>::infinity();
  for (std::uint32_t mask = 1; mask + 1 < (1u << n); ++mask) {
    double sse = 0;
    for (int side = 0; side < 2; ++side) {
      std::vector<double> mean(dim, 0.0);
      std::size_t count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (((mask >> i) & 1u) == static_cast<std::uint32_t>(side)) {
          for (std::size_t d = 0; d < dim; ++d) mean[d] += pts[i][d];
          ++count;
        }
      }
      for (double& v : mean) v /= count;
      for (std::size_t i = 0; i < n; ++i) {
        if (((mask >> i) & 1u) == static_cast<std::uint32_t>(side)) sse += sq(pts[i], mean);
      }
    }
    best = std::min(best, sse);
  }
  return best;
}

}  // namespace

TEST(KMeans, MatchesExhaustiveTwoPartition) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 10; ++i) {
      const double shift = i < 4 ? -3.0 : 3.0;
      pts.push_back({shift + 0.5 * g(rng), 0.5 * g(rng), 0.5 * g(rng)});
    }
    const auto fit = kmeans_fit(points_from(pts), 2, trial);
    EXPECT_NEAR(fit.assignment.inertia, best_two_partition(pts), 1e-9);
  }
}

TEST(KMeans, LabelsAreNearestMeans) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  std::vector<std::vector<double>> pts;
  for (int i = 0; i < 2000; ++i) pts.push_back({g(rng), g(rng)});
  const auto points = points_from(pts);
  const auto fit = kmeans_fit(points, 16, 5);
  double inertia = 0;
  for (std::size_t i = 0; i < points.rows(); ++i) {
    const double mine = sq(points.row(i), fit.means.row(fit.assignment.labels[i]));
    for (std::size_t k = 0; k < 16; ++k) EXPECT_LE(mine, sq(points.row(i), fit.means.row(k)));
    inertia += mine;
  }
  EXPECT_NEAR(fit.assignment.inertia, inertia, 1e-9 * inertia);
  EXPECT_GE(fit.iterations, 1u);
}

TEST(KMeans, DeterministicAcrossWorkerCounts) {
  const auto z = sample_latents(5000, 2, 3);
  const auto points = latent_matrix(z);
  KMeansResult one;
  KMeansResult eight;
  {
    ScopedWorkerCount w(1);
    one = kmeans_fit(points, 32, 9);
  }
  {
    ScopedWorkerCount w(8);
    eight = kmeans_fit(points, 32, 9);
  }
  EXPECT_EQ(one.assignment.labels, eight.assignment.labels);
  EXPECT_EQ(one.assignment.inertia, eight.assignment.inertia);
}

TEST(KMeans, KTooLarge) {
  const auto points = points_from({{0.0}, {1.0}});
  try {
    (void)kmeans_fit(points, 3, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::KTooLarge);
  }
}

TEST(KMeans, DuplicatePointsStillGiveKMeans) {
  const auto points = points_from({{0.0}, {0.0}, {0.0}, {10.0}});
  const auto fit = kmeans_fit(points, 3, 0);
  EXPECT_EQ(fit.means.rows(), 3u);
  EXPECT_EQ(fit.assignment.inertia, 0.0);
}

TEST(Weights, InverseCountNormalization) {
  const std::vector<std::size_t> counts{4, 0};
  const auto w = weights_from_counts(counts);
  EXPECT_DOUBLE_EQ(w[0], 1.0 / 6.0);
  EXPECT_DOUBLE_EQ(w[1], 5.0 / 6.0);
}

TEST(Weights, CountsMatchNaiveNeighbourCount) {
  const auto pool = fixture::clustered_collection(3, 600, 12, 3, 0.2);
  std::vector<std::size_t> labels(pool.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 5;
  const std::vector<EmbeddingVector> modes{pool.embedding(0), pool.embedding(1)};
  const auto w = compute_cluster_weights(labels, 5, pool.embeddings(), modes, 0.25);
  std::vector<std::size_t> want(5, 0);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    for (const auto& m : modes) {
      want[labels[i]] +=
          oracle::naive_distance(fixture::to_vec(m.values()), fixture::to_vec(pool.embeddings().row(i))) <= 0.25;
    }
  }
  EXPECT_EQ(w.raw_counts, want);
  EXPECT_NEAR(std::accumulate(w.weights.begin(), w.weights.end(), 0.0), 1.0, 1e-15);
  try {
    (void)compute_cluster_weights(labels, 5, pool.embeddings(), {}, 0.25);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyDenseModeList);
  }
}

TEST(Covariance, PooledWithinClusterVariance) {
  // Clusters {0, 2} and {10, 14}: within-cluster squares 1+1+4+4 = 10, n-K = 2.
  const auto points = points_from({{0.0, 1.0}, {2.0, 1.0}, {10.0, 1.0}, {14.0, 1.0}});
  ClusterAssignment a;
  a.labels = {0, 0, 1, 1};
  const auto means = points_from({{1.0, 1.0}, {12.0, 1.0}});
  const auto cov = estimate_covariance(points, a, means);
  EXPECT_DOUBLE_EQ(cov.variances[0], 5.0);
  EXPECT_EQ(cov.variances[1], 1e-12);
  EXPECT_TRUE(cov.floored);
}

TEST(Mixture, ComponentFrequenciesFollowWeights) {
  MixtureModel m;
  m.means = points_from({{-5.0, 0.0}, {5.0, 0.0}, {0.0, 9.0}});
  m.variances = {0.25, 4.0};
  m.weights = {0.2, 0.8, 0.0};
  std::vector<std::size_t> comp;
  const std::size_t n = 100000;
  const auto z = sample_calibrated(m, n, 11, 0, &comp);
  std::size_t first = 0;
  double s1 = 0, s11 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ASSERT_NE(comp[i], 2u);
    if (comp[i] == 0) {
      ++first;
      s1 += z[i][1];
      s11 += z[i][1] * z[i][1];
    }
  }
  EXPECT_NEAR(double(first), 0.2 * n, 5 * std::sqrt(n * 0.2 * 0.8));
  EXPECT_NEAR(s11 / first, 4.0, 5 * 4.0 * std::sqrt(2.0 / first));
  EXPECT_NEAR(s1 / first, 0.0, 5 * 2.0 / std::sqrt(double(first)));
}

TEST(Mixture, IdentityMatchesPriorMoments) {
  const auto z = sample_calibrated(MixtureModel::identity(3), 50000, 2);
  for (std::size_t d = 0; d < 3; ++d) {
    double s = 0, ss = 0;
    for (const auto& c : z) {
      s += c[d];
      ss += c[d] * c[d];
    }
    EXPECT_NEAR(s / z.size(), 0.0, 5 / std::sqrt(double(z.size())));
    EXPECT_NEAR(ss / z.size(), 1.0, 5 * std::sqrt(2.0 / z.size()));
  }
}

TEST(Mixture, IndexAddressableAndWorkerInvariant) {
  MixtureModel m = MixtureModel::identity(2);
  std::vector<LatentCode> one;
  std::vector<LatentCode> eight;
  {
    ScopedWorkerCount w(1);
    one = sample_calibrated(m, 4000, 5);
  }
  {
    ScopedWorkerCount w(8);
    eight = sample_calibrated(m, 4000, 5);
  }
  EXPECT_EQ(one, eight);
  const auto tail = sample_calibrated(m, 10, 5, 3990);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(tail[i], one[3990 + i]);
}

TEST(Mixture, JsonRoundTripAndValidation) {
  MixtureModel m;
  m.means = points_from({{0.125, -1.5}, {2.0, 3.0}});
  m.variances = {0.5, 0.75};
  m.weights = {0.25, 0.75};
  m.source_seed = 42;
  const auto back = MixtureModel::from_json(nlohmann::json::parse(m.to_json().dump()));
  EXPECT_EQ(back.to_json().dump(), m.to_json().dump());
  auto bad = m.to_json();
  bad["weights"] = {0.5, 0.75};
  EXPECT_THROW((void)MixtureModel::from_json(nlohmann::json::parse(bad.dump())), Error);
  bad = m.to_json();
  bad["variances"] = {0.5, 0.0};
  EXPECT_THROW((void)MixtureModel::from_json(nlohmann::json::parse(bad.dump())), Error);
}

TEST(CalibrateGmm, DownweightsTheClusterOverThePlantedRegion) {
  SourceSpec spec;
  spec.latent_dim = 2;
  spec.embed_dim = 16;
  spec.seed = 3;
  spec.parameters = {{"background", {{"components", 30}, {"spread", 0.25}}},
                     {"planted", nlohmann::json::array({{{"mass", 0.05}, {"spread", 0.02}}})}};
  const auto model = SyntheticModel::from_spec(spec);
  auto gen = make_generator(spec);
  const auto mode = EmbeddingVector::from_unit(model.planted()[0].center);
  GmmOptions opt;
  opt.k = 16;
  opt.n_fit = 20000;
  opt.seed = 4;
  const auto fit = calibrate_gmm(*gen, 2, std::span(&mode, 1), opt);
  EXPECT_EQ(fit.model.k(), 16u);
  EXPECT_NEAR(std::accumulate(fit.model.weights.begin(), fit.model.weights.end(), 0.0), 1.0, 1e-12);

  // Mass the calibrated mixture puts on the planted region.
  std::vector<std::size_t> comp;
  const auto z = sample_calibrated(fit.model, 50000, 8, 0, &comp);
  std::size_t planted = 0;
  for (const auto& code : z) planted += model.planted_index(code, spec.seed) == 0;
  EXPECT_LT(static_cast<double>(planted) / z.size(), 0.05 * 0.5);
  EXPECT_THROW((void)calibrate_gmm(*gen, 2, {}, opt), Error);
}
