#pragma once

// Collapse statistics over an anchor collection A and a disjoint sample
// collection C:
//
//   s_bar(a)  = (1/|C|) sum_c s(a, c)
//   MCCS(a)   = 1 / (1 - ln s_bar(a)),  0 when s_bar(a) = 0
//   mu, sigma = mean and (m-1)-denominator deviation of MCCS over A
//   worst     = argmax_a #{c : d(a, c) <= r}, lowest index on ties

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "bbgc/embedding.hpp"
#include "bbgc/store.hpp"

namespace bbgc {

inline constexpr int kReportSchemaVersion = 1;

struct MccsValue {
  double value = 0.0;
  std::size_t anchor_index = 0;
  double mean_similarity = 0.0;
  std::size_t n_samples = 0;
};

MccsValue mccs_from_mean(double mean_similarity, std::size_t anchor_index = 0, std::size_t n_samples = 0);

// Throws EmptyPool / DimensionMismatch.
double expected_similarity(std::span<const double> anchor, const EmbeddingMatrix& pool, const SimilarityConfig& cfg);
double expected_similarity(const EmbeddingVector& anchor, const Collection& pool, const SimilarityConfig& cfg);
MccsValue mccs(const EmbeddingVector& anchor, const Collection& pool, const SimilarityConfig& cfg,
               std::size_t anchor_index = 0);

struct PopulationStats {
  double mu = 0.0;
  double sigma = 0.0;
  std::size_t m = 0;
  std::vector<MccsValue> per_anchor;
};

// mu and the (m-1)-denominator sigma of the given values; m >= 2.
PopulationStats summarize(std::vector<MccsValue> per_anchor);

PopulationStats population_stats(const Collection& anchors, const Collection& pool, const SimilarityConfig& cfg);

struct DenseModeResult {
  std::size_t anchor_index = 0;
  std::size_t neighbor_count = 0;
  double radius = 0.0;
  std::vector<std::pair<std::size_t, std::size_t>> runner_ups;  // (anchor_index, count)
  bool no_dense_mode = false;                                    // every count is zero
};

// Anchor indices ordered by descending count, ascending index on ties.
std::vector<std::size_t> rank_by_count(std::span<const std::size_t> counts);

std::vector<std::size_t> neighbor_counts(const Collection& anchors, const Collection& pool, double radius);

DenseModeResult find_worst_mode(const Collection& anchors, const Collection& pool, double radius,
                                std::size_t runner_ups = 23);
std::vector<DenseModeResult> top_k_modes(const Collection& anchors, const Collection& pool, double radius,
                                         std::size_t k = 24);

// Same, from precomputed counts.
DenseModeResult worst_from_counts(std::span<const std::size_t> counts, double radius, std::size_t runner_ups = 23);
std::vector<DenseModeResult> top_k_from_counts(std::span<const std::size_t> counts, double radius, std::size_t k);

enum class StatisticKind { mccs_single, mu_mccs, sigma_mccs };
enum class CurveAxis { pool, anchors };

std::string_view to_string(StatisticKind kind);
std::string_view to_string(CurveAxis axis);

struct ConvergenceCurve {
  StatisticKind kind = StatisticKind::mccs_single;
  CurveAxis axis = CurveAxis::pool;
  std::optional<std::size_t> anchor_index;  // set for mccs_single
  std::vector<std::pair<std::size_t, double>> points;
};

// Permutation of [0, n) fixed by seed (Fisher-Yates on a counter stream).
std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed);

// sizes must be strictly increasing, in [1, |pool|]; throws SizesOutOfRange.
ConvergenceCurve mccs_curve(const EmbeddingVector& anchor, const Collection& pool, const SimilarityConfig& cfg,
                            std::span<const std::size_t> sizes, std::uint64_t seed,
                            std::optional<std::size_t> anchor_index = std::nullopt);

// mu and sigma over all anchors against seed-shuffled pool prefixes.
std::pair<ConvergenceCurve, ConvergenceCurve> population_curve_pool(const Collection& anchors, const Collection& pool,
                                                                    const SimilarityConfig& cfg,
                                                                    std::span<const std::size_t> sizes,
                                                                    std::uint64_t seed);

// mu and sigma over seed-shuffled anchor prefixes against the full pool.
std::pair<ConvergenceCurve, ConvergenceCurve> population_curve_anchors(std::span<const MccsValue> per_anchor,
                                                                       std::span<const std::size_t> sizes,
                                                                       std::uint64_t seed);

struct ConsistencyPoint {
  std::size_t anchor_set_size = 0;
  std::size_t anchor_index = 0;
  std::size_t neighbor_count = 0;
  EmbeddingVector embedding;
};

struct ConsistencyResult {
  std::vector<ConsistencyPoint> points;
  double max_pairwise_distance = 0.0;
};

// Worst-case mode over each anchor prefix of the given sizes.
ConsistencyResult mode_consistency_check(const Collection& anchors, const Collection& pool,
                                         std::span<const std::size_t> anchor_sizes, double radius);

struct ModeEntry {
  std::size_t anchor_index = 0;
  std::size_t neighbor_count = 0;
  double mccs = 0.0;
  LatentCode latent;
  EmbeddingVector embedding;
};

struct DiagnosisReport {
  SimilarityConfig cfg;
  std::size_t m = 0;
  std::size_t n = 0;
  double mu = 0.0;
  double sigma = 0.0;
  ModeEntry worst;
  bool no_dense_mode = false;
  std::vector<ModeEntry> top_k;
  std::vector<ConvergenceCurve> curves;
  std::vector<MccsValue> per_anchor;
  std::vector<std::size_t> counts;

  nlohmann::ordered_json to_json() const;
  static DiagnosisReport from_json(const nlohmann::json& j);
};

struct DiagnoseOptions {
  SimilarityConfig cfg;
  std::size_t k = 24;
  std::vector<std::size_t> curve_sizes;  // pool-axis population curves; empty for none
  std::uint64_t seed = 0;
};

// One fused sweep for every statistic.
DiagnosisReport diagnose(const Collection& anchors, const Collection& pool, const DiagnoseOptions& options);

// Round to 9 significant digits for stable text output.
double round9(double v);

}  // namespace bbgc
