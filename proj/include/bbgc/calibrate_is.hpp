#pragma once

// Latent-space reshaping by hull-gated rejection: each dense mode gets the
// convex hull of the latents whose embeddings sit nearest to it, and a prior
// draw inside that hull survives with probability p = ref_count / dense_count.

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "bbgc/embedding.hpp"
#include "bbgc/sample.hpp"
#include "bbgc/store.hpp"

namespace bbgc {

struct HullOptions {
  double tol = 1e-4;
  std::size_t max_iters = 500;
};

struct HullMembership {
  bool is_member = false;
  double residual = 0.0;             // || V^T alpha - z ||
  std::vector<double> coefficients;  // alpha on the simplex
  std::size_t iterations = 0;
};

// Projects z onto the convex hull of the rows of `vertices` with fully
// corrective Frank-Wolfe: each iteration adds the vertex with the most
// negative gradient, then re-minimises exactly over the active vertices.
// Member iff residual <= tol * (1 + |z|). Stops as soon as the duality gap
// settles the answer.
HullMembership hull_membership(std::span<const double> z, const RowMatrix<double>& vertices,
                               const HullOptions& options = {});

struct PlanEntry {
  double p = 1.0;
  std::size_t dense_count = 0;
  double ref_count = 0.0;
  EmbeddingVector mode;
  RowMatrix<double> vertices;  // latent codes, one per row
  std::vector<Sample> vertex_samples;
};

struct ImportanceSamplingPlan {
  std::vector<PlanEntry> entries;  // descending dense_count; first match wins
  Sample reference;
  std::size_t reference_index = 0;
  double r0 = 0.25;
  std::size_t hull_size = 100;
  HullOptions hull;

  std::size_t latent_dim() const noexcept { return reference.latent.dim(); }

  // Throws InvalidConfig on a broken invariant.
  void validate() const;

  nlohmann::ordered_json to_json() const;
  static ImportanceSamplingPlan from_json(const nlohmann::json& j);
};

struct PlanOptions {
  double r0 = 0.25;
  std::size_t hull_size = 100;
  std::size_t reference_samples = 1;  // ref_count averaged over this many random references
  std::uint64_t seed = 0;
  HullOptions hull;
};

// Throws EmptyStore, EmptyDenseModeList, ZeroDenseCount.
ImportanceSamplingPlan build_plan(const Collection& store, std::span<const EmbeddingVector> dense_modes,
                                  const PlanOptions& options);

// p for one mode; a zero reference count is floored at one neighbour.
double acceptance_probability(double ref_count, std::size_t dense_count);

struct IsSamplingStats {
  std::size_t proposals = 0;
  std::size_t accepted = 0;
  std::size_t in_hull = 0;
  std::size_t in_hull_accepted = 0;
  std::size_t outside = 0;
  std::size_t outside_accepted = 0;
};

// Entry index whose hull contains z (first match), or -1.
std::ptrdiff_t matching_entry(const ImportanceSamplingPlan& plan, std::span<const double> z);

// Proposal i is sample_latent(L, seed, i); its acceptance uniform comes from
// a separate stream indexed by i. Throws AcceptanceStall past 1000 * n
// proposals.
std::vector<LatentCode> sample_calibrated_is(const ImportanceSamplingPlan& plan, std::size_t latent_dim, std::size_t n,
                                             std::uint64_t seed, IsSamplingStats* stats = nullptr);

}  // namespace bbgc
