#include "bbgc/calibrate_is.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "bbgc/codec.hpp"
#include "bbgc/diagnosis.hpp"
#include "bbgc/parallel.hpp"
#include "bbgc/rng.hpp"
#include "bbgc/source.hpp"

namespace bbgc {

namespace {

constexpr std::size_t kProposalBlock = 4096;
constexpr std::size_t kStallFactor = 1000;

double plain_dot(std::span<const double> a, std::span<const double> b) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double residual_of(std::span<const double> z, const RowMatrix<double>& v, const std::vector<double>& alpha) {
  std::vector<double> x(z.size(), 0.0);
  for (std::size_t i = 0; i < v.rows(); ++i) {
    if (alpha[i] == 0.0) continue;
    const auto row = v.row(i);
    for (std::size_t d = 0; d < x.size(); ++d) x[d] += alpha[i] * row[d];
  }
  double s = 0.0;
  for (std::size_t d = 0; d < x.size(); ++d) s += (x[d] - z[d]) * (x[d] - z[d]);
  return std::sqrt(s);
}

bool outside_box(std::span<const double> z, const RowMatrix<double>& v, double thr) {
  for (std::size_t d = 0; d < z.size(); ++d) {
    double lo = v.row(0)[d];
    double hi = lo;
    for (std::size_t i = 1; i < v.rows(); ++i) {
      lo = std::min(lo, v.row(i)[d]);
      hi = std::max(hi, v.row(i)[d]);
    }
    if (z[d] < lo - thr || z[d] > hi + thr) return true;
  }
  return false;
}

nlohmann::ordered_json rounded(std::span<const double> values) {
  auto a = nlohmann::ordered_json::array();
  for (double v : values) a.push_back(round9(v));
  return a;
}

std::string encode_samples(std::span<const Sample> samples) {
  StoreHeader h;
  h.latent_dim = static_cast<std::uint32_t>(samples.front().latent.dim());
  h.embed_dim = static_cast<std::uint32_t>(samples.front().embedding.dim());
  return base64_encode(encode_batch(h, samples));
}

}  // namespace

HullMembership hull_membership(std::span<const double> z, const RowMatrix<double>& vertices,
                               const HullOptions& options) {
  const std::size_t h = vertices.rows();
  if (h == 0) throw Error(ErrorKind::InvalidConfig, "hull has no vertices");
  if (vertices.cols() != z.size()) throw Error(ErrorKind::DimensionMismatch, "query and vertex dimensions differ");

  const double thr = options.tol * (1.0 + std::sqrt(plain_dot(z, z)));
  const double half_thr2 = 0.5 * thr * thr;

  // Work with the translated points p_i = v_i - z, so the objective is
  // f(a) = 0.5 |sum a_i p_i|^2 and its gradient is g_i = <p_i, x>.
  RowMatrix<double> p(h, z.size());
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t d = 0; d < z.size(); ++d) p.row(i)[d] = vertices.row(i)[d] - z[d];
  }
  std::vector<double> gram(h * h);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j <= i; ++j) gram[i * h + j] = gram[j * h + i] = plain_dot(p.row(i), p.row(j));
  }

  // Start at the nearest vertex (lowest index on ties).
  std::size_t start = 0;
  for (std::size_t i = 1; i < h; ++i) {
    if (gram[i * h + i] < gram[start * h + start]) start = i;
  }
  HullMembership out;
  std::vector<double>& alpha = out.coefficients;
  alpha.assign(h, 0.0);
  alpha[start] = 1.0;
  std::vector<std::size_t> active{start};
  std::vector<double> g(h);
  auto refresh = [&] {
    for (std::size_t i = 0; i < h; ++i) {
      double s = 0.0;
      for (std::size_t j : active) s += gram[i * h + j] * alpha[j];
      g[i] = s;
    }
  };
  auto objective = [&] {
    double s = 0.0;
    for (std::size_t j : active) s += alpha[j] * g[j];
    return std::max(0.0, 0.5 * s);
  };

  // Minimiser of |sum mu_i p_i| over the affine hull of the active set
  // (sum mu_i = 1, signs free). False if the active set is degenerate.
  Eigen::VectorXd mu;
  auto affine_minimiser = [&] {
    const auto k = static_cast<Eigen::Index>(active.size());
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(k + 1, k + 1);
    for (Eigen::Index a = 0; a < k; ++a) {
      for (Eigen::Index b = 0; b < k; ++b) kkt(a, b) = gram[active[a] * h + active[b]];
      kkt(a, k) = 1.0;
      kkt(k, a) = 1.0;
    }
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k + 1);
    rhs(k) = 1.0;
    const Eigen::FullPivLU<Eigen::MatrixXd> lu(kkt);
    if (!lu.isInvertible()) return false;
    mu = lu.solve(rhs).head(k);
    return mu.allFinite();
  };

  refresh();
  std::size_t iter = 0;
  for (; iter < options.max_iters; ++iter) {
    const double f = objective();
    if (f <= half_thr2) break;
    std::size_t s = 0;
    for (std::size_t i = 1; i < h; ++i) {
      if (g[i] < g[s]) s = i;
    }
    const double gap = 2.0 * f - g[s];
    if (f - gap > half_thr2) break;  // the optimum is provably outside tolerance
    if (gap <= 0.0 || std::find(active.begin(), active.end(), s) != active.end()) break;

    // Forward step towards vertex s, then fully corrective minor cycles
    // over the active set.
    active.push_back(s);
    for (;;) {
      if (!affine_minimiser()) {
        // Degenerate set: fall back to an exact line search towards s.
        active.pop_back();
        const double xx = 2.0 * f;
        const double dd = gram[s * h + s] - 2.0 * g[s] + xx;
        const double gamma = dd > 0.0 ? std::clamp((xx - g[s]) / dd, 0.0, 1.0) : 0.0;
        for (std::size_t j : active) alpha[j] *= 1.0 - gamma;
        if (gamma > 0.0) {
          alpha[s] = gamma;
          active.push_back(s);
        }
        break;
      }
      double theta = 1.0;
      std::size_t leaving = active.size();
      for (std::size_t a = 0; a < active.size(); ++a) {
        if (mu(static_cast<Eigen::Index>(a)) <= 0.0) {
          const double lam = alpha[active[a]];
          const double t = lam / (lam - mu(static_cast<Eigen::Index>(a)));
          if (t < theta) {
            theta = t;
            leaving = a;
          }
        }
      }
      for (std::size_t a = 0; a < active.size(); ++a) {
        alpha[active[a]] = (1.0 - theta) * alpha[active[a]] + theta * mu(static_cast<Eigen::Index>(a));
      }
      if (leaving == active.size()) break;  // the affine minimiser is inside the simplex
      alpha[active[leaving]] = 0.0;
      std::vector<std::size_t> kept;
      for (std::size_t j : active) {
        if (alpha[j] > 0.0) {
          kept.push_back(j);
        } else {
          alpha[j] = 0.0;
        }
      }
      active = std::move(kept);
    }
    refresh();
  }

  for (double& x : alpha) x = std::max(0.0, x);
  const double sum = std::accumulate(alpha.begin(), alpha.end(), 0.0);
  for (double& x : alpha) x /= sum;
  out.iterations = iter;
  out.residual = residual_of(z, vertices, alpha);
  out.is_member = out.residual <= thr;
  return out;
}

double acceptance_probability(double ref_count, std::size_t dense_count) {
  if (dense_count == 0) throw Error(ErrorKind::ZeroDenseCount, "dense mode has no neighbours");
  const double p = std::max(ref_count, 1.0) / static_cast<double>(dense_count);
  return std::min(1.0, p);
}

void ImportanceSamplingPlan::validate() const {
  if (!(r0 > 0.0 && r0 <= 1.0)) throw Error(ErrorKind::InvalidConfig, "r0 must lie in (0, 1]");
  for (const auto& e : entries) {
    if (!(e.p > 0.0 && e.p <= 1.0)) throw Error(ErrorKind::InvalidConfig, "entry p must lie in (0, 1]");
    if (e.vertices.rows() < 1) throw Error(ErrorKind::InvalidConfig, "entry hull has no vertices");
    if (e.vertices.cols() != latent_dim()) throw Error(ErrorKind::InvalidConfig, "hull vertex dimension mismatch");
  }
}

ImportanceSamplingPlan build_plan(const Collection& store, std::span<const EmbeddingVector> dense_modes,
                                  const PlanOptions& options) {
  if (store.empty()) throw Error(ErrorKind::EmptyStore, "the sample store is empty");
  if (dense_modes.empty()) throw Error(ErrorKind::EmptyDenseModeList, "no dense modes to calibrate against");
  if (!(options.r0 > 0.0 && options.r0 <= 1.0)) throw Error(ErrorKind::InvalidConfig, "r0 must lie in (0, 1]");
  if (options.hull_size < 1) throw Error(ErrorKind::InvalidConfig, "hull_size must be at least 1");
  if (options.reference_samples < 1) throw Error(ErrorKind::InvalidConfig, "reference_samples must be at least 1");

  ImportanceSamplingPlan plan;
  plan.r0 = options.r0;
  plan.hull_size = options.hull_size;
  plan.hull = options.hull;

  // Reference count: neighbours of a random stored sample, itself excluded.
  CounterRng rng(derive_seed(options.seed, "is-reference"));
  double ref_total = 0.0;
  for (std::size_t r = 0; r < options.reference_samples; ++r) {
    const auto idx = static_cast<std::size_t>(rng.next_u64() % store.size());
    if (r == 0) {
      plan.reference_index = idx;
      plan.reference = store.sample(idx);
    }
    const std::size_t count = neighbor_count(store.embeddings().row(idx), store.embeddings(), options.r0);
    ref_total += static_cast<double>(count - 1);
  }
  const double ref_count = ref_total / static_cast<double>(options.reference_samples);

  for (const auto& mode : dense_modes) {
    if (mode.dim() != store.embed_dim()) throw Error(ErrorKind::DimensionMismatch, "dense mode dimension mismatch");
    PlanEntry e;
    e.mode = mode;
    const std::vector<double> dist = distances_to(mode.values(), store.embeddings());
    for (double d : dist) e.dense_count += d <= options.r0 ? 1 : 0;
    if (e.dense_count == 0) {
      throw Error(ErrorKind::ZeroDenseCount, "a dense mode has no neighbours within r0 in the store");
    }
    e.ref_count = ref_count;
    e.p = acceptance_probability(ref_count, e.dense_count);

    std::vector<std::size_t> order(store.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t keep = std::min(options.hull_size, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                      [&](std::size_t a, std::size_t b) { return dist[a] < dist[b] || (dist[a] == dist[b] && a < b); });
    e.vertices = RowMatrix<double>(store.latent_dim());
    for (std::size_t i = 0; i < keep; ++i) {
      if (dist[order[i]] > options.r0) break;
      e.vertex_samples.push_back(store.sample(order[i]));
      e.vertices.append_row(e.vertex_samples.back().latent.values());
    }
    plan.entries.push_back(std::move(e));
  }
  std::stable_sort(plan.entries.begin(), plan.entries.end(),
                   [](const PlanEntry& a, const PlanEntry& b) { return a.dense_count > b.dense_count; });
  plan.validate();
  return plan;
}

std::ptrdiff_t matching_entry(const ImportanceSamplingPlan& plan, std::span<const double> z) {
  double zz = 0.0;
  for (double v : z) zz += v * v;
  const double thr = plan.hull.tol * (1.0 + std::sqrt(zz));
  for (std::size_t e = 0; e < plan.entries.size(); ++e) {
    const auto& entry = plan.entries[e];
    if (outside_box(z, entry.vertices, thr)) continue;
    if (hull_membership(z, entry.vertices, plan.hull).is_member) return static_cast<std::ptrdiff_t>(e);
  }
  return -1;
}

std::vector<LatentCode> sample_calibrated_is(const ImportanceSamplingPlan& plan, std::size_t latent_dim, std::size_t n,
                                             std::uint64_t seed, IsSamplingStats* stats) {
  plan.validate();
  if (!plan.entries.empty() && plan.latent_dim() != latent_dim) {
    throw Error(ErrorKind::DimensionMismatch, "plan latent dimension does not match the source");
  }
  const std::uint64_t accept_seed = derive_seed(seed, "is-accept");
  IsSamplingStats local;
  std::vector<LatentCode> out;
  out.reserve(n);
  std::uint64_t next = 0;
  const std::uint64_t limit = static_cast<std::uint64_t>(kStallFactor) * std::max<std::size_t>(n, 1);
  while (out.size() < n) {
    if (next >= limit) {
      throw Error(ErrorKind::AcceptanceStall, "more than " + std::to_string(limit) + " proposals for " +
                                                  std::to_string(n) + " samples");
    }
    const std::size_t block = static_cast<std::size_t>(std::min<std::uint64_t>(kProposalBlock, limit - next));
    std::vector<LatentCode> proposals = sample_latents(block, latent_dim, seed, next);
    std::vector<std::ptrdiff_t> match(block, -1);
    if (!plan.entries.empty()) {
      parallel_for(
          block,
          [&](std::size_t begin, std::size_t end) {
            for (std::size_t i = begin; i < end; ++i) match[i] = matching_entry(plan, proposals[i].values());
          },
          64);
    }
    for (std::size_t i = 0; i < block && out.size() < n; ++i) {
      ++local.proposals;
      bool accept = true;
      if (match[i] >= 0) {
        ++local.in_hull;
        const double u = CounterRng(accept_seed, next + i).uniform();
        accept = u < plan.entries[static_cast<std::size_t>(match[i])].p;
        if (accept) ++local.in_hull_accepted;
      } else {
        ++local.outside;
        ++local.outside_accepted;
      }
      if (accept) {
        ++local.accepted;
        out.push_back(std::move(proposals[i]));
      }
    }
    next += block;
  }
  if (stats) *stats = local;
  return out;
}

nlohmann::ordered_json ImportanceSamplingPlan::to_json() const {
  nlohmann::ordered_json j;
  j["type"] = "is";
  j["r0"] = r0;
  j["hull_size"] = hull_size;
  j["tol"] = hull.tol;
  j["max_iters"] = hull.max_iters;
  nlohmann::ordered_json ref;
  ref["index"] = reference_index;
  ref["latent"] = rounded(reference.latent.values());
  ref["embedding"] = rounded(reference.embedding.values());
  j["reference"] = std::move(ref);
  auto list = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    nlohmann::ordered_json ej;
    ej["p"] = e.p;
    ej["dense_count"] = e.dense_count;
    ej["ref_count"] = e.ref_count;
    ej["mode_embedding"] = rounded(e.mode.values());
    ej["vertex_count"] = e.vertices.rows();
    ej["vertices"] = encode_samples(e.vertex_samples);
    list.push_back(std::move(ej));
  }
  j["entries"] = std::move(list);
  return j;
}

ImportanceSamplingPlan ImportanceSamplingPlan::from_json(const nlohmann::json& j) {
  ImportanceSamplingPlan plan;
  try {
    if (j.at("type").get<std::string>() != "is") throw Error(ErrorKind::InvalidConfig, "model is not an is plan");
    plan.r0 = j.at("r0").get<double>();
    plan.hull_size = j.at("hull_size").get<std::size_t>();
    plan.hull.tol = j.value("tol", plan.hull.tol);
    plan.hull.max_iters = j.value("max_iters", plan.hull.max_iters);
    const auto& ref = j.at("reference");
    plan.reference_index = ref.at("index").get<std::size_t>();
    plan.reference.latent = LatentCode(ref.at("latent").get<std::vector<double>>());
    plan.reference.embedding =
        EmbeddingVector::from_unit(ref.at("embedding").get<std::vector<double>>(), kStoredNormTolerance);
    for (const auto& ej : j.at("entries")) {
      PlanEntry e;
      e.p = ej.at("p").get<double>();
      e.dense_count = ej.at("dense_count").get<std::size_t>();
      e.ref_count = ej.at("ref_count").get<double>();
      e.mode = EmbeddingVector::from_unit(ej.at("mode_embedding").get<std::vector<double>>(), kStoredNormTolerance);
      DecodedBatch batch = decode_batch(base64_decode(ej.at("vertices").get<std::string>()), EmbeddingCheck::unit);
      e.vertices = RowMatrix<double>(batch.header.latent_dim);
      for (auto& s : batch.samples) e.vertices.append_row(s.latent.values());
      e.vertex_samples = std::move(batch.samples);
      if (e.vertices.rows() != ej.at("vertex_count").get<std::size_t>()) {
        throw Error(ErrorKind::InvalidConfig, "vertex payload does not match vertex_count");
      }
      plan.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("importance sampling plan: ") + e.what());
  }
  plan.validate();
  return plan;
}

}  // namespace bbgc
