#include "bbgc/diagnosis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>

#include "bbgc/rng.hpp"

namespace bbgc {

namespace {

void require_pool(const Collection& pool) {
  if (pool.empty()) throw Error(ErrorKind::EmptyPool, "the sample collection C is empty");
}

void require_sizes(std::span<const std::size_t> sizes, std::size_t limit, const char* what) {
  if (sizes.empty()) throw Error(ErrorKind::SizesOutOfRange, "no curve sizes given");
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] < 1 || sizes[i] > limit) {
      throw Error(ErrorKind::SizesOutOfRange, "size " + std::to_string(sizes[i]) + " outside [1, " +
                                                  std::to_string(limit) + "] of the " + what);
    }
    if (i > 0 && sizes[i] <= sizes[i - 1]) {
      throw Error(ErrorKind::SizesOutOfRange, "curve sizes must be strictly increasing");
    }
  }
}

std::pair<double, double> mean_and_sigma(std::span<const double> values) {
  CompensatedSum sum;
  for (double v : values) sum.add(v);
  const double mu = sum.value() / static_cast<double>(values.size());
  if (values.size() < 2) return {mu, 0.0};
  CompensatedSum sq;
  for (double v : values) sq.add((v - mu) * (v - mu));
  return {mu, std::sqrt(sq.value() / static_cast<double>(values.size() - 1))};
}

nlohmann::ordered_json rounded_array(std::span<const double> values) {
  auto a = nlohmann::ordered_json::array();
  for (double v : values) a.push_back(round9(v));
  return a;
}

nlohmann::ordered_json mode_json(const ModeEntry& e) {
  nlohmann::ordered_json j;
  j["anchor_index"] = e.anchor_index;
  j["neighbor_count"] = e.neighbor_count;
  j["mccs"] = round9(e.mccs);
  j["latent"] = rounded_array(e.latent.values());
  j["embedding"] = rounded_array(e.embedding.values());
  return j;
}

ModeEntry mode_from_json(const nlohmann::json& j) {
  ModeEntry e;
  e.anchor_index = j.at("anchor_index").get<std::size_t>();
  e.neighbor_count = j.at("neighbor_count").get<std::size_t>();
  e.mccs = j.at("mccs").get<double>();
  e.latent = LatentCode(j.at("latent").get<std::vector<double>>());
  e.embedding = EmbeddingVector::from_unit(j.at("embedding").get<std::vector<double>>(), kStoredNormTolerance);
  return e;
}

}  // namespace

double round9(double v) {
  if (!std::isfinite(v) || v == 0.0) return v;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::strtod(buf, nullptr);
}

MccsValue mccs_from_mean(double mean_similarity, std::size_t anchor_index, std::size_t n_samples) {
  MccsValue v;
  v.anchor_index = anchor_index;
  v.mean_similarity = mean_similarity;
  v.n_samples = n_samples;
  v.value = mean_similarity > 0.0 ? 1.0 / (1.0 - std::log(mean_similarity)) : 0.0;
  return v;
}

double expected_similarity(std::span<const double> anchor, const EmbeddingMatrix& pool, const SimilarityConfig& cfg) {
  cfg.validate();
  if (pool.rows() == 0) throw Error(ErrorKind::EmptyPool, "the sample collection C is empty");
  if (anchor.size() != pool.cols()) throw Error(ErrorKind::DimensionMismatch, "anchor and pool dimensions differ");
  CompensatedSum sum;
  for (std::size_t j = 0; j < pool.rows(); ++j) {
    const double d = distance_from_dot(dot(anchor, pool.row(j)));
    if (d < cfg.theta) sum.add(similarity_from_distance(d, cfg.theta));
  }
  return sum.value() / static_cast<double>(pool.rows());
}

double expected_similarity(const EmbeddingVector& anchor, const Collection& pool, const SimilarityConfig& cfg) {
  require_pool(pool);
  return expected_similarity(anchor.values(), pool.embeddings(), cfg);
}

MccsValue mccs(const EmbeddingVector& anchor, const Collection& pool, const SimilarityConfig& cfg,
               std::size_t anchor_index) {
  return mccs_from_mean(expected_similarity(anchor, pool, cfg), anchor_index, pool.size());
}

PopulationStats summarize(std::vector<MccsValue> per_anchor) {
  if (per_anchor.size() < 2) {
    throw Error(ErrorKind::TooFewAnchors, "population statistics need at least 2 anchors, got " +
                                              std::to_string(per_anchor.size()));
  }
  std::vector<double> values(per_anchor.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = per_anchor[i].value;
  PopulationStats s;
  std::tie(s.mu, s.sigma) = mean_and_sigma(values);
  s.m = per_anchor.size();
  s.per_anchor = std::move(per_anchor);
  return s;
}

PopulationStats population_stats(const Collection& anchors, const Collection& pool, const SimilarityConfig& cfg) {
  require_pool(pool);
  if (anchors.size() < 2) {
    throw Error(ErrorKind::TooFewAnchors, "population statistics need at least 2 anchors, got " +
                                              std::to_string(anchors.size()));
  }
  require_disjoint(anchors, pool);
  const auto sweeps = sweep(anchors.embeddings(), pool.embeddings(), cfg);
  std::vector<MccsValue> per_anchor(anchors.size());
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    per_anchor[a] = mccs_from_mean(sweeps[a].similarity_sum / static_cast<double>(pool.size()), a, pool.size());
  }
  return summarize(std::move(per_anchor));
}

std::vector<std::size_t> rank_by_count(std::span<const std::size_t> counts) {
  std::vector<std::size_t> order(counts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
  return order;
}

std::vector<std::size_t> neighbor_counts(const Collection& anchors, const Collection& pool, double radius) {
  if (anchors.empty() || pool.empty()) {
    throw Error(ErrorKind::EmptyCollections, "anchor and sample collections must both be non-empty");
  }
  require_disjoint(anchors, pool);
  SimilarityConfig cfg;
  cfg.radius = radius;
  cfg.theta = 1e-300;  // only counts are used; keeps the similarity branch cold
  const auto sweeps = sweep(anchors.embeddings(), pool.embeddings(), cfg);
  std::vector<std::size_t> counts(sweeps.size());
  for (std::size_t a = 0; a < sweeps.size(); ++a) counts[a] = sweeps[a].neighbors;
  return counts;
}

DenseModeResult worst_from_counts(std::span<const std::size_t> counts, double radius, std::size_t runner_ups) {
  if (counts.empty()) throw Error(ErrorKind::EmptyCollections, "no anchors");
  const auto order = rank_by_count(counts);
  DenseModeResult r;
  r.anchor_index = order.front();
  r.neighbor_count = counts[order.front()];
  r.radius = radius;
  r.no_dense_mode = r.neighbor_count == 0;
  for (std::size_t i = 1; i < order.size() && i <= runner_ups; ++i) r.runner_ups.emplace_back(order[i], counts[order[i]]);
  return r;
}

std::vector<DenseModeResult> top_k_from_counts(std::span<const std::size_t> counts, double radius, std::size_t k) {
  if (k < 1) throw Error(ErrorKind::InvalidConfig, "k must be at least 1");
  if (counts.empty()) throw Error(ErrorKind::EmptyCollections, "no anchors");
  const auto order = rank_by_count(counts);
  std::vector<DenseModeResult> out;
  for (std::size_t i = 0; i < order.size() && i < k; ++i) {
    DenseModeResult r;
    r.anchor_index = order[i];
    r.neighbor_count = counts[order[i]];
    r.radius = radius;
    r.no_dense_mode = r.neighbor_count == 0;
    out.push_back(r);
  }
  return out;
}

DenseModeResult find_worst_mode(const Collection& anchors, const Collection& pool, double radius,
                                std::size_t runner_ups) {
  return worst_from_counts(neighbor_counts(anchors, pool, radius), radius, runner_ups);
}

std::vector<DenseModeResult> top_k_modes(const Collection& anchors, const Collection& pool, double radius,
                                         std::size_t k) {
  if (k < 1) throw Error(ErrorKind::InvalidConfig, "k must be at least 1");
  return top_k_from_counts(neighbor_counts(anchors, pool, radius), radius, k);
}

std::string_view to_string(StatisticKind kind) {
  switch (kind) {
    case StatisticKind::mccs_single:
      return "mccs_single";
    case StatisticKind::mu_mccs:
      return "mu_mccs";
    case StatisticKind::sigma_mccs:
      return "sigma_mccs";
  }
  return "unknown";
}

std::string_view to_string(CurveAxis axis) { return axis == CurveAxis::pool ? "pool" : "anchors"; }

std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng(derive_seed(seed, "shuffle"));
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(i));
    std::swap(order[i - 1], order[std::min(j, i - 1)]);
  }
  return order;
}

ConvergenceCurve mccs_curve(const EmbeddingVector& anchor, const Collection& pool, const SimilarityConfig& cfg,
                            std::span<const std::size_t> sizes, std::uint64_t seed,
                            std::optional<std::size_t> anchor_index) {
  cfg.validate();
  require_pool(pool);
  require_sizes(sizes, pool.size(), "pool");
  if (anchor.dim() != pool.embed_dim()) throw Error(ErrorKind::DimensionMismatch, "anchor and pool dimensions differ");
  const auto order = shuffled_order(pool.size(), seed);
  ConvergenceCurve curve;
  curve.kind = StatisticKind::mccs_single;
  curve.axis = CurveAxis::pool;
  curve.anchor_index = anchor_index;
  CompensatedSum sum;
  std::size_t next = 0;
  for (std::size_t i = 0; i < sizes.back(); ++i) {
    const double d = distance_from_dot(dot(anchor.values(), pool.embeddings().row(order[i])));
    if (d < cfg.theta) sum.add(similarity_from_distance(d, cfg.theta));
    if (i + 1 == sizes[next]) {
      curve.points.emplace_back(sizes[next], mccs_from_mean(sum.value() / static_cast<double>(i + 1)).value);
      ++next;
    }
  }
  return curve;
}

std::pair<ConvergenceCurve, ConvergenceCurve> population_curve_pool(const Collection& anchors, const Collection& pool,
                                                                    const SimilarityConfig& cfg,
                                                                    std::span<const std::size_t> sizes,
                                                                    std::uint64_t seed) {
  require_pool(pool);
  if (anchors.size() < 2) throw Error(ErrorKind::TooFewAnchors, "population curves need at least 2 anchors");
  require_sizes(sizes, pool.size(), "pool");
  require_disjoint(anchors, pool);
  const auto order = shuffled_order(pool.size(), seed);
  std::vector<CompensatedSum> sums(anchors.size());
  std::pair<ConvergenceCurve, ConvergenceCurve> out;
  out.first.kind = StatisticKind::mu_mccs;
  out.second.kind = StatisticKind::sigma_mccs;
  std::size_t done = 0;
  for (std::size_t size : sizes) {
    const Collection segment =
        pool.subset(std::span<const std::size_t>(order.data() + done, size - done));
    const auto sweeps = sweep(anchors.embeddings(), segment.embeddings(), cfg);
    for (std::size_t a = 0; a < anchors.size(); ++a) sums[a].add(sweeps[a].similarity_sum);
    done = size;
    std::vector<double> values(anchors.size());
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      values[a] = mccs_from_mean(sums[a].value() / static_cast<double>(size)).value;
    }
    const auto [mu, sigma] = mean_and_sigma(values);
    out.first.points.emplace_back(size, mu);
    out.second.points.emplace_back(size, sigma);
  }
  return out;
}

std::pair<ConvergenceCurve, ConvergenceCurve> population_curve_anchors(std::span<const MccsValue> per_anchor,
                                                                       std::span<const std::size_t> sizes,
                                                                       std::uint64_t seed) {
  require_sizes(sizes, per_anchor.size(), "anchors");
  if (sizes.front() < 2) throw Error(ErrorKind::SizesOutOfRange, "anchor-axis sizes must be at least 2");
  const auto order = shuffled_order(per_anchor.size(), seed);
  std::pair<ConvergenceCurve, ConvergenceCurve> out;
  out.first.kind = StatisticKind::mu_mccs;
  out.first.axis = CurveAxis::anchors;
  out.second.kind = StatisticKind::sigma_mccs;
  out.second.axis = CurveAxis::anchors;
  std::vector<double> values;
  for (std::size_t size : sizes) {
    while (values.size() < size) values.push_back(per_anchor[order[values.size()]].value);
    const auto [mu, sigma] = mean_and_sigma(values);
    out.first.points.emplace_back(size, mu);
    out.second.points.emplace_back(size, sigma);
  }
  return out;
}

ConsistencyResult mode_consistency_check(const Collection& anchors, const Collection& pool,
                                         std::span<const std::size_t> anchor_sizes, double radius) {
  require_sizes(anchor_sizes, anchors.size(), "anchors");
  const Collection used = anchors.prefix(anchor_sizes.back());
  const auto counts = neighbor_counts(used, pool, radius);
  ConsistencyResult result;
  for (std::size_t size : anchor_sizes) {
    const auto worst = worst_from_counts(std::span<const std::size_t>(counts.data(), size), radius, 0);
    result.points.push_back({size, worst.anchor_index, worst.neighbor_count, used.embedding(worst.anchor_index)});
  }
  for (std::size_t i = 0; i < result.points.size(); ++i) {
    for (std::size_t j = i + 1; j < result.points.size(); ++j) {
      result.max_pairwise_distance = std::max(
          result.max_pairwise_distance, cosine_distance(result.points[i].embedding, result.points[j].embedding));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------

DiagnosisReport diagnose(const Collection& anchors, const Collection& pool, const DiagnoseOptions& options) {
  options.cfg.validate();
  if (anchors.empty() || pool.empty()) {
    throw Error(ErrorKind::EmptyCollections, "anchor and sample collections must both be non-empty");
  }
  if (anchors.size() < 2) throw Error(ErrorKind::TooFewAnchors, "diagnosis needs at least 2 anchors");
  if (options.k < 1) throw Error(ErrorKind::InvalidConfig, "k must be at least 1");
  require_disjoint(anchors, pool);

  const auto sweeps = sweep(anchors.embeddings(), pool.embeddings(), options.cfg);
  DiagnosisReport r;
  r.cfg = options.cfg;
  r.m = anchors.size();
  r.n = pool.size();
  r.counts.resize(anchors.size());
  std::vector<MccsValue> per_anchor(anchors.size());
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    per_anchor[a] = mccs_from_mean(sweeps[a].similarity_sum / static_cast<double>(pool.size()), a, pool.size());
    r.counts[a] = sweeps[a].neighbors;
  }
  PopulationStats stats = summarize(std::move(per_anchor));
  r.mu = stats.mu;
  r.sigma = stats.sigma;
  r.per_anchor = std::move(stats.per_anchor);

  auto entry = [&](std::size_t a) {
    return ModeEntry{a, r.counts[a], r.per_anchor[a].value, anchors.latent(a), anchors.embedding(a)};
  };
  const auto worst = worst_from_counts(r.counts, options.cfg.radius, 0);
  r.worst = entry(worst.anchor_index);
  r.no_dense_mode = worst.no_dense_mode;
  for (const auto& mode : top_k_from_counts(r.counts, options.cfg.radius, options.k)) {
    r.top_k.push_back(entry(mode.anchor_index));
  }

  if (!options.curve_sizes.empty()) {
    const std::uint64_t seed = derive_seed(options.seed, "curves");
    r.curves.push_back(mccs_curve(r.worst.embedding, pool, options.cfg, options.curve_sizes, seed, r.worst.anchor_index));
    const std::size_t random_anchor =
        static_cast<std::size_t>(CounterRng(derive_seed(options.seed, "random-anchor")).next_u64() % anchors.size());
    r.curves.push_back(
        mccs_curve(anchors.embedding(random_anchor), pool, options.cfg, options.curve_sizes, seed, random_anchor));
    auto [mu_curve, sigma_curve] = population_curve_pool(anchors, pool, options.cfg, options.curve_sizes, seed);
    r.curves.push_back(std::move(mu_curve));
    r.curves.push_back(std::move(sigma_curve));
  }
  return r;
}

nlohmann::ordered_json DiagnosisReport::to_json() const {
  nlohmann::ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["theta"] = round9(cfg.theta);
  j["radius"] = round9(cfg.radius);
  j["m"] = m;
  j["n"] = n;
  j["mu_mccs"] = round9(mu);
  j["sigma_mccs"] = round9(sigma);
  j["worst_mode"] = mode_json(worst);
  j["worst_mode"]["no_dense_mode"] = no_dense_mode;
  auto top = nlohmann::ordered_json::array();
  for (const auto& e : top_k) top.push_back(mode_json(e));
  j["top_k"] = std::move(top);
  auto curve_list = nlohmann::ordered_json::array();
  for (const auto& c : curves) {
    nlohmann::ordered_json cj;
    cj["statistic"] = std::string(to_string(c.kind));
    cj["axis"] = std::string(to_string(c.axis));
    if (c.anchor_index) cj["anchor_index"] = *c.anchor_index;
    auto pts = nlohmann::ordered_json::array();
    for (const auto& [size, value] : c.points) pts.push_back({size, round9(value)});
    cj["points"] = std::move(pts);
    curve_list.push_back(std::move(cj));
  }
  j["curves"] = std::move(curve_list);
  return j;
}

DiagnosisReport DiagnosisReport::from_json(const nlohmann::json& j) {
  DiagnosisReport r;
  try {
    const int version = j.at("schema_version").get<int>();
    if (version != kReportSchemaVersion) {
      throw Error(ErrorKind::VersionMismatch, "report schema version " + std::to_string(version));
    }
    r.cfg.theta = j.at("theta").get<double>();
    r.cfg.radius = j.at("radius").get<double>();
    r.m = j.at("m").get<std::size_t>();
    r.n = j.at("n").get<std::size_t>();
    r.mu = j.at("mu_mccs").get<double>();
    r.sigma = j.at("sigma_mccs").get<double>();
    r.worst = mode_from_json(j.at("worst_mode"));
    r.no_dense_mode = j.at("worst_mode").value("no_dense_mode", false);
    for (const auto& e : j.at("top_k")) r.top_k.push_back(mode_from_json(e));
    for (const auto& cj : j.value("curves", nlohmann::json::array())) {
      ConvergenceCurve c;
      const std::string kind = cj.at("statistic").get<std::string>();
      c.kind = kind == "mu_mccs" ? StatisticKind::mu_mccs
               : kind == "sigma_mccs" ? StatisticKind::sigma_mccs
                                      : StatisticKind::mccs_single;
      c.axis = cj.at("axis").get<std::string>() == "anchors" ? CurveAxis::anchors : CurveAxis::pool;
      if (cj.contains("anchor_index")) c.anchor_index = cj.at("anchor_index").get<std::size_t>();
      for (const auto& p : cj.at("points")) c.points.emplace_back(p.at(0).get<std::size_t>(), p.at(1).get<double>());
      r.curves.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("diagnosis report: ") + e.what());
  }
  r.cfg.validate();
  return r;
}

}  // namespace bbgc
