#include "bbgc/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <string>

#include "bbgc/parallel.hpp"

namespace bbgc {

namespace {

// Margin on the inner-product prefilters. acos has slope magnitude >= 1, so
// a dot product more than this below cos(pi * x) is certainly farther than x.
constexpr double kDotMargin = 1e-12;

constexpr std::size_t kPoolBlock = 256;

void require_same_dim(std::size_t a, std::size_t b) {
  if (a != b) {
    throw Error(ErrorKind::DimensionMismatch,
                "embedding dimensions differ (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
  }
}

using Lanes = double __attribute__((vector_size(32)));

inline Lanes load4(const double* p) noexcept {
  Lanes v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline double combine(const Lanes& s) noexcept { return (s[0] + s[1]) + (s[2] + s[3]); }

// Inner products of four anchors with two pool rows. Lane l of each
// accumulator sums the terms with k % 4 == l, the same order as dot().
inline void dot4x2(const double* const a[4], const double* p, const double* q, std::size_t dim, double out_p[4],
                   double out_q[4]) noexcept {
  Lanes sp[4] = {};
  Lanes sq[4] = {};
  std::size_t k = 0;
  for (; k + 4 <= dim; k += 4) {
    const Lanes pv = load4(p + k);
    const Lanes qv = load4(q + k);
    for (int i = 0; i < 4; ++i) {
      const Lanes av = load4(a[i] + k);
      sp[i] += av * pv;
      sq[i] += av * qv;
    }
  }
  for (std::size_t l = 0; k < dim; ++k, ++l) {
    for (int i = 0; i < 4; ++i) {
      sp[i][l] += a[i][k] * p[k];
      sq[i][l] += a[i][k] * q[k];
    }
  }
  for (int i = 0; i < 4; ++i) {
    out_p[i] = combine(sp[i]);
    out_q[i] = combine(sq[i]);
  }
}

}  // namespace

EmbeddingVector EmbeddingVector::from_unit(std::vector<double> values, double tolerance) {
  double sq = 0.0;
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(ErrorKind::NonFinite, "embedding has a non-finite component");
    sq += v * v;
  }
  if (std::abs(std::sqrt(sq) - 1.0) > tolerance) {
    throw Error(ErrorKind::InvalidConfig, "embedding is not unit norm (norm " + std::to_string(std::sqrt(sq)) + ")");
  }
  return EmbeddingVector(std::move(values));
}

EmbeddingVector normalize(std::span<const double> values) {
  double sq = 0.0;
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(ErrorKind::NonFinite, "vector has a non-finite component");
    sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (!(norm > 1e-12)) throw Error(ErrorKind::ZeroVector, "vector norm is below 1e-12");
  std::vector<double> out(values.begin(), values.end());
  for (double& v : out) v /= norm;
  return EmbeddingVector(std::move(out));
}

void SimilarityConfig::validate() const {
  if (!(theta > 0.0 && theta <= 1.0)) throw Error(ErrorKind::InvalidConfig, "theta must lie in (0, 1]");
  if (!(radius > 0.0 && radius <= 1.0)) throw Error(ErrorKind::InvalidConfig, "radius must lie in (0, 1]");
}

double dot(std::span<const double> a, std::span<const double> b) noexcept {
  const std::size_t dim = std::min(a.size(), b.size());
  Lanes s = {};
  std::size_t k = 0;
  for (; k + 4 <= dim; k += 4) s += load4(a.data() + k) * load4(b.data() + k);
  for (std::size_t l = 0; k < dim; ++k, ++l) s[l] += a[k] * b[k];
  return combine(s);
}

double distance_from_dot(double inner) noexcept {
  return std::acos(std::clamp(inner, -1.0, 1.0)) / std::numbers::pi;
}

double similarity_from_distance(double distance, double theta) noexcept {
  const double margin = std::max(0.0, theta - distance);
  if (margin == 0.0) return 0.0;
  return std::expm1(margin) / std::expm1(theta);
}

double cosine_distance(const EmbeddingVector& a, const EmbeddingVector& b) {
  require_same_dim(a.dim(), b.dim());
  return distance_from_dot(dot(a.values(), b.values()));
}

double similarity(const EmbeddingVector& a, const EmbeddingVector& b, const SimilarityConfig& cfg) {
  return similarity_from_distance(cosine_distance(a, b), cfg.theta);
}

std::size_t neighbor_count(const EmbeddingVector& anchor, std::span<const EmbeddingVector> pool, double radius,
                           std::size_t chunk) {
  for (const auto& member : pool) require_same_dim(anchor.dim(), member.dim());
  chunk = std::max<std::size_t>(1, chunk);
  const std::size_t n_chunks = (pool.size() + chunk - 1) / chunk;
  std::vector<std::size_t> per_chunk(n_chunks, 0);
  parallel_for(n_chunks, [&](std::size_t begin, std::size_t end) {
    for (std::size_t c = begin; c < end; ++c) {
      const std::size_t lo = c * chunk;
      const std::size_t hi = std::min(pool.size(), lo + chunk);
      std::size_t count = 0;
      for (std::size_t j = lo; j < hi; ++j) {
        if (distance_from_dot(dot(anchor.values(), pool[j].values())) <= radius) ++count;
      }
      per_chunk[c] = count;
    }
  });
  std::size_t total = 0;
  for (std::size_t c : per_chunk) total += c;
  return total;
}

std::size_t neighbor_count(std::span<const double> anchor, const EmbeddingMatrix& pool, double radius) {
  require_same_dim(anchor.size(), pool.cols());
  const double cut = std::cos(std::numbers::pi * radius) - kDotMargin;
  std::size_t count = 0;
  for (std::size_t j = 0; j < pool.rows(); ++j) {
    const double inner = dot(anchor, pool.row(j));
    if (inner >= cut && distance_from_dot(inner) <= radius) ++count;
  }
  return count;
}

std::vector<double> distances_to(std::span<const double> anchor, const EmbeddingMatrix& pool) {
  require_same_dim(anchor.size(), pool.cols());
  std::vector<double> out(pool.rows());
  parallel_for(
      pool.rows(),
      [&](std::size_t begin, std::size_t end) {
        for (std::size_t j = begin; j < end; ++j) out[j] = distance_from_dot(dot(anchor, pool.row(j)));
      },
      4096);
  return out;
}

void CompensatedSum::add(double x) noexcept {
  const double t = sum_ + x;
  if (std::abs(sum_) >= std::abs(x)) {
    compensation_ += (sum_ - t) + x;
  } else {
    compensation_ += (x - t) + sum_;
  }
  sum_ = t;
}

std::vector<AnchorSweep> sweep(const EmbeddingMatrix& anchors, const EmbeddingMatrix& pool,
                               const SimilarityConfig& cfg) {
  cfg.validate();
  require_same_dim(anchors.cols(), pool.cols());
  const std::size_t dim = pool.cols();
  const double sim_cut = std::cos(std::numbers::pi * cfg.theta) - kDotMargin;
  const double nbr_cut = std::cos(std::numbers::pi * cfg.radius) - kDotMargin;
  const double denom = std::expm1(cfg.theta);

  std::vector<AnchorSweep> out(anchors.rows());
  std::vector<CompensatedSum> sums(anchors.rows());

  auto visit = [&](std::size_t a, double inner) {
    if (inner >= sim_cut || inner >= nbr_cut) {
      const double d = distance_from_dot(inner);
      if (d <= cfg.radius) ++out[a].neighbors;
      if (d < cfg.theta) sums[a].add(std::expm1(cfg.theta - d) / denom);
    }
  };

  parallel_for(
      anchors.rows(),
      [&](std::size_t begin, std::size_t end) {
        for (std::size_t j0 = 0; j0 < pool.rows(); j0 += kPoolBlock) {
          const std::size_t j1 = std::min(pool.rows(), j0 + kPoolBlock);
          std::size_t a = begin;
          for (; a + 4 <= end; a += 4) {
            const double* rows[4] = {anchors.row(a).data(), anchors.row(a + 1).data(), anchors.row(a + 2).data(),
                                     anchors.row(a + 3).data()};
            double ip[4];
            double iq[4];
            std::size_t j = j0;
            for (; j + 2 <= j1; j += 2) {
              dot4x2(rows, pool.row(j).data(), pool.row(j + 1).data(), dim, ip, iq);
              for (int i = 0; i < 4; ++i) visit(a + i, ip[i]);
              for (int i = 0; i < 4; ++i) visit(a + i, iq[i]);
            }
            for (; j < j1; ++j) {
              for (int i = 0; i < 4; ++i) visit(a + i, dot(anchors.row(a + i), pool.row(j)));
            }
          }
          for (; a < end; ++a) {
            for (std::size_t j = j0; j < j1; ++j) visit(a, dot(anchors.row(a), pool.row(j)));
          }
        }
      },
      4);

  for (std::size_t a = 0; a < out.size(); ++a) out[a].similarity_sum = sums[a].value();
  return out;
}

}  // namespace bbgc
