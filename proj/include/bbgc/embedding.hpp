#pragma once

// Distance, similarity and neighbour-indicator kernels over unit-norm
// identity embeddings.
//
//   d(a, b) = acos(clamp(<a, b>, -1, 1)) / pi                 in [0, 1]
//   s(a, b) = (exp(max(0, theta - d)) - 1) / (exp(theta) - 1)  in [0, 1]
//   1_r(d)  = [d <= r]
//
// All inner products go through one kernel with a fixed summation order
// (four interleaved lanes, combined pairwise), so the scalar path and the
// blocked anchor x pool sweep produce bit-identical results.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bbgc/error.hpp"

namespace bbgc {

// Dense row-major matrix with a fixed column count.
template <class T>
class RowMatrix {
 public:
  RowMatrix() = default;
  RowMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols) {}
  explicit RowMatrix(std::size_t cols) : cols_(cols) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return rows_ == 0; }

  std::span<T> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  std::span<const T> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }

  template <class U>
  void append_row(std::span<const U> values) {
    if (values.size() != cols_) throw Error(ErrorKind::DimensionMismatch, "row has wrong width");
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
  }

  void reserve_rows(std::size_t n) { data_.reserve(n * cols_); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using EmbeddingMatrix = RowMatrix<double>;

class EmbeddingVector {
 public:
  EmbeddingVector() = default;

  // Wraps values that are already unit norm within `tolerance`.
  static EmbeddingVector from_unit(std::vector<double> values, double tolerance = 1e-6);

  std::span<const double> values() const noexcept { return values_; }
  std::size_t dim() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const noexcept { return values_[i]; }

  friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;

 private:
  friend EmbeddingVector normalize(std::span<const double> values);
  explicit EmbeddingVector(std::vector<double> values) : values_(std::move(values)) {}

  std::vector<double> values_;
};

// Throws ZeroVector for norm <= 1e-12, NonFinite for NaN/Inf components.
EmbeddingVector normalize(std::span<const double> values);

struct SimilarityConfig {
  double theta = 0.3;   // max same-identity distance
  double radius = 0.25;  // neighbour radius r (and r0 of the calibrators)

  // Throws InvalidConfig unless 0 < theta <= 1 and 0 < radius <= 1.
  void validate() const;
};

double dot(std::span<const double> a, std::span<const double> b) noexcept;

double distance_from_dot(double inner) noexcept;
double similarity_from_distance(double distance, double theta) noexcept;

double cosine_distance(const EmbeddingVector& a, const EmbeddingVector& b);
double similarity(const EmbeddingVector& a, const EmbeddingVector& b, const SimilarityConfig& cfg);

// Pool members with cosine_distance(anchor, .) <= radius. The pool is split
// into chunks of `chunk` members that are counted independently.
std::size_t neighbor_count(const EmbeddingVector& anchor, std::span<const EmbeddingVector> pool, double radius,
                           std::size_t chunk = 1024);
std::size_t neighbor_count(std::span<const double> anchor, const EmbeddingMatrix& pool, double radius);

// Distances from one anchor to every pool row, in pool order.
std::vector<double> distances_to(std::span<const double> anchor, const EmbeddingMatrix& pool);

// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double x) noexcept;
  double value() const noexcept { return sum_ + compensation_; }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
};

struct AnchorSweep {
  std::size_t neighbors = 0;    // pool members within cfg.radius
  double similarity_sum = 0.0;  // compensated, accumulated in pool order
};

// One fused pass over anchors x pool. Parallel over anchors; each anchor's
// accumulation runs serially in pool order, so the result does not depend
// on the worker count.
std::vector<AnchorSweep> sweep(const EmbeddingMatrix& anchors, const EmbeddingMatrix& pool,
                               const SimilarityConfig& cfg);

}  // namespace bbgc
