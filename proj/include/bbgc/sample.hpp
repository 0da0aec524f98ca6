#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "bbgc/embedding.hpp"

namespace bbgc {

// Input code z of the generator; all components finite.
class LatentCode {
 public:
  LatentCode() = default;
  explicit LatentCode(std::vector<double> values);

  std::span<const double> values() const noexcept { return values_; }
  std::size_t dim() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const noexcept { return values_[i]; }

  friend bool operator==(const LatentCode&, const LatentCode&) = default;

 private:
  std::vector<double> values_;
};

// One draw: z, F_id(G(z)), and an optional opaque reference to the image.
struct Sample {
  LatentCode latent;
  EmbeddingVector embedding;
  std::string image_ref;
};

}  // namespace bbgc
