#include "bbgc/rng.hpp"

#include <cmath>
#include <numbers>

namespace bbgc {

std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) noexcept {
  // FNV-1a over the purpose label, then mixed with the seed.
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : purpose) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return hash_combine(seed, h);
}

double CounterRng::normal() noexcept {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform_open0();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double phi = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(phi);
  has_spare_ = true;
  return r * std::cos(phi);
}

}  // namespace bbgc
