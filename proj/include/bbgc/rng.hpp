#pragma once

// Counter-based random streams.
//
// Every random quantity in the toolkit is a pure function of
// (seed, purpose, index): a worker that regenerates draw i never needs to
// know how many draws came before it or which thread produced them.

#include <cstdint>
#include <string_view>

namespace bbgc {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) noexcept {
  return splitmix64(a ^ splitmix64(b + 0x632BE59BD9B4E019ULL));
}

// Seed for a named purpose ("anchors", "pool", "fit", ...). Distinct purposes
// give unrelated streams from the same user seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) noexcept;

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) noexcept : key_(splitmix64(key)) {}
  CounterRng(std::uint64_t seed, std::uint64_t index) noexcept : CounterRng(hash_combine(seed, index)) {}

  std::uint64_t next_u64() noexcept {
    // SplitMix64 in counter mode: state = key + ctr * golden gamma.
    return splitmix64(key_ + 0x9E3779B97F4A7C15ULL * counter_++);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1]; safe as a logarithm argument.
  double uniform_open0() noexcept { return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

  // Standard normal by Box-Muller; the second variate of each pair is cached.
  double normal() noexcept;

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace bbgc
