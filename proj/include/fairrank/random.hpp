#pragma once

// Deterministic random streams.
//
// All randomness is derived from 64-bit keys with splitmix64 mixing, so a
// stream is a pure function of (master seed, purpose, index...). The
// distribution helpers below are written out instead of using <random>'s
// distributions, whose output sequences are implementation-defined.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string_view>
#include <utility>

namespace fairrank {

inline constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Combines a parent key with a child index into a new, well-separated key.
constexpr std::uint64_t derive_key(std::uint64_t parent, std::uint64_t child) noexcept {
  return mix64(parent ^ mix64(child + kGolden));
}

// splitmix64 generator; satisfies std::uniform_random_bit_generator.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  constexpr explicit SplitMix64(std::uint64_t seed = 0) noexcept : state_(seed) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept {
    state_ += kGolden;
    return mix64(state_);
  }

 private:
  std::uint64_t state_;
};

// Uniform double in [0, 1) from the top 53 bits.
constexpr double to_unit(std::uint64_t bits) noexcept {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

template <class Gen>
double uniform01(Gen& gen) {
  return to_unit(gen());
}

// Uniform integer in [0, bound) by rejection (bound > 0).
template <class Gen>
std::uint64_t uniform_below(Gen& gen, std::uint64_t bound) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = gen();
  } while (x >= limit);
  return x % bound;
}

// Standard normal via Box-Muller (one variate per call; the pair's sine half is dropped).
template <class Gen>
double standard_normal(Gen& gen) {
  double u1;
  do {
    u1 = uniform01(gen);
  } while (u1 <= 0.0);
  const double u2 = uniform01(gen);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

template <class T, class Gen>
void shuffle(std::span<T> items, Gen& gen) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_below(gen, i));
    using std::swap;
    swap(items[i - 1], items[j]);
  }
}

}  // namespace fairrank
