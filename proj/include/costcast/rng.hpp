#pragma once

#include <cstdint>
#include <random>

namespace costcast {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to derive independent streams from (seed, index).
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream,
                                    std::uint64_t salt = 0) {
  return mix_seed(mix_seed(seed ^ mix_seed(salt)) + stream);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t salt = 0) {
  return Rng(derive_seed(seed, stream, salt));
}

// Uniform integer in [0, bound) by rejection, independent of the standard
// library's distribution implementation.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t bound) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return v % bound;
}

inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace costcast
