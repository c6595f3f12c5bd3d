#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace nsat {

// All randomness in a run flows from one root seed through named substreams
// ("data", "init", "augment", ...), so changing how one consumer draws does
// not perturb the others.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_name(std::string_view name) {
  // FNV-1a
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::mt19937_64 substream(std::uint64_t root_seed, std::string_view name) {
  return std::mt19937_64(splitmix64(root_seed ^ hash_name(name)));
}

inline std::mt19937_64 substream(std::uint64_t root_seed, std::string_view name,
                                 std::uint64_t index) {
  return std::mt19937_64(splitmix64(splitmix64(root_seed ^ hash_name(name)) + index));
}

// std::*_distribution is implementation-defined; these are not, which keeps
// generated datasets identical across standard libraries.
inline double uniform_unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_in(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform_unit(rng);
}

inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
  // Rejection sampling, no modulo bias.
  const std::uint64_t limit = n * ((~0ULL) / n);
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

inline double normal(std::mt19937_64& rng) {
  // Box-Muller; one value per call keeps draw counts predictable.
  double u1 = uniform_unit(rng);
  double u2 = uniform_unit(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
}

}  // namespace nsat
