#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace assetformer {

// Portable helpers on top of mt19937_64; std distributions are avoided so
// that generated streams are identical across standard libraries.

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Uniform integer in [lo, hi], inclusive.
inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  uint64_t span = uint64_t(hi - lo) + 1;
  return lo + int(rng() % span);
}

// Uniform double in [0, 1).
inline double uniform_double(std::mt19937_64& rng) {
  return double(rng() >> 11) * 0x1.0p-53;
}

inline bool bernoulli(std::mt19937_64& rng, double p) {
  return uniform_double(rng) < p;
}

// Standard normal via Box-Muller (one value per call, second discarded).
inline double normal(std::mt19937_64& rng) {
  double u1 = uniform_double(rng);
  double u2 = uniform_double(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

template <typename T>
void shuffle(std::mt19937_64& rng, std::vector<T>& v) {
  for (size_t i = v.size(); i > 1; --i) {
    size_t j = rng() % i;
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace assetformer
