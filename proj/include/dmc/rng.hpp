#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace dmc {

// SplitMix64 finalizer. Used to derive independent stream seeds from a base
// seed, so per-row / per-batch generators never share state.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
  return mix64(base ^ mix64(stream + 0x517cc1b727220a95ull));
}

inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b) {
  return derive_seed(derive_seed(base, a), b);
}

// Deterministic RNG. mt19937_64 with fixed output transforms (never
// std::uniform_*_distribution, whose results vary across standard libraries).
// Streams are bit-reproducible for a given seed on any platform.
struct Rng {
  std::mt19937_64 engine;
  double cached_normal = 0.0;
  bool has_cached = false;

  explicit Rng(uint64_t seed) : engine(seed) {}

  uint64_t next_u64() { return engine(); }

  // Uniform in [0, 1), 53-bit mantissa.
  double uniform() { return static_cast<double>(engine() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform index in [0, n), n >= 1. Multiply-high map, bias < 2^-64.
  uint64_t index(uint64_t n) {
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(engine()) * n) >> 64);
  }

  // Standard normal via Box-Muller; pairs are cached so consecutive calls
  // consume engine outputs deterministically.
  double normal() {
    if (has_cached) {
      has_cached = false;
      return cached_normal;
    }
    double u1 = uniform();
    if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    cached_normal = r * std::sin(a);
    has_cached = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }
};

}  // namespace dmc
