#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <string_view>
#include <vector>

namespace knnfuse {

// splitmix64 finalizer. Used both as the PRNG step and as the mixing
// function for seeded feature hashing, so that every derived stream is a
// pure function of the inputs and stable across runs and platforms.
constexpr uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr uint64_t mix64(uint64_t a, uint64_t b) {
  return mix64(a ^ mix64(b));
}

constexpr uint64_t mix64(uint64_t a, uint64_t b, uint64_t c) {
  return mix64(mix64(a, b), c);
}

// FNV-1a over bytes; stable string hashing for feature hashes and
// fingerprints.
constexpr uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a_bytes(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Map a 64-bit word to a double in [0, 1).
constexpr double u64_to_unit(uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// Map a 64-bit word to a double in [-1, 1).
constexpr double u64_to_signed_unit(uint64_t x) {
  return u64_to_unit(x) * 2.0 - 1.0;
}

// Minimal deterministic PRNG (splitmix64 stream). Deliberately not
// std::mt19937 + std::*_distribution: those are implementation-defined, and
// pinned golden values must not move with the standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  // Unbiased integer in [0, n). n must be > 0.
  uint64_t next_below(uint64_t n) {
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next();
      if (r >= threshold) return r % n;
    }
  }

  double uniform() { return u64_to_unit(next()); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    // Box-Muller; one value per call keeps the stream position predictable.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Fisher-Yates; returns a shuffled copy of 0..n-1.
  std::vector<size_t> permutation(size_t n) {
    std::vector<size_t> p(n);
    for (size_t i = 0; i < n; ++i) p[i] = i;
    for (size_t i = n; i > 1; --i) {
      size_t j = static_cast<size_t>(next_below(i));
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

 private:
  uint64_t state_;
};

}  // namespace knnfuse
