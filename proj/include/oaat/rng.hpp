#pragma once

// Deterministic RNG fan-out. A root seed plus a stream name and up to three
// counters (epoch, batch, sample) hash to an independent engine seed, so any
// piece of randomness is reproducible in isolation. Streams are stateless
// across epochs: a resumed run draws exactly the sequence the uninterrupted
// run would have drawn, and nothing about the RNG needs checkpointing.
//
// Variates are scaled by hand from raw 64-bit draws instead of going through
// std::uniform_real_distribution, whose output is implementation-defined.

#include <cstdint>
#include <random>
#include <string_view>

namespace oaat {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t stream_seed(uint64_t root, std::string_view name, uint64_t a = 0,
                            uint64_t b = 0, uint64_t c = 0) {
  uint64_t h = splitmix64(root ^ fnv1a64(name));
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ (b << 1 | 1));
  h = splitmix64(h ^ (c << 2 | 2));
  return h;
}

inline std::mt19937_64 make_stream(uint64_t root, std::string_view name, uint64_t a = 0,
                                   uint64_t b = 0, uint64_t c = 0) {
  return std::mt19937_64(stream_seed(root, name, a, b, c));
}

// Uniform in [0,1).
inline double uniform01(std::mt19937_64& g) {
  return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

// Uniform in [lo,hi).
inline double uniform(std::mt19937_64& g, double lo, double hi) {
  return lo + (hi - lo) * uniform01(g);
}

inline int uniform_int(std::mt19937_64& g, int n) {  // [0, n)
  return static_cast<int>(g() % static_cast<uint64_t>(n));
}

// Standard normal via Box-Muller (one value per call; deterministic draw order).
inline double normal01(std::mt19937_64& g) {
  double u1 = 0;
  do {
    u1 = uniform01(g);
  } while (u1 <= 0.0);
  double u2 = uniform01(g);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
}

}  // namespace oaat
