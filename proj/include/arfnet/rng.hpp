// Copyright 2026 the arfnet authors
// SPDX-License-Identifier: Apache-2.0

/**
 * @file rng.hpp
 * @brief Counter-based splittable random streams.
 *
 * Every draw is a pure function of (seed, stream id, draw index), so any
 * stream can be recreated independently of every other stream. Training,
 * validation, evaluation and data generation each own disjoint streams and
 * stay reproducible no matter how the work is ordered.
 */

#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace arfnet {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// FNV-1a, used to derive stream ids from names.
inline std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x00000100000001B3ULL;
  }
  return h;
}

inline std::uint64_t stream_id(std::string_view name, std::uint64_t a = 0, std::uint64_t b = 0) {
  return splitmix64(hash_name(name) ^ splitmix64(a ^ splitmix64(b)));
}

class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

  RandomStream(std::uint64_t seed, std::string_view name, std::uint64_t a = 0, std::uint64_t b = 0)
      : RandomStream(seed, stream_id(name, a, b)) {}

  std::uint64_t next_u64() { return splitmix64(seed_ ^ splitmix64(stream_ ^ splitmix64(counter_++))); }

  /// Uniform in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  int uniform_int(int lo, int hi_inclusive) {
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
  }

  /// Standard normal via Box-Muller (no state cached between calls).
  double normal() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  /// First k entries of a random permutation of 0..n-1 (partial Fisher-Yates).
  std::vector<int> choose_distinct(int n, int k) {
    std::vector<int> pool(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
    for (int i = 0; i < k; ++i) {
      const int j = i + static_cast<int>(below(static_cast<std::uint64_t>(n - i)));
      std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    pool.resize(static_cast<size_t>(k));
    return pool;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

}  // namespace arfnet
