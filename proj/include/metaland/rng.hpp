// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace metaland {

// Named sub-streams of the experiment master seed. Every consumer of
// randomness forks its own stream, so episode sampling, initialization and
// evaluation never share state and parallel/serial execution draw identical
// numbers.
enum class RngStream : std::uint64_t {
  kClassPool = 1,
  kTrainEpisodes = 2,
  kEvalEpisodes = 3,
  kModelInit = 4,
  kHeadReplace = 5,
  kFinetuneBatches = 6,
  kPowerIteration = 7,
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

// Counter-free seed derivation: hash-combine the master seed with a path of
// 64-bit words. Identical paths give identical generators on every platform.
inline std::uint64_t derive_seed(std::uint64_t master,
                                 std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = detail::splitmix64(master);
  for (std::uint64_t w : path) {
    h = detail::splitmix64(h ^ w);
  }
  return h;
}

// Deterministic generator with explicitly specified distributions.
// std::mt19937_64 is fully standardized; the std:: distributions are not,
// so uniform/normal conversions are spelled out here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(detail::splitmix64(seed)) {
    if (state_ == 0) state_ = 0x9e3779b97f4a7c15ULL;
  }

  static Rng from_stream(std::uint64_t master, RngStream stream,
                         std::initializer_list<std::uint64_t> path = {}) {
    std::uint64_t h =
        detail::splitmix64(master) ^ static_cast<std::uint64_t>(stream);
    for (std::uint64_t w : path) h = detail::splitmix64(h ^ w);
    return Rng(h);
  }

  std::uint64_t next_u64() {
    // xorshift64* core
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545f4914f6cdd1dULL;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }

  // Standard normal via Box-Muller; second value cached.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * std::numbers::pi * u2;
    cached_ = r * std::sin(t);
    have_cached_ = true;
    return r * std::cos(t);
  }

  // Uniform integer in [0, n) via 128-bit multiply (no modulo bias worth
  // caring about at these ranges, and fully deterministic).
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::uniform_int: n must be > 0");
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // First m entries of a seed-deterministic partial Fisher-Yates shuffle of
  // {0, ..., n-1}: m distinct indices in random order.
  std::vector<int> sample_without_replacement(int n, int m) {
    if (m > n) {
      throw std::invalid_argument(
          "Rng::sample_without_replacement: m exceeds population");
    }
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    for (int i = 0; i < m; ++i) {
      const int j =
          i + static_cast<int>(uniform_int(static_cast<std::uint64_t>(n - i)));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(m);
    return idx;
  }

 private:
  std::uint64_t state_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace metaland
