// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "metaland/rng.hpp"

using metaland::Rng;
using metaland::RngStream;

TEST_CASE("identical seeds give identical streams") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("different stream forks are decorrelated") {
  Rng a = Rng::from_stream(7, RngStream::kClassPool);
  Rng b = Rng::from_stream(7, RngStream::kTrainEpisodes);
  int equal = 0;
  for (int i = 0; i < 64; ++i) {
    if (a.next_u64() == b.next_u64()) ++equal;
  }
  CHECK(equal == 0);
}

TEST_CASE("path words matter") {
  Rng a = Rng::from_stream(7, RngStream::kTrainEpisodes, {0, 1});
  Rng b = Rng::from_stream(7, RngStream::kTrainEpisodes, {1, 0});
  CHECK(a.next_u64() != b.next_u64());
}

TEST_CASE("uniform stays in [0,1) with sane moments") {
  Rng rng(3);
  double sum = 0.0, sumsq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    sum += u;
    sumsq += u * u;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  CHECK(std::abs(mean - 0.5) < 0.01);
  CHECK(std::abs(var - 1.0 / 12.0) < 0.01);
}

TEST_CASE("normal has roughly unit variance") {
  Rng rng(4);
  double sum = 0.0, sumsq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sumsq += x * x;
  }
  const double mean = sum / n;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(sumsq / n - mean * mean - 1.0) < 0.03);
}

TEST_CASE("uniform_int covers the range") {
  Rng rng(5);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto v = rng.uniform_int(7);
    CHECK(v < 7);
    seen.insert(v);
  }
  CHECK(seen.size() == 7);
}

TEST_CASE("sample_without_replacement yields distinct indices") {
  Rng rng(6);
  for (int round = 0; round < 50; ++round) {
    const auto picks = rng.sample_without_replacement(20, 5);
    CHECK(picks.size() == 5);
    std::set<int> s(picks.begin(), picks.end());
    CHECK(s.size() == 5);
    for (int p : picks) {
      CHECK(p >= 0);
      CHECK(p < 20);
    }
  }
  CHECK_THROWS(rng.sample_without_replacement(3, 4));
}
