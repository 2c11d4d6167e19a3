// Copyright (c) 2026 The metaland authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace metaland {

inline int resolve_jobs(int jobs) {
  if (jobs > 0) return jobs;
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

// Run fn(i) for i in [0, n) on up to `jobs` threads. Work items must be
// independent; callers write into pre-sized slots and reduce in index order
// afterwards, so results do not depend on the job count. The first exception
// thrown by any worker is rethrown.
inline void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  jobs = std::min(resolve_jobs(jobs), n);
  if (n <= 0) return;
  if (jobs <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  std::mutex err_mutex;
  std::exception_ptr first_error;
  for (int w = 0; w < jobs; ++w) {
    workers.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += jobs) fn(i);
      } catch (...) {
        const std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace metaland
