#pragma once

// Bounded worker pool for embarrassingly parallel index loops. Results must be
// written to slots indexed by the loop variable so output is independent of
// scheduling; everything in this codebase follows that rule.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace ptleak {

// Worker count resolution: explicit request > PTLEAK_WORKERS env var >
// hardware concurrency. Always at least 1.
inline int resolve_workers(int requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("PTLEAK_WORKERS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(i) for i in [0, n). The first exception thrown by any worker is
// rethrown on the calling thread after all workers join.
inline void parallel_for(size_t n, int workers,
                         const std::function<void(size_t)>& fn) {
  workers = resolve_workers(workers);
  if (n == 0) return;
  if (workers == 1 || n == 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  size_t thread_count = std::min<size_t>(static_cast<size_t>(workers), n);
  std::vector<std::thread> pool;
  pool.reserve(thread_count);
  for (size_t t = 0; t < thread_count; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        size_t i = next.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          failed.store(true);
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace ptleak
