#pragma once

#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace diffseg {

/// Run fn(i) for i in [0, n) across up to max_threads threads (0 = hardware
/// count). Work is split into contiguous index blocks; results must be written
/// to per-index slots so the outcome is independent of the thread count.
/// The lowest-index exception is rethrown after all threads join.
inline void parallel_for(int n, int max_threads, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  unsigned hw = std::thread::hardware_concurrency();
  int threads = max_threads > 0 ? max_threads : static_cast<int>(hw ? hw : 1);
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<size_t>(n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t]() {
      int lo = static_cast<int>(static_cast<int64_t>(n) * t / threads);
      int hi = static_cast<int>(static_cast<int64_t>(n) * (t + 1) / threads);
      for (int i = lo; i < hi; ++i) {
        try {
          fn(i);
        } catch (...) {
          errors[static_cast<size_t>(i)] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace diffseg
