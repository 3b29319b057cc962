#pragma once

#include <cstddef>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace omt {

// Runs fn(worker_id, i) for every i in [0, n) using a static contiguous
// partition of the index range across workers.  The index -> worker map
// depends only on (n, workers), so any per-index output is reproducible for a
// fixed worker count, and reductions that combine per-worker partials in
// worker order are deterministic as well.  With one worker everything runs
// inline on the calling thread.  The first exception thrown by any worker is
// rethrown after all workers have joined.
inline void parallel_for(std::size_t n, int workers,
                         const std::function<void(int, std::size_t)>& fn) {
  if (n == 0) return;
  int w = workers < 1 ? 1 : workers;
  if (static_cast<std::size_t>(w) > n) w = static_cast<int>(n);
  if (w == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(0, i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(w));
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(w));
  for (int t = 0; t < w; ++t) {
    const std::size_t lo = n * static_cast<std::size_t>(t) / static_cast<std::size_t>(w);
    const std::size_t hi = n * static_cast<std::size_t>(t + 1) / static_cast<std::size_t>(w);
    threads.emplace_back([&fn, &errors, t, lo, hi] {
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(t, i);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace omt
