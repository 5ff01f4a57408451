#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace mvd {

// Worker-thread cap from MVDLAB_THREADS; defaults to 1 (fully deterministic
// sequential execution).
inline int worker_threads() {
  const char* env = std::getenv("MVDLAB_THREADS");
  if (env == nullptr) return 1;
  const int n = std::atoi(env);
  return n < 1 ? 1 : n;
}

// Applies fn(i) for i in [0, n). Each index writes only its own preallocated
// output slot, so results are bit-identical regardless of the thread count.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
  const int threads = worker_threads();
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  const int used = threads < n ? threads : n;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(used));
  for (int t = 0; t < used; ++t) {
    pool.emplace_back([&, t]() {
      for (int i = t; i < n; i += used) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace mvd
