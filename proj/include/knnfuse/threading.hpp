#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace knnfuse {

// Worker cap for read-only parallel paths (evaluation, batched queries,
// oracle scans). KNNFUSE_THREADS=0 or unset means "auto" (hardware
// concurrency); 1 forces sequential execution.
inline unsigned knnfuse_threads() {
  const char* env = std::getenv("KNNFUSE_THREADS");
  long v = 0;
  if (env && *env) {
    v = std::strtol(env, nullptr, 10);
    if (v < 0) v = 0;
  }
  if (v == 0) {
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
  }
  return static_cast<unsigned>(v);
}

namespace detail {
inline thread_local bool inside_parallel_for = false;
}

// Runs fn(i) for i in [0, n). Results must be written to slots indexed by i
// so the output is independent of scheduling. Falls back to a plain loop
// when only one worker is allowed, the range is small, or the call is nested
// inside another parallel_for.
template <typename Fn>
void parallel_for(size_t n, Fn&& fn, size_t min_per_thread = 8) {
  unsigned workers = knnfuse_threads();
  if (detail::inside_parallel_for || workers <= 1 || n < 2 * min_per_thread) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  workers = std::min<size_t>(workers, (n + min_per_thread - 1) / min_per_thread);
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      detail::inside_parallel_for = true;
      for (;;) {
        size_t i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace knnfuse
