#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace stalemp {

/// Worker cap from STALEMP_THREADS (default 1). Read once per process.
inline std::size_t worker_threads() {
  static const std::size_t n = [] {
    if (const char* env = std::getenv("STALEMP_THREADS")) {
      try {
        const long v = std::stol(env);
        if (v >= 1) return static_cast<std::size_t>(v);
      } catch (...) {
      }
    }
    return std::size_t{1};
  }();
  return n;
}

/// Runs body(i) for i in [0, n). Iterations must write disjoint outputs; the
/// result does not depend on the thread count.
template <typename Body>
void parallel_for(std::size_t n, Body&& body, std::size_t min_chunk = 256) {
  const std::size_t workers = std::min(worker_threads(), n / std::max<std::size_t>(min_chunk, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t b = w * chunk, e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&body, b, e] {
      for (std::size_t i = b; i < e; ++i) body(i);
    });
  }
}

}  // namespace stalemp
