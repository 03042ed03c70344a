#pragma once

#include <algorithm>
#include <cstdint>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace celldino {

inline int& num_threads_ref() {
  static int n = []() {
    const unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::min(4u, hw == 0 ? 1u : hw));
  }();
  return n;
}

inline void set_num_threads(int n) { num_threads_ref() = n < 1 ? 1 : n; }
inline int num_threads() { return num_threads_ref(); }

// Parallel loop over [0, n). Work is split into fixed-size chunks so the
// per-element computation path does not depend on the thread count; the body
// must only write to locations owned by its index. Reductions that need a
// fixed order are left sequential by their callers.
template <class Body>
inline void parallel_for(std::int64_t n, const Body& body,
                         std::int64_t grain = 1) {
#ifdef _OPENMP
  const int threads = num_threads();
  if (threads > 1 && n > grain) {
    const std::int64_t chunk = std::max<std::int64_t>(grain, 1);
    const std::int64_t n_chunks = (n + chunk - 1) / chunk;
#pragma omp parallel for schedule(static) num_threads(threads)
    for (std::int64_t c = 0; c < n_chunks; ++c) {
      const std::int64_t lo = c * chunk;
      const std::int64_t hi = std::min(n, lo + chunk);
      for (std::int64_t i = lo; i < hi; ++i) body(i);
    }
    return;
  }
#endif
  for (std::int64_t i = 0; i < n; ++i) body(i);
}

}  // namespace celldino
