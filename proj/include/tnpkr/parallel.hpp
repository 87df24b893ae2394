#pragma once

#include <cstdint>
#include <utility>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace tnpkr::par {

// Global switch between OpenMP kernels and the serial path. The work
// partitioning is fixed (independent output ranges), so results are identical
// either way; tests assert exactly that.
bool enabled();
void set_enabled(bool on);
int num_threads();

// Minimum iterations before a loop goes parallel; below this the OpenMP
// dispatch overhead dominates.
inline constexpr int64_t kGrain = 512;

template <class F>
void parallel_for(int64_t n, F&& f) {
#ifdef _OPENMP
  if (enabled() && n >= kGrain && num_threads() > 1) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) f(i);
    return;
  }
#endif
  for (int64_t i = 0; i < n; ++i) f(i);
}

// Invokes f(begin, end) on fixed-size chunks. Chunk boundaries do not depend
// on the thread count, so per-chunk computations are bitwise reproducible.
template <class F>
void parallel_for_chunked(int64_t n, int64_t chunk, F&& f) {
  if (chunk < 1) chunk = 1;
  const int64_t n_chunks = (n + chunk - 1) / chunk;
#ifdef _OPENMP
  if (enabled() && n_chunks > 1 && num_threads() > 1) {
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < n_chunks; ++c) {
      const int64_t b = c * chunk;
      const int64_t e = b + chunk < n ? b + chunk : n;
      f(b, e);
    }
    return;
  }
#endif
  for (int64_t c = 0; c < n_chunks; ++c) {
    const int64_t b = c * chunk;
    const int64_t e = b + chunk < n ? b + chunk : n;
    f(b, e);
  }
}

}  // namespace tnpkr::par
