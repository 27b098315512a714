#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mishape {

/// Keeps large Eigen temporaries on the heap instead of fresh mmap pages.
/// Training allocates and frees multi-megabyte matrices every iteration and
/// the default glibc thresholds turn each of those into page faults.
/// Call once from main(); a no-op outside glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

}  // namespace mishape
