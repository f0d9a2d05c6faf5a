// SPDX-License-Identifier: Apache-2.0
#include "nilmformer/runtime.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace nilm {

void configure_allocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_MAX, 0);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 512 << 20);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace nilm
