// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace nilm {

// Keeps large freed blocks in the heap instead of returning them to the OS.
// Training allocates and frees tens of MB per step; with the default glibc
// thresholds every such block is a fresh mmap and is page-faulted in again.
// Idempotent; a no-op on non-glibc platforms.
void configure_allocator();

}  // namespace nilm
