#pragma once

namespace tdt {

// Keeps freed tensor buffers inside the process heap instead of returning
// them to the OS after every step. No-op outside glibc.
void tune_allocator();

}  // namespace tdt
