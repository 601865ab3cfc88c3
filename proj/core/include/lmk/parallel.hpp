#pragma once

#include <cstddef>
#include <functional>

namespace lmk {

/// Process-wide cap on worker threads. 0 means "all available cores".
void set_thread_count(int n);
int thread_count();

/// Runs body(i) for i in [0, n). Work items are claimed dynamically, so the
/// body must write only to slots owned by i; any reduction happens afterwards
/// in index order, which keeps results independent of the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

/// Keeps large freed blocks in the heap instead of returning them to the OS.
/// Training and matching allocate many short-lived multi-megabyte buffers;
/// without this each one costs fresh page faults. No-op outside glibc.
void retain_freed_memory();

}  // namespace lmk
