#pragma once

#include <cstddef>
#include <functional>

namespace madan {

// Process-wide worker pool. parallel_for partitions [0, n) into contiguous
// chunks, one per worker; every chunk writes disjoint outputs only, so the
// result is bit-identical for any thread count (reductions are never split
// across chunk boundaries by callers).
void set_thread_count(int n);   // 0 = hardware concurrency
int thread_count();

void parallel_for(std::size_t n, const std::function<void(std::size_t begin, std::size_t end)>& fn);

} // namespace madan
