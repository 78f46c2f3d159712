#pragma once

#include <cstddef>
#include <functional>

namespace condvid {

/// Worker count from CONDVID_THREADS. Unset means hardware concurrency;
/// 0 or 1 means run inline on the calling thread.
std::size_t thread_budget();

/// Overrides the environment for the current process (tests use this).
void set_thread_budget(std::size_t threads);

/// Runs fn(i) for i in [0, n). Each index is processed entirely by one
/// worker, so per-index results are independent of the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace condvid
