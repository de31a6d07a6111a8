#pragma once

#include <cstddef>
#include <functional>

namespace pmss {

/// Kernel-level worker cap from PMSS_THREADS (default 1). Work is always
/// partitioned per batch image, so results do not depend on this value.
std::size_t thread_count();
void set_thread_count(std::size_t n);

/// Runs fn(i) for i in [0, n), across up to thread_count() threads.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace pmss
