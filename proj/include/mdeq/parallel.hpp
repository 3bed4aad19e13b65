#pragma once

#include <cstddef>
#include <functional>

namespace mdeq {

/// Worker cap: DEQ_THREADS if set to a positive integer, else the hardware
/// concurrency (at least 1).
std::size_t worker_count();

/// Runs fn(0..n-1) on up to worker_count() threads. Each index must write
/// only its own output slot; the first exception is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace mdeq
