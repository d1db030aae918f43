#pragma once

#include <cstddef>
#include <functional>

namespace rforge {

// Worker count: RESAMPLE_FORGE_THREADS when set, otherwise logical cores.
std::size_t worker_count();

// Runs body(i) for i in [0, count) on up to worker_count() threads. Each index
// runs exactly once; the first exception thrown is rethrown on the caller.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace rforge
