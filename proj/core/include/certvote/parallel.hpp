#pragma once

#include <cstddef>
#include <functional>

namespace certvote {

// Worker count: hardware concurrency capped by the CERTVOTE_THREADS
// environment variable (values < 1 mean single-threaded).
std::size_t worker_count();

// Runs body(i) for i in [0, count). Work items must be independent; callers
// that need randomness derive a per-index stream so results are
// schedule-independent. Exceptions from workers are rethrown on the caller.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace certvote
