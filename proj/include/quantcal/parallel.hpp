#pragma once

#include <cstddef>
#include <functional>

namespace quantcal {

// Worker cap from QUANTCAL_THREADS (0 or unset = hardware concurrency).
std::size_t thread_budget();

// Runs fn(0..n-1), possibly on several threads; results must be written to
// per-index slots so the outcome is order-independent. Exceptions from workers
// are rethrown on the caller thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

} // namespace quantcal
