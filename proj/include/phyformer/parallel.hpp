#pragma once

#include <cstddef>
#include <functional>

namespace phyformer {

// Calls fn(i) for every i in [0, n) on up to `n_threads` workers (0 picks the
// hardware concurrency). The first exception thrown by any call is rethrown.
void parallel_for(std::size_t n, std::size_t n_threads, const std::function<void(std::size_t)>& fn);

}  // namespace phyformer
