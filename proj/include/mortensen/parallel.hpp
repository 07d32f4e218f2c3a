#pragma once

#include <cstddef>
#include <functional>

namespace mortensen {

/// Worker cap: MORTENSEN_THREADS if set and positive, else the hardware
/// concurrency (at least 1).
std::size_t worker_count();

/// Runs body(begin, end) over contiguous chunks of [0, n) on up to
/// `workers` threads (0 = worker_count()). Exceptions from any chunk are
/// rethrown, lowest chunk first.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body,
                  std::size_t workers = 0);

}  // namespace mortensen
