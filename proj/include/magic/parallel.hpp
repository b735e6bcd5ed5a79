#pragma once

#include <cstdint>
#include <functional>

namespace magic {

/// Worker count: MAGIC_THREADS when set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
int worker_count();

/// Runs fn(i) for i in [0, n). Work items are claimed dynamically, so callers
/// must make each item's result independent of which thread runs it. The
/// first exception thrown by any item is rethrown after all workers stop.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn, int workers = 0);

}  // namespace magic
