#pragma once

#include <cstddef>
#include <functional>

namespace frag4d {

/// Pool size: FRAG4D_WORKERS if set and positive, else the logical core count.
std::size_t worker_count();

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Callers keep results
/// deterministic by writing only to slot i. If any task throws, the exception
/// of the lowest failing index is rethrown after all tasks finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  std::size_t workers = worker_count());

}  // namespace frag4d
