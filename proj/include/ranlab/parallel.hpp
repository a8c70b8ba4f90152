#pragma once

#include <cstddef>
#include <functional>

namespace ranlab {

/// Runs fn(0..n-1) on up to `jobs` threads (0 or 1 = inline). Work items are
/// handed out in index order; if any call throws, the exception from the
/// lowest failing index is rethrown after all workers stop.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace ranlab
