#pragma once

#include <cstddef>
#include <functional>

namespace dpo {

/// Worker cap: DPO_THREADS if set and positive, else hardware concurrency.
unsigned worker_count();

/// Runs fn(i) for i in [0, n). Each index is handled by exactly one worker;
/// callers write into per-index slots and reduce in index order afterwards.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace dpo
