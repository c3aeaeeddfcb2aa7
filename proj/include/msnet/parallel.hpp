#pragma once

#include <cstdint>
#include <functional>

namespace msnet {

/// Worker cap for compute kernels. Defaults to MSNET_THREADS when set, else
/// the hardware concurrency.
int num_threads();
void set_num_threads(int n);

/// Splits [0, n) into at most num_threads() contiguous chunks and runs
/// fn(begin, end) on each. Every index is processed by exactly one worker, so
/// results are independent of scheduling as long as fn writes disjoint data.
/// Runs inline when n < 2 * min_chunk or only one worker is allowed.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn,
                  std::int64_t min_chunk = 1);

}  // namespace msnet
