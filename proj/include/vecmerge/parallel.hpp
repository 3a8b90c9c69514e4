// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>

namespace vecmerge {

/// Upper bound on worker threads used by element-parallel kernels and the
/// bench's seed pool. Defaults to the hardware concurrency.
void set_thread_count(std::size_t count);
std::size_t thread_count();

/// Splits [0, n) into contiguous ranges and calls `body(begin, end)` for each,
/// possibly on several threads. Ranges below `grain` elements are not split.
/// Callers must make every element's result independent of the partition.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body,
                  std::size_t grain = std::size_t{1} << 16);

/// Runs `task(i)` for i in [0, n) on up to `thread_count()` workers.
void parallel_tasks(std::size_t n, const std::function<void(std::size_t)>& task);

}  // namespace vecmerge
