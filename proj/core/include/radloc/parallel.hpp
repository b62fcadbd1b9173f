#pragma once

#include <cstddef>
#include <functional>

namespace radloc {

/// Worker threads used by batch operations; 1 (serial) by default.
void set_thread_count(int n);
int thread_count();

/// Runs fn(i) for i in [0, n). Each index is processed exactly once; callers
/// write to disjoint outputs so results do not depend on the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace radloc
