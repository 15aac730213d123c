#pragma once

#include <cstddef>
#include <functional>

namespace parbeam {

/// Worker count used by parallel loops. 0 means hardware concurrency.
/// Initialised from PARBEAM_THREADS on first use.
int thread_count();
void set_thread_count(int n);

/// Runs body(i) for i in [begin, end) over static contiguous chunks. Each
/// index is handled by exactly one worker, so callers that write only to
/// slot i get results independent of the thread count. Nested calls from a
/// worker run serially.
void parallel_for(std::size_t begin, std::size_t end, const std::function<void(std::size_t)>& body);

} // namespace parbeam
