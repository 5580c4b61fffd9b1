#pragma once

#include <cstddef>
#include <functional>

namespace cvlift {

// Global cap on worker threads (0 = hardware concurrency).
void set_max_threads(unsigned k);
unsigned max_threads();

// Runs fn(begin, end) on contiguous index chunks, one chunk per worker.
// Chunking is deterministic but results must not depend on it; all
// per-index state (RNG streams, outputs) is owned by the index.
void parallel_chunks(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

} // namespace cvlift
