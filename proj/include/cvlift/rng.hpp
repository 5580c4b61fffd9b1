#pragma once

#include <cstdint>

namespace cvlift {

// Counter-based Philox-4x32-10 generator. Streams are keyed by
// (master seed, stream id), so every path of an ensemble gets an
// independent, reproducible sequence regardless of the order in which
// paths are simulated or which thread runs them.
struct Philox4x32 {
    uint32_t key[2];
    uint32_t ctr[4];

    static void round10(uint32_t k0, uint32_t k1, uint32_t c[4]);
};

class StreamRng {
  public:
    StreamRng(uint64_t master_seed, uint64_t stream_id);

    // uniform on (0,1), never exactly 0 or 1
    double uniform();
    // standard normal (Box-Muller, pairs cached)
    double normal();

    // jump to an absolute draw position; draws are indexed by uniform count
    void seek(uint64_t uniform_index);

    uint64_t master_seed() const { return seed_; }
    uint64_t stream_id() const { return stream_; }

  private:
    void refill();

    uint64_t seed_ = 0;
    uint64_t stream_ = 0;
    uint64_t block_ = 0;   // counter block index
    double buf_[2];
    int avail_ = 0;
    double cached_normal_ = 0.0;
    bool have_normal_ = false;
};

// SplitMix64 step, used for deriving sub-seeds from a master seed.
uint64_t mix_seed(uint64_t x);

} // namespace cvlift
