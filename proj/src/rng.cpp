#include "cvlift/rng.hpp"

#include <cmath>

namespace cvlift {

namespace {

constexpr uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr uint32_t kWeyl0 = 0x9E3779B9u;
constexpr uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(uint32_t a, uint32_t b, uint32_t& hi, uint32_t& lo) {
    uint64_t p = static_cast<uint64_t>(a) * b;
    hi = static_cast<uint32_t>(p >> 32);
    lo = static_cast<uint32_t>(p);
}

} // namespace

void Philox4x32::round10(uint32_t k0, uint32_t k1, uint32_t c[4]) {
    for (int r = 0; r < 10; ++r) {
        uint32_t hi0, lo0, hi1, lo1;
        mulhilo(kPhiloxM0, c[0], hi0, lo0);
        mulhilo(kPhiloxM1, c[2], hi1, lo1);
        uint32_t n0 = hi1 ^ c[1] ^ k0;
        uint32_t n1 = lo1;
        uint32_t n2 = hi0 ^ c[3] ^ k1;
        uint32_t n3 = lo0;
        c[0] = n0;
        c[1] = n1;
        c[2] = n2;
        c[3] = n3;
        k0 += kWeyl0;
        k1 += kWeyl1;
    }
}

uint64_t mix_seed(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

StreamRng::StreamRng(uint64_t master_seed, uint64_t stream_id)
    : seed_(master_seed), stream_(stream_id) {}

void StreamRng::refill() {
    uint32_t c[4] = {
        static_cast<uint32_t>(block_),
        static_cast<uint32_t>(block_ >> 32),
        static_cast<uint32_t>(stream_),
        static_cast<uint32_t>(stream_ >> 32),
    };
    // fold the high half of the seed into the key via one mixing step so
    // full 64-bit seeds produce distinct keys
    uint64_t k = mix_seed(seed_);
    Philox4x32::round10(static_cast<uint32_t>(k), static_cast<uint32_t>(k >> 32), c);
    ++block_;

    auto to_unit = [](uint32_t hi, uint32_t lo) {
        uint64_t bits = (static_cast<uint64_t>(hi) << 32) | lo;
        return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
    };
    buf_[0] = to_unit(c[0], c[1]);
    buf_[1] = to_unit(c[2], c[3]);
    avail_ = 2;
}

double StreamRng::uniform() {
    if (avail_ == 0) refill();
    return buf_[--avail_];
}

double StreamRng::normal() {
    if (have_normal_) {
        have_normal_ = false;
        return cached_normal_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    cached_normal_ = r * std::sin(a);
    have_normal_ = true;
    return r * std::cos(a);
}

void StreamRng::seek(uint64_t uniform_index) {
    block_ = uniform_index / 2;
    avail_ = 0;
    have_normal_ = false;
    if (uniform_index % 2 != 0) {
        refill();
        avail_ = 1; // consume the first uniform of the block
    }
}

} // namespace cvlift
