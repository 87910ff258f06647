#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace xbsde {

/// Philox4x32-10 counter-based generator. A stream is identified by
/// (seed, stream): the 64-bit seed is the Philox key, the stream id is
/// carried in the upper half of the 128-bit counter. Streams never
/// overlap, blocks are independent of evaluation order, and the same
/// (seed, stream) always reproduces the same sequence.
struct Philox4x32 {
    static constexpr std::uint32_t kMul0 = 0xD2511F53u;
    static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

    static std::array<std::uint32_t, 4> block(std::uint64_t key,
                                              std::uint64_t counter,
                                              std::uint64_t stream) {
        std::uint32_t c0 = static_cast<std::uint32_t>(counter);
        std::uint32_t c1 = static_cast<std::uint32_t>(counter >> 32);
        std::uint32_t c2 = static_cast<std::uint32_t>(stream);
        std::uint32_t c3 = static_cast<std::uint32_t>(stream >> 32);
        std::uint32_t k0 = static_cast<std::uint32_t>(key);
        std::uint32_t k1 = static_cast<std::uint32_t>(key >> 32);
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * c0;
            const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * c2;
            const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
            const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
            const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
            const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
            c0 = hi1 ^ c1 ^ k0;
            c1 = lo1;
            c2 = hi0 ^ c3 ^ k1;
            c3 = lo0;
            k0 += kWeyl0;
            k1 += kWeyl1;
        }
        return {c0, c1, c2, c3};
    }
};

/// Stream identifiers for the fixed consumers of randomness. Keeping
/// consumers on disjoint streams makes results independent of which
/// other components draw (e.g. a discrete and a continuous solver with
/// the same seed see identical Brownian increments).
namespace rng_stream {
constexpr std::uint64_t kParamInit = 0;
constexpr std::uint64_t kNetworkInit = 1;
constexpr std::uint64_t kIncrements = 2;
constexpr std::uint64_t kOracleBase = 1'000'000; // + sample index
} // namespace rng_stream

/// Deterministic random stream: uniforms from Philox blocks, normals via
/// the Box-Muller transform (pairs cached).
class RngState {
public:
    explicit RngState(std::uint64_t seed, std::uint64_t stream = 0)
        : seed_(seed), stream_(stream) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

    std::uint64_t next_u64() {
        if (word_index_ >= 4) refill();
        const std::uint64_t lo = buffer_[word_index_];
        const std::uint64_t hi = buffer_[word_index_ + 1];
        word_index_ += 2;
        return lo | (hi << 32);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double next_normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        // u1 in (0,1] so the log is finite.
        const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
        const double u2 = next_uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        cached_ = radius * std::sin(angle);
        have_cached_ = true;
        return radius * std::cos(angle);
    }

    void fill_normal(std::span<double> out, double stddev = 1.0) {
        for (double& v : out) v = stddev * next_normal();
    }

    void fill_uniform(std::span<double> out, double lo, double hi) {
        for (double& v : out) v = lo + (hi - lo) * next_uniform();
    }

private:
    void refill() {
        buffer_ = Philox4x32::block(seed_, counter_++, stream_);
        word_index_ = 0;
    }

    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
    std::array<std::uint32_t, 4> buffer_{};
    int word_index_ = 4;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

} // namespace xbsde
