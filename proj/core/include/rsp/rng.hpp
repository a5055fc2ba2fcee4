#pragma once

#include <cstdint>
#include <string_view>

namespace rsp {

/// Counter-based random generator.
///
/// The n-th draw of a stream is a pure function of (seed, stream, n), so any
/// draw can be reproduced without replaying the ones before it and streams
/// handed to different workers never interact. The mixing function is the
/// SplitMix64 finalizer applied to a Weyl sequence keyed by seed and stream.
/// Derived distributions below are implemented here rather than taken from
/// <random> so that results are bit-identical across standard libraries.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
        : key_(mix(seed ^ mix(stream + 0x9E3779B97F4A7C15ULL))) {}

    /// Raw 64-bit value at the current counter; advances the counter.
    std::uint64_t next() noexcept { return at(counter_++); }

    /// Raw 64-bit value at an explicit counter; does not advance.
    std::uint64_t at(std::uint64_t counter) const noexcept {
        return mix(key_ + (counter + 1) * 0x9E3779B97F4A7C15ULL);
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, bound). bound must be positive.
    std::uint64_t below(std::uint64_t bound) noexcept;

    /// Standard normal variate (Box-Muller, one value per two draws).
    double normal() noexcept;

    /// Fair coin mapped to +1 / -1.
    int sign() noexcept { return (next() >> 63) ? 1 : -1; }

    std::uint64_t counter() const noexcept { return counter_; }

    static std::uint64_t mix(std::uint64_t z) noexcept {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

/// Derives a child seed from a parent seed, a label, and an index.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label, std::uint64_t index = 0) noexcept;

}  // namespace rsp
