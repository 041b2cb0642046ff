// core.hpp — seeds, counter-based random streams, error taxonomy.
//
// Every stochastic operation in the library is a pure function of an
// explicit Seed.  Streams are counter-based: output i of a stream is
// mix64(key + (i+1)*GAMMA), so any draw can be reproduced from (key, i)
// alone and sub-streams can be split off without touching shared state.

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace renn {

// Input fails a shape/domain precondition (dimension mismatch, bad rate...).
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// File or stream could not be read/written or is malformed.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A computation produced or detected a non-finite / degenerate result.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Seed {
    std::uint64_t value = 0;
};

namespace detail {

// SplitMix64 finalizer.  Bijective on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

} // namespace detail

// Deterministic child seed for (parent, id); gives layers, samples and
// trials disjoint random streams.
inline Seed derive_seed(Seed parent, std::uint64_t id) {
    return Seed{detail::mix64(parent.value ^ detail::mix64(id * detail::kGamma + 0x5851F42D4C957F2Dull))};
}

// Deterministic counter-based generator.  Copyable; copies continue
// independently.  stream(id) derives a statistically independent child
// stream, so parallel consumers can be given disjoint streams up front
// and produce the same draws regardless of scheduling.
class CounterRng {
  public:
    explicit CounterRng(Seed seed) : key_(detail::mix64(seed.value ^ detail::kGamma)) {}

    CounterRng stream(std::uint64_t id) const {
        return CounterRng(Seed{key_ ^ detail::mix64(id * detail::kGamma + 0x5851F42D4C957F2Dull)});
    }

    std::uint64_t next_u64() {
        counter_ += detail::kGamma;
        return detail::mix64(key_ + counter_);
    }

    // Uniform in [0, 1): 53 random mantissa bits.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; the paired draw is cached.
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // u1 in (0,1] so the log is finite.
        const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
        const double u2 = next_unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

  private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline bool nearly_equal(double a, double b, double tol) { return std::abs(a - b) <= tol; }

} // namespace renn
