#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace mdasr {

// Seeded generator with distribution code written out by hand, so draw
// sequences do not depend on the standard library's distribution classes.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    // [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // (0, 1]; never returns exactly 0.
    double uniform_open_closed() { return 1.0 - uniform(); }

    double normal();

    // Uniform integer in [0, bound), rejection sampled.
    std::size_t below(std::size_t bound);

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::mt19937_64 engine_;
};

// splitmix64 finalizer over (a, b); used to derive per-item seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept;

}  // namespace mdasr
