#pragma once

#include <cstdint>
#include <random>

namespace slmprop::nn {

// Portable draws on top of mt19937_64: the standard distributions are implementation-defined,
// these are not, so seeded runs reproduce across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Uniform integer in [lo, hi].
    int64_t uniform_int(int64_t lo, int64_t hi);
    double normal();
    bool bernoulli(double p) { return uniform() < p; }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Derives an independent child seed (splitmix64 finalizer).
uint64_t mix_seed(uint64_t seed, uint64_t salt);

} // namespace slmprop::nn
