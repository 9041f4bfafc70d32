#pragma once

#include <cstdint>

namespace poissonnet {

// Deterministic 64-bit generator (splitmix64). We draw uniforms ourselves
// instead of going through std:: distributions, whose output is
// implementation-defined; fixed seed must mean fixed stream everywhere.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform double in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [lo, hi], inclusive
    int uniform_int(int lo, int hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t x;
        do { x = next_u64(); } while (x >= limit);
        return lo + static_cast<int>(x % span);
    }

    // derived stream for sub-tasks (per-sample seeds etc.)
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t tag) {
        Rng r(seed ^ (tag * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL));
        return r.next_u64();
    }

    Rng fork(std::uint64_t tag) { return Rng(mix(state_, tag)); }

private:
    std::uint64_t state_;
};

} // namespace poissonnet
