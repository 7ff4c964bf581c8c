#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace emonext {

// Counter-based splittable RNG (splitmix64 core). A stream is identified by
// the sequence of keys it was constructed with, so per-(seed, epoch, index)
// streams are reproducible and independent of scheduling.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(mix_key(0x9E3779B97F4A7C15ULL, seed)) {}

    Rng(std::initializer_list<uint64_t> keys) : state_(0x9E3779B97F4A7C15ULL) {
        for (uint64_t k : keys) state_ = mix_key(state_, k);
    }

    Rng split(uint64_t key) const { return Rng(mix_key(state_, key), 0); }

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    int64_t uniform_int(int64_t n) {
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

    // standard normal via Box-Muller (no caching, fully deterministic)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

  private:
    Rng(uint64_t raw_state, int) : state_(raw_state) {}

    static uint64_t mix_key(uint64_t state, uint64_t key) {
        uint64_t z = state ^ (key + 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    uint64_t state_;
};

}  // namespace emonext
