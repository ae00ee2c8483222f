#pragma once

#include <cmath>
#include <cstdint>

#include "stcast/common.hpp"

namespace stcast {

// Counter-based generator (splitmix64). Every draw advances a 64-bit counter
// by a fixed increment, so the stream is reproducible across platforms and
// the full state is two integers. No global state: each consumer owns its Rng.
class Rng {
public:
    struct State {
        std::uint64_t stream = 0;
        std::uint64_t counter = 0;
        bool operator==(const State&) const = default;
    };

    explicit Rng(std::uint64_t seed) : state_{seed, 0} {}
    explicit Rng(State s) : state_(s) {}

    std::uint64_t next_u64() {
        std::uint64_t z = state_.stream + 0x9E3779B97F4A7C15ULL * ++state_.counter;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n). Rejection-free modulo bias is irrelevant at our n.
    std::uint64_t uniform_index(std::uint64_t n) { return n ? next_u64() % n : 0; }

    // Box-Muller without caching the spare draw, so one call always consumes
    // exactly two counter increments.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Derive an independent stream; used to give each consumer its own
    // deterministic sub-generator.
    Rng fork(std::uint64_t stream_id) const {
        Rng mix(state_.stream ^ (0xD1B54A32D192ED03ULL * (stream_id + 1)));
        return Rng(mix.next_u64());
    }

    State state() const { return state_; }
    void set_state(State s) { state_ = s; }

private:
    State state_;
};

}  // namespace stcast
