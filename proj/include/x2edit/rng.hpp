#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace x2edit {

// xoshiro256** seeded through splitmix64. Every source of randomness in a run
// derives from one 64-bit root seed via named sub-streams, so the data, init,
// noise and sampler streams stay independent and individually reproducible.
// The full state is four words plus the Box-Muller spare, which makes it
// trivial to persist bit-exactly in checkpoints.
class Rng {
public:
    struct State {
        std::array<std::uint64_t, 4> s{};
        bool has_spare = false;
        double spare = 0.0;
    };

    explicit Rng(std::uint64_t seed);

    // Derives an independent generator for (root_seed, stream_name).
    static Rng stream(std::uint64_t root_seed, std::string_view name);

    std::uint64_t next_u64();

    // Uniform on [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi);

    // Uniform on the open interval (0, 1); rejects exact zeros.
    double uniform_open01();

    // Standard normal via Box-Muller with a cached spare.
    double gaussian();
    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    // Uniform integer in [0, n); n must be positive.
    std::uint64_t uniform_int(std::uint64_t n);

    const State& state() const { return state_; }
    void set_state(const State& s) { state_ = s; }

private:
    State state_;
};

}  // namespace x2edit
