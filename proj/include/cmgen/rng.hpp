#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace cmgen {

// xoshiro256** seeded via splitmix64. Self-contained so that streams are
// byte-identical across platforms and their state can be checkpointed,
// neither of which <random> distributions guarantee.
class Rng {
public:
    explicit Rng(uint64_t seed = 0);

    uint64_t next_u64();
    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);
    double normal();                        // N(0, 1), Box-Muller
    size_t uniform_index(size_t n);         // [0, n), n > 0

    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (size_t i = v.size() - 1; i > 0; --i) {
            size_t j = uniform_index(i + 1);
            std::swap(v[i], v[j]);
        }
    }

    std::array<uint64_t, 4> state() const { return s_; }
    void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

private:
    std::array<uint64_t, 4> s_{};
};

// The four stochastic consumers, all derived from one global seed.
struct RngStreams {
    Rng init;
    Rng dropout;
    Rng noise;
    Rng order;

    explicit RngStreams(uint64_t global_seed);
};

} // namespace cmgen
