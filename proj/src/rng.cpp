#include "cmgen/rng.hpp"

#include <cmath>
#include <numbers>

#include "cmgen/errors.hpp"

namespace cmgen {

namespace {

uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

uint64_t rotl(uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
}

} // namespace

Rng::Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
}

uint64_t Rng::next_u64() {
    uint64_t result = rotl(s_[1] * 5, 7) * 9;
    uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double Rng::normal() {
    // (0, 1] for the log argument
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

size_t Rng::uniform_index(size_t n) {
    if (n == 0) throw ContractError("uniform_index: n must be positive");
    return static_cast<size_t>(next_u64() % n);
}

RngStreams::RngStreams(uint64_t global_seed)
    : init(0), dropout(0), noise(0), order(0) {
    uint64_t x = global_seed;
    uint64_t base = splitmix64(x);
    init = Rng(base ^ 0x01);
    dropout = Rng(base ^ 0x02);
    noise = Rng(base ^ 0x03);
    order = Rng(base ^ 0x04);
}

} // namespace cmgen
