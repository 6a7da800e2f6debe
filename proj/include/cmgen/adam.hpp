#pragma once

#include <cstdint>
#include <vector>

#include "cmgen/tensor.hpp"

namespace cmgen {

// Bias-corrected Adam. Moment buffers are addressed by parameter position,
// so the caller must pass the same parameter list (same order) every step.
struct AdamState {
    double lr = 4e-4;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    uint64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

// One update over params using their accumulated gradients. Parameters
// without a gradient buffer are treated as having zero gradient.
void adam_step(std::vector<Tensor>& params, AdamState& state);

} // namespace cmgen
