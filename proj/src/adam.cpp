#include "cmgen/adam.hpp"

#include <cmath>

#include "cmgen/errors.hpp"

namespace cmgen {

void adam_step(std::vector<Tensor>& params, AdamState& state) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].size(), 0.0);
            state.v[i].assign(params[i].size(), 0.0);
        }
    }
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw DimensionError("adam_step: state tracks " + std::to_string(state.m.size()) +
                             " parameters, got " + std::to_string(params.size()));
    ++state.step;
    double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (state.m[i].size() != p.size())
            throw DimensionError("adam_step: moment buffer size mismatch at parameter " +
                                 std::to_string(i));
        auto& values = p.mutable_values();
        const double* g = p.has_grad() ? p.grad().data() : nullptr;
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (size_t j = 0; j < values.size(); ++j) {
            double gj = g ? g[j] : 0.0;
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            values[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

} // namespace cmgen
