#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "cmgen/tensor.hpp"

namespace testutil {

// Relative error with a small absolute floor so near-zero pairs compare
// sanely.
inline double rel_err(double got, double want, double floor = 1e-6) {
    double denom = std::max({std::abs(got), std::abs(want), floor});
    return std::abs(got - want) / denom;
}

struct GradCheckResult {
    double max_rel_err = 0.0;
    size_t param_index = 0;
    size_t element = 0;
};

// Central finite differences against the tape's gradients. loss_fn must
// rebuild the graph from the parameters' current values on every call.
inline GradCheckResult grad_check(std::vector<cmgen::Tensor>& params,
                                  const std::function<cmgen::Tensor()>& loss_fn,
                                  double step = 1e-5) {
    for (auto& p : params) p.zero_grad();
    cmgen::Tensor loss = loss_fn();
    cmgen::backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params)
        analytic.push_back(p.has_grad() ? p.grad()
                                        : std::vector<double>(p.size(), 0.0));

    auto eval = [&]() {
        cmgen::NoGradGuard guard;
        return loss_fn().item();
    };

    GradCheckResult res;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& vals = params[pi].mutable_values();
        for (size_t i = 0; i < vals.size(); ++i) {
            double keep = vals[i];
            vals[i] = keep + step;
            double up = eval();
            vals[i] = keep - step;
            double down = eval();
            vals[i] = keep;
            double fd = (up - down) / (2.0 * step);
            double err = rel_err(analytic[pi][i], fd);
            if (err > res.max_rel_err) {
                res.max_rel_err = err;
                res.param_index = pi;
                res.element = i;
            }
        }
    }
    return res;
}

// Fresh scratch directory under the system temp root.
inline std::string scratch_dir(const std::string& tag) {
    static uint64_t counter = 0;
    auto dir = std::filesystem::temp_directory_path() /
               ("cmgen_test_" + tag + "_" + std::to_string(counter++));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir.string();
}

inline void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::string s((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
    return s;
}

} // namespace testutil
