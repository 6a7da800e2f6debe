#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "cmgen/adam.hpp"
#include "cmgen/model.hpp"

namespace cmgen {

// Everything beyond the weights that an interrupted training run needs to
// resume bit-identically.
struct TrainerSnapshot {
    AdamState adam;
    std::array<uint64_t, 4> dropout_state{};
    std::array<uint64_t, 4> noise_state{};
    std::array<uint64_t, 4> order_state{};
    uint64_t next_epoch = 0;
    double best_val = 0.0;
    bool has_best = false;
    uint64_t epochs_since_best = 0;
};

// Versioned binary container: magic, format version, config JSON, named
// parameter blobs (shape + 64-bit little-endian values), optional trainer
// state.
void save_checkpoint(const std::string& path, const Model& model,
                     const TrainerSnapshot* trainer = nullptr);

ModelConfig read_checkpoint_config(const std::string& path);

// expected_switches, when given, must agree with the stored persona_mode and
// speaker/alignment/fame flags; a mismatch raises CompatibilityError.
Model load_checkpoint(const std::string& path,
                      const ModelConfig* expected_switches = nullptr,
                      TrainerSnapshot* trainer_out = nullptr,
                      bool* has_trainer = nullptr);

} // namespace cmgen
