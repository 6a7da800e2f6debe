#pragma once

#include <stdexcept>

namespace cmgen {

// Shared error taxonomy. Every module throws one of these; the CLI maps
// them to nonzero exit codes with the message on stderr.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

// Caller broke a documented precondition.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// Input is well-formed but unusable (empty corpus, all-pad targets, ...).
struct DegenerateInputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Artifact (checkpoint, vocab file) disagrees with the requested setup.
struct CompatibilityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Paired data that cannot be matched up record-by-record.
struct AlignmentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf detected where finite values are required.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace cmgen
