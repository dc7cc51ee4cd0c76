#pragma once

#include <stdexcept>
#include <string>

namespace stn {

// Base for everything the library throws on contract violations.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/dimension disagreement between operands.
struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration (divisibility, positivity, unknown keys, ...).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Bad runtime input (NaN values, out-of-range indices, ...).
struct InputError : Error {
    explicit InputError(const std::string& msg) : Error(msg) {}
};

// Time/index range violations (window does not fit, ...).
struct RangeError : Error {
    explicit RangeError(const std::string& msg) : Error(msg) {}
};

// File format / serialization problems.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Optimizer/training failures (NaN gradients, divergence).
struct TrainError : Error {
    explicit TrainError(const std::string& msg) : Error(msg) {}
};

// Undefined metric (zero-variance reference, frame too small, ...).
struct MetricError : Error {
    explicit MetricError(const std::string& msg) : Error(msg) {}
};

// Violated operation contract (non-scalar loss, empty sequence, ...).
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

}  // namespace stn
