#pragma once

#include <stdexcept>
#include <string>

namespace pd {

// Error taxonomy mirrors the CLI exit-code map: config/usage problems,
// I/O failures, training divergence, non-finite inference output.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingDivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NonFiniteSampleError : std::runtime_error {
    int timestep;
    explicit NonFiniteSampleError(int t, const std::string& what)
        : std::runtime_error(what + " (timestep " + std::to_string(t) + ")"), timestep(t) {}
};

}  // namespace pd
