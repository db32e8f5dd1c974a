#pragma once

#include <stdexcept>
#include <string>

namespace ptalk {

// Error taxonomy mirrored by the CLI exit codes: config=2, data=3, numeric=4.
// Contract violations (bad shapes, out-of-range arguments) use the standard
// std::invalid_argument / std::out_of_range types directly.

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ptalk
