#pragma once

#include <stdexcept>
#include <string>

namespace radq {

// Error taxonomy mirrored by the CLI exit codes:
// ConfigError -> 2, MissingInputError -> 3, NumericError -> 4, anything else -> 1.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MissingInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed on-disk artifacts (bad header, payload mismatch, invariant violations).
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace radq
