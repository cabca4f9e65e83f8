// Exception taxonomy shared across the library. The CLI maps these onto
// process exit codes (config -> 2, data -> 3, anything else -> 4).
#pragma once

#include <stdexcept>
#include <string>

namespace tsmix {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor extents disagree with what an operation requires.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// A user-supplied configuration value is out of range or inconsistent.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Runtime data violates a documented precondition (off-simplex label,
// empty test set, class too small to split, ...).
struct ValidationError : Error {
    explicit ValidationError(const std::string& msg) : Error(msg) {}
};

// An internal API contract was broken by the caller.
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Malformed input file content.
struct ParseError : Error {
    explicit ParseError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

} // namespace tsmix
