#pragma once

#include <stdexcept>
#include <string>

namespace picr {

// Shape / dimension mismatch between tensors. Messages name both shapes.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration value (unsupported window, indivisible heads, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Input outside an operation's documented domain (non-binary GT, too-small map).
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// Autodiff misuse (backward on a detached tensor, non-scalar loss).
struct TapeError : std::runtime_error {
    explicit TapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// File system / image decoding failures.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace picr
