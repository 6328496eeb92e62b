#pragma once

#include <stdexcept>
#include <string>

namespace reasonrank {

/// Bad inputs: malformed files, broken invariants, missing pipeline stages.
/// The CLI maps these to exit code 2.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Transport or protocol failure talking to the teacher endpoint.
/// The CLI maps these to exit code 3.
struct GatewayError : std::runtime_error {
    explicit GatewayError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Teacher output with no recoverable JSON value. Callers may retry once.
struct ResponseParseError : std::runtime_error {
    explicit ResponseParseError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace reasonrank
