#ifndef NBNET_ERRORS_HPP
#define NBNET_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace nbnet {

// Base type for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad input that a caller could have checked up front: malformed configs,
// violated preconditions, inconsistent shapes. CLI maps these to exit code 2.
struct ValidationError : Error {
    using Error::Error;
};

// Parse failure with a 1-based line number, for line-oriented formats.
struct ParseError : ValidationError {
    ParseError(const std::string& what, long line)
        : ValidationError(what + " (line " + std::to_string(line) + ")"), line(line) {}
    long line;
};

struct ShapeError : ValidationError {
    using ValidationError::ValidationError;
};

// Landmark sets that do not determine a similarity transform.
struct DegenerateLandmarksError : ValidationError {
    using ValidationError::ValidationError;
};

struct InsufficientImpostorsError : ValidationError {
    using ValidationError::ValidationError;
};

// Unreadable or version-mismatched artifact files.
struct CheckpointError : Error {
    using Error::Error;
};

// Numerical failures: non-finite losses, non-convergence, infeasible targets.
struct NumericError : Error {
    using Error::Error;
};

}

#endif
