#pragma once

#include <stdexcept>
#include <string>

namespace fairtune {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dimension mismatch between operands.
struct ShapeError : Error {
    using Error::Error;
};

/// Requested rank outside [1, min(rows, cols)].
struct RankError : Error {
    using Error::Error;
};

/// Invalid argument value (empty batch, alpha out of range, ...).
struct InputError : Error {
    using Error::Error;
};

/// Iterative kernel failed to converge or produced non-finite values.
struct NumericalError : Error {
    int iterations = 0;
    NumericalError(const std::string& msg, int iters)
        : Error(msg), iterations(iters) {}
    explicit NumericalError(const std::string& msg) : Error(msg) {}
};

/// A documented precondition or invariant was violated by the caller.
struct InvariantError : Error {
    using Error::Error;
};

/// Dataset-level problem: bad schema, unmappable value, degenerate split.
struct DataError : Error {
    using Error::Error;
};

/// A requested sensitive group has no samples.
struct GroupEmptyError : DataError {
    using DataError::DataError;
};

/// A split does not contain every sensitive group.
struct StratificationError : DataError {
    using DataError::DataError;
};

/// A (group, label) contingency cell needed by a metric is empty.
struct DegenerateCellError : DataError {
    using DataError::DataError;
};

/// Experiment configuration is malformed or inconsistent.
struct ConfigError : Error {
    using Error::Error;
};

/// File could not be read or written.
struct FileError : Error {
    using Error::Error;
};

}  // namespace fairtune
