#pragma once

#include <stdexcept>
#include <string>

namespace egoprompt {

/// Base class for every error raised by this library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape or extent mismatch between operands.
struct DimensionError : Error {
    using Error::Error;
};

/// Parameter outside its documented range (tau <= 0, k > P, ...).
struct ParameterError : Error {
    using Error::Error;
};

/// Mathematically degenerate input (zero-norm vector, non-positive log argument).
struct DegenerateInputError : Error {
    using Error::Error;
};

/// API misuse: wrong call order, empty accumulator, non-scalar backward root.
struct UsageError : Error {
    using Error::Error;
};

/// Class label outside the table's range.
struct LabelError : Error {
    using Error::Error;
};

/// Template string missing its [CLASS] placeholder.
struct TemplateError : Error {
    using Error::Error;
};

/// Bad configuration file or flag value; message names the offending key.
struct ConfigError : Error {
    using Error::Error;
};

/// Infeasible benchmark specification.
struct SpecError : Error {
    using Error::Error;
};

/// Corrupt, truncated, or version-mismatched file.
struct LoadError : Error {
    using Error::Error;
};

/// Non-finite objective value at a finite-difference probe point.
struct ProbeError : Error {
    using Error::Error;
};

}  // namespace egoprompt
