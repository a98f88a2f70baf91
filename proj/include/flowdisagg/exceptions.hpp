#pragma once

#include <stdexcept>
#include <string>

namespace flowdisagg {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or axis mismatch between operands.
struct DimensionError : Error {
    using Error::Error;
};

// Domain violations of numeric ops: log of non-positive values,
// exp overflow, non-finite intermediates.
struct NumericError : Error {
    using Error::Error;
};

// A caller broke an API precondition (non-scalar loss, missing grad,
// uninitialized layer, ...).
struct ContractError : Error {
    using Error::Error;
};

struct SingularMatrixError : NumericError {
    using NumericError::NumericError;
};

// Zero-variance channel where statistics are required.
struct DegenerateStatsError : Error {
    using Error::Error;
};

// Input files that do not match the documented schema.
struct SchemaError : Error {
    using Error::Error;
};

// Malformed file contents (bad timestamps, duplicate rows, ...).
struct FormatError : Error {
    using Error::Error;
};

struct UndefinedMetricError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace flowdisagg
