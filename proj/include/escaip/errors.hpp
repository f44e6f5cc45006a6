#pragma once

#include <stdexcept>
#include <string>

namespace escaip {

/// Base of every error thrown by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration (cutoff vs cell, budget mismatch, unknown keys...).
class ConfigError : public Error {
   public:
    using Error::Error;
};

/// Malformed or unsupported input data.
class DataError : public Error {
   public:
    using Error::Error;
};

/// Non-finite values or failed numerical procedures.
class NumericalError : public Error {
   public:
    using Error::Error;
};

/// Caller violated an operation precondition.
class ContractError : public Error {
   public:
    using Error::Error;
};

class DimensionError : public ContractError {
   public:
    using ContractError::ContractError;
};

}  // namespace escaip
