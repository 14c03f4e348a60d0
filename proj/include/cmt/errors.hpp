#pragma once

#include <stdexcept>
#include <string>

namespace cmt {

// Base of every error the library raises. The CLI maps the concrete
// kinds onto exit codes (config -> 2, data -> 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes that do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration (grid sizes, divisibility, ranges).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Invalid scalar parameter (distribution parameters, class index).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Missing, unreadable or inconsistent input data.
class DatasetError : public Error {
 public:
  using Error::Error;
};

// Violated call contract (e.g. backward from a non-scalar root).
class ContractError : public Error {
 public:
  using Error::Error;
};

// An operation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Learning-rate schedule queried outside its range.
class ScheduleError : public Error {
 public:
  using Error::Error;
};

}  // namespace cmt
