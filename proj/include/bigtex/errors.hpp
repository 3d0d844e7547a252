#pragma once

#include <stdexcept>
#include <string>

namespace bigtex {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes (message names both shapes).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// An id or label referenced something out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid run configuration, detected at construction time.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input files.
class LoadError : public Error {
 public:
  using Error::Error;
};

}  // namespace bigtex
