#pragma once

#include <stdexcept>
#include <string>

namespace prefclust {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or arguments. The CLI maps this to exit code 2.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Malformed or inconsistent input data.
class DataError : public Error {
public:
  using Error::Error;
};

class DimensionError : public DataError {
public:
  using DataError::DataError;
};

/// Non-finite numeric input where a finite value is required.
class DomainError : public Error {
public:
  using Error::Error;
};

/// A broken internal invariant, e.g. parameters that no longer line up with the corpus.
class ConsistencyError : public Error {
public:
  using Error::Error;
};

}  // namespace prefclust
