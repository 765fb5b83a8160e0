#pragma once

#include <stdexcept>
#include <string>

namespace mambaseg {

// Error taxonomy shared across the library. Callers catch the base
// mambaseg::Error or a specific subclass.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
  using Error::Error;
};

struct ParameterError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct SingularityError : Error {
  using Error::Error;
};

struct FormatError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct SamplingError : Error {
  using Error::Error;
};

}  // namespace mambaseg
