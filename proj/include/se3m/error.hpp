#pragma once

#include <stdexcept>
#include <string>

namespace se3m {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data could not be read or parsed.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Tensor or representation shapes disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A configuration value is out of its valid range.
class ConfigError : public Error {
 public:
  using Error::Error;
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline void require_config(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace se3m
