// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace vital {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input: bad shapes, non-finite values, out-of-range parameters.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class TapNotFoundError : public Error {
 public:
  explicit TapNotFoundError(const std::string& layer_id)
      : Error("tap not found: " + layer_id), layer_id_(layer_id) {}
  const std::string& layer_id() const { return layer_id_; }

 private:
  std::string layer_id_;
};

/// Inconsistent combination of otherwise valid settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class CacheIntegrityError : public Error {
 public:
  using Error::Error;
};

class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class MissingInputError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace vital
