// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace roadformer {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration (bad keys, channel schedules, weights).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor shape or value outside an operation's precondition.
class InputError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Well-formed file with contents that cannot be interpreted.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace roadformer
