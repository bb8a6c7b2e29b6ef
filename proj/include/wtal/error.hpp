#pragma once

#include <stdexcept>
#include <string>

namespace wtal {

// Bad input: malformed files, inconsistent shapes, unknown config keys.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf or divergent losses during training.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Truncated or otherwise unreadable checkpoint.
class CorruptArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace wtal
