#pragma once

#include <stdexcept>
#include <string>

namespace dpruner {

// Each error family maps onto one process exit code in the CLI.

/// Bad input: shapes, ranges, missing files, inconsistent artifacts.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Artifact bytes that do not parse: bad magic, unknown version, truncation.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf produced where a finite value is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dpruner
