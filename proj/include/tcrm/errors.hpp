#pragma once

#include <stdexcept>
#include <string>

namespace tcrm {

/// Malformed caller input: shape mismatch, bad token id, out-of-range config.
/// The CLI maps this to exit code 2.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A required file (checkpoint, dataset) is absent or unreadable. Exit code 3.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/inf produced or consumed by a computation. Exit code 4.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

[[noreturn]] inline void fail(const std::string& what) { throw InvalidInput(what); }

inline void require(bool ok, const std::string& what) {
  if (!ok) {
    fail(what);
  }
}

}  // namespace detail
}  // namespace tcrm
