#pragma once

#include <stdexcept>
#include <string>

namespace tdcss {

// Error taxonomy. Every error carries a message that names the failing
// operation; the CLI maps the two families onto exit codes 2 and 3.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Caller-side problems: bad shapes, bad config, malformed files. CLI exit 2.
struct InputError : Error {
  using Error::Error;
};

/// Problems that surface while running: non-finite values, leakage. CLI exit 3.
struct RuntimeFailure : Error {
  using Error::Error;
};

struct ShapeError : InputError {
  using InputError::InputError;
};
struct RangeError : InputError {
  using InputError::InputError;
};
struct ConfigError : InputError {
  using InputError::InputError;
};
struct DataError : InputError {
  using InputError::InputError;
};
struct FormatError : InputError {
  using InputError::InputError;
};
struct UsageError : InputError {
  using InputError::InputError;
};
struct MetricError : InputError {
  using InputError::InputError;
};

struct NumericError : RuntimeFailure {
  using RuntimeFailure::RuntimeFailure;
};
struct LeakageError : RuntimeFailure {
  using RuntimeFailure::RuntimeFailure;
};

}  // namespace tdcss
