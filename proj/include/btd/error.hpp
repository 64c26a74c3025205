#pragma once

#include <stdexcept>
#include <string>

namespace btd {

/// Raised when a caller passes arguments outside an operation's domain.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised by readers and writers on malformed or inconsistent files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a numerical procedure cannot produce a meaningful result.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void log_warning(const std::string& message);
void log_info(const std::string& message);

}  // namespace btd
