#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace patchkit {

// Values double as CLI exit codes and must stay stable.
enum class ErrorCategory : int {
  validation = 1,
  io = 2,
  numeric = 3,
};

// Every failure raised by the library. `kind` is a short stable identifier
// (e.g. "OverlappingOffsets") that tests and scripts can match on.
class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, std::string kind, const std::string& message)
      : std::runtime_error(kind + ": " + message),
        category_(category),
        kind_(std::move(kind)) {}

  ErrorCategory category() const noexcept { return category_; }
  const std::string& kind() const noexcept { return kind_; }

 private:
  ErrorCategory category_;
  std::string kind_;
};

inline Error validation_error(std::string kind, const std::string& message) {
  return Error(ErrorCategory::validation, std::move(kind), message);
}

inline Error io_error(std::string kind, const std::string& message) {
  return Error(ErrorCategory::io, std::move(kind), message);
}

inline Error numeric_error(std::string kind, const std::string& message) {
  return Error(ErrorCategory::numeric, std::move(kind), message);
}

}  // namespace patchkit
