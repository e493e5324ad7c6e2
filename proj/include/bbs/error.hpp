#pragma once

#include <stdexcept>
#include <string>

namespace bbs {

/// Bad arguments or inconsistent inputs. Maps to CLI exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A similarity was requested on a degenerate vector (e.g. zero norm with a cosine method).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Binary file could not be decoded.
class FormatError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, BadVersion, Truncated, DimensionMismatch, Inconsistent, Io };

  FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  [[nodiscard]] Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Raised when training diverges (non-finite loss).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace bbs
