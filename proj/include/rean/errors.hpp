#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rean {

/// Operand shapes do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A computation produced NaN or Inf. `where()` names the offending coordinate
/// or parameter block.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& what, std::string where)
      : std::runtime_error(what), where_(std::move(where)) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

/// Binary file decoding failures.
enum class FormatErrorKind { BadMagic, Truncated, UnsupportedVersion, Malformed };

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

/// Dataset or batch does not hold enough subjects/templates for a request.
class InsufficientDataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rean
