#ifndef DLNMLPS_ERROR_HPP
#define DLNMLPS_ERROR_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dlnmlps {

enum class ErrorKind {
  invalid_argument,
  out_of_domain,
  dimension_mismatch,
  not_positive_definite,
  non_convergence,
  parse,
  io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::out_of_domain: return "out-of-domain";
    case ErrorKind::dimension_mismatch: return "dimension-mismatch";
    case ErrorKind::not_positive_definite: return "not-positive-definite";
    case ErrorKind::non_convergence: return "non-convergence";
    case ErrorKind::parse: return "parse";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Raised when an evaluation point lies outside a basis domain.
class OutOfDomainError : public Error {
 public:
  OutOfDomainError(std::size_t index, double value, double lo, double hi)
      : Error(ErrorKind::out_of_domain,
              "point " + std::to_string(index) + " (" + std::to_string(value) +
                  ") outside basis domain [" + std::to_string(lo) + ", " +
                  std::to_string(hi) + "]"),
        index_(index),
        value_(value) {}

  std::size_t index() const noexcept { return index_; }
  double value() const noexcept { return value_; }

 private:
  std::size_t index_;
  double value_;
};

/// Input-file problems that can be traced to a line or row.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& message)
      : Error(ErrorKind::parse, message + " at row " + std::to_string(line)),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace dlnmlps

#endif  // DLNMLPS_ERROR_HPP
