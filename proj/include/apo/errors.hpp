#ifndef APO_ERRORS_HPP
#define APO_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace apo {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand extents do not conform.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Factorization failure or non-finite value. `index()` is the failing pivot
/// (or -1 when no single index applies).
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what, std::ptrdiff_t index = -1)
      : Error(what), index_(index) {}
  std::ptrdiff_t index() const noexcept { return index_; }

 private:
  std::ptrdiff_t index_;
};

/// Dense oracle requested beyond its size guard.
class OracleScaleError : public Error {
 public:
  using Error::Error;
};

/// Violated precondition that is not a shape problem.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Iterative inner solver hit its iteration cap.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double last_grad_norm)
      : Error(what), last_grad_norm_(last_grad_norm) {}
  double last_grad_norm() const noexcept { return last_grad_norm_; }

 private:
  double last_grad_norm_;
};

/// Training loss exceeded the divergence guard or became non-finite.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t step) : Error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// CSV ingestion failure at a 1-based row/column.
class IngestionError : public Error {
 public:
  IngestionError(const std::string& what, std::size_t row, std::size_t column)
      : Error(what), row_(row), column_(column) {}
  std::size_t row() const noexcept { return row_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::size_t column_;
};

/// Experiment configuration is malformed; `pointer()` is a JSON pointer.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& what, std::string pointer)
      : Error(what + " (at " + (pointer.empty() ? std::string("/") : pointer) + ")"),
        pointer_(std::move(pointer)) {}
  const std::string& pointer() const noexcept { return pointer_; }

 private:
  std::string pointer_;
};

}  // namespace apo

#endif  // APO_ERRORS_HPP
