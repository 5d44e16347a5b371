#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace qrp {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input / configuration problems. The CLI maps these to exit code 2.
class InputError : public Error {
 public:
  using Error::Error;
};

class DomainError : public InputError {
 public:
  using InputError::InputError;
};

class ShapeError : public InputError {
 public:
  using InputError::InputError;
};

class ValidationError : public InputError {
 public:
  using InputError::InputError;
};

class RangeError : public InputError {
 public:
  using InputError::InputError;
};

class SizeError : public InputError {
 public:
  using InputError::InputError;
};

class RankError : public InputError {
 public:
  using InputError::InputError;
};

class ParseError : public InputError {
 public:
  ParseError(const std::string& what, std::size_t row)
      : InputError(what), row_(row) {}

  /// 1-based data row (header excluded); 0 when the header itself is bad.
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

// Numerical failures. The CLI maps these to exit code 3.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public NumericalError {
 public:
  ConvergenceError(const std::string& what, Eigen::VectorXd last_iterate,
                   double gap)
      : NumericalError(what), last_(std::move(last_iterate)), gap_(gap) {}

  const Eigen::VectorXd& last_iterate() const noexcept { return last_; }
  double gap() const noexcept { return gap_; }

 private:
  Eigen::VectorXd last_;
  double gap_;
};

class SingularJacobianError : public NumericalError {
 public:
  SingularJacobianError(const std::string& what, double tau,
                        double min_eigenvalue)
      : NumericalError(what), tau_(tau), min_eig_(min_eigenvalue) {}

  double tau() const noexcept { return tau_; }
  double min_eigenvalue() const noexcept { return min_eig_; }

 private:
  double tau_;
  double min_eig_;
};

/// Raised when too many bootstrap replicates fail.
class RunError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace qrp
