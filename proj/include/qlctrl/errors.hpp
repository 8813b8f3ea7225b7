#pragma once

#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Dense>

namespace qlctrl {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid argument or configuration value.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// A coefficient map returned a non-finite value or could not be evaluated.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

/// Powers or products left the representable range.
class OverflowError : public Error {
 public:
  using Error::Error;
};

/// The Gramian stayed singular after every regularization attempt.
/// Carries the numerical null-space witness w with w' G w ~ 0.
class UncontrollableError : public Error {
 public:
  UncontrollableError(const std::string& what, Eigen::VectorXd witness)
      : Error(what), witness_(std::move(witness)) {}
  const Eigen::VectorXd& witness() const noexcept { return witness_; }

 private:
  Eigen::VectorXd witness_;
};

/// A simulated state became non-finite or exceeded the divergence guard.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Marching exceeded its window budget.
class NonTerminationError : public Error {
 public:
  using Error::Error;
};

/// Scenario file problems; `field` names the offending JSON path.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field.empty() ? what : field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace qlctrl
