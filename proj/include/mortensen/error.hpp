#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mortensen {

/// Base class for all library errors. `exit_code()` maps the error onto the
/// CLI contract: 1 for invalid input, 2 for numerical failure.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  [[nodiscard]] virtual int exit_code() const noexcept { return 2; }
};

class ValidationError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] int exit_code() const noexcept override { return 1; }
};

class UnknownModel : public ValidationError {
 public:
  explicit UnknownModel(const std::string& name)
      : ValidationError("unknown model '" + name + "'"), name_(name) {}
  [[nodiscard]] const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
};

class ParamOutOfRange : public ValidationError {
 public:
  ParamOutOfRange(const std::string& param, const std::string& detail)
      : ValidationError("parameter '" + param + "' " + detail), param_(param) {}
  [[nodiscard]] const std::string& param() const noexcept { return param_; }

 private:
  std::string param_;
};

class ConfigError : public ValidationError {
 public:
  ConfigError(const std::string& field, const std::string& detail)
      : ValidationError("config field '" + field + "': " + detail), field_(field) {}
  [[nodiscard]] const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class GridMismatch : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class NonLinearModel : public ValidationError {
 public:
  explicit NonLinearModel(const std::string& name)
      : ValidationError("model '" + name + "' is not linear-Gaussian") {}
};

class NonFiniteState : public Error {
 public:
  explicit NonFiniteState(std::size_t step)
      : Error("non-finite state produced at step " + std::to_string(step)), step_(step) {}
  [[nodiscard]] std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class SingularSigma : public Error {
 public:
  explicit SingularSigma(std::size_t node)
      : Error("diffusion matrix singular at node " + std::to_string(node)), node_(node) {}
  [[nodiscard]] std::size_t node() const noexcept { return node_; }

 private:
  std::size_t node_;
};

/// The rate function is +infinity: no control pair reaches the requested value.
class Infeasible : public Error {
 public:
  using Error::Error;
};

}  // namespace mortensen
