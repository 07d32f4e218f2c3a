#pragma once

// Limited-memory BFGS with a strong-Wolfe line search (cubic interpolation
// zoom). Iterates never increase the objective beyond its rounding.

#include <Eigen/Dense>
#include <cstddef>
#include <functional>
#include <string>

namespace mortensen {

/// Returns f(x) and writes grad f(x) into `grad` (already sized).
using Objective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& grad)>;

struct LbfgsOptions {
  std::size_t max_iters = 500;
  double grad_tol = 1e-6;  // on the Euclidean gradient norm
  std::size_t history = 10;
  std::size_t max_line_search = 40;
  double c1 = 1e-4;
  double c2 = 0.9;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double value = 0.0;
  double grad_norm = 0.0;
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
  bool converged = false;
  std::string status;
};

LbfgsResult lbfgs_minimize(const Objective& f, Eigen::VectorXd x0, const LbfgsOptions& opts = {});

}  // namespace mortensen
