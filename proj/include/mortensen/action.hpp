#pragma once

// Deterministic path-space functionals and their minimization over
// piecewise-constant controls. A path eta is represented by the control u
// that steers the noiseless flow to it, so J(eta) becomes 1/2 ||u||^2.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mortensen/error.hpp"
#include "mortensen/functional.hpp"
#include "mortensen/model.hpp"
#include "mortensen/path.hpp"

namespace mortensen {

/// 1/2 sum_i ||h(eta_i) - h(ref_i) - psi_i||^2 dt over i < n. Throws GridMismatch.
double eval_H(const Path& eta, const Path& reference, const ControlPath& psi, const ModelSpec& model);

/// 1/2 sum_i ||sigma(eta_i)^{-1} ((eta_{i+1} - eta_i)/dt - b(eta_i))||^2 dt for
/// square sigma. Throws SingularSigma when the smallest singular value at a
/// node is below 1e-8, ValidationError when d != k.
double eval_J_closed_form(const Path& eta, const ModelSpec& model);

/// Step ranges [b_j, b_{j+1}) of `pieces` equal-length pieces, b_j = floor(j n / pieces).
/// pieces = 0 (or >= n) gives one piece per step.
std::vector<std::size_t> piece_boundaries(std::size_t n_steps, std::size_t pieces);

/// Piecewise-constant controls in L2-scaled coordinates: the k values of
/// piece j are theta_j = v_j / sqrt(len_j), so 1/2 ||u||^2 = 1/2 |v|^2.
class ControlBasis {
 public:
  ControlBasis(const TimeGrid& grid, std::size_t k, std::size_t pieces);

  [[nodiscard]] std::size_t pieces() const noexcept { return scale_.size(); }
  [[nodiscard]] std::size_t size() const noexcept { return pieces() * k_; }
  [[nodiscard]] double scale(std::size_t piece) const { return scale_[piece]; }

  [[nodiscard]] ControlPath expand(const Eigen::VectorXd& v) const;
  /// Gradient in v from a gradient in per-step values (n_steps x k).
  [[nodiscard]] Eigen::VectorXd collapse(const RowMatrix& g) const;
  /// L2 projection onto the basis (piece means).
  [[nodiscard]] Eigen::VectorXd project(const ControlPath& u) const;
  /// Piece values theta = scale * N(0, 1), from stream (seed, index).
  [[nodiscard]] Eigen::VectorXd random_start(std::uint64_t seed, std::uint64_t index, double scale) const;

 private:
  TimeGrid grid_;
  std::size_t k_;
  std::vector<std::size_t> bounds_;
  std::vector<double> scale_;
};

struct ActionProblem {
  ModelSpec model;
  Path reference;    // the path compared against in H
  ControlPath psi;   // m-dimensional shift in H
  FunctionalPtr phi_test;  // may be null

  [[nodiscard]] const TimeGrid& grid() const noexcept { return reference.grid(); }

  /// Reference = flow driven by `phi_ctrl`; psi = 0 when absent.
  static ActionProblem around(const ModelSpec& model, const ControlPath& phi_ctrl,
                              std::optional<ControlPath> psi = std::nullopt, FunctionalPtr phi_test = nullptr);
};

struct OptimizerOptions {
  std::size_t n_restarts = 8;  // zero control plus n_restarts - 1 random starts
  std::size_t max_iters = 500;
  double grad_tol = 1e-6;      // on the gradient in L2-scaled control coordinates
  double restart_scale = 0.5;
  std::uint64_t seed = 20240611;
  std::size_t pieces = 0;      // control pieces; 0 = one per step
  bool finite_difference = false;
  double fd_step = 1e-6;
  bool strict = true;          // throw NotConverged instead of returning converged = false
  std::size_t workers = 0;
};

struct VariationalSolution {
  double optimal_value = 0.0;
  ControlPath optimal_control;
  Path optimal_path;  // integrate_flow(model, optimal_control)
  std::size_t n_restarts_used = 0;
  double gradient_norm_at_opt = 0.0;
  bool converged = false;
  std::size_t best_restart = 0;
  std::vector<double> restart_values;
  std::string status;

  [[nodiscard]] double control_cost() const { return 0.5 * optimal_control.squared_l2_norm(); }
  [[nodiscard]] nlohmann::json to_json() const;
};

class NotConverged : public Error {
 public:
  NotConverged(const std::string& what, VariationalSolution best) : Error(what), best_(std::move(best)) {}
  [[nodiscard]] const VariationalSolution& best() const noexcept { return best_; }

 private:
  VariationalSolution best_;
};

/// 1/2 ||u||^2 + H(flow(u), reference, psi) + phi_test(flow(u)).
double action_objective(const ActionProblem& problem, const ControlPath& u);

/// Gradient of `action_objective` with respect to every step value of u
/// (n_steps x k), by the discrete adjoint of the RK4 flow.
RowMatrix action_gradient(const ActionProblem& problem, const ControlPath& u);

/// Same gradient by central differences with step `h`.
RowMatrix action_gradient_fd(const ActionProblem& problem, const ControlPath& u, double h = 1e-6);

/// Multi-start quasi-Newton minimization. Starts: u = 0, then every warm
/// start, then random Gaussian perturbations. Ties go to the lowest value,
/// then the lowest control norm, then the first start.
VariationalSolution minimize_action(const ActionProblem& problem, const OptimizerOptions& opts,
                                    const std::vector<ControlPath>& warm_starts = {});

/// Partial derivatives of the objective at fixed u with respect to psi
/// (n_steps x m) and to the reference path nodes (n_nodes x d). At an inner
/// minimizer these are the derivatives of the optimal value.
struct ActionSensitivity {
  RowMatrix d_psi;
  RowMatrix d_reference;
};
ActionSensitivity action_sensitivity(const ActionProblem& problem, const ControlPath& u);

struct V0Result {
  double value = 0.0;
  VariationalSolution with_phi;     // inf [H + phi + J]
  VariationalSolution without_phi;  // inf [H + J]
};

struct V0WarmStart {
  std::optional<ControlPath> with_phi;
  std::optional<ControlPath> without_phi;
};

/// V0 = inf[H + phi + J] - inf[H + J] with reference flow(phi_ctrl). Each
/// inner solve is warm-started from the other's minimizer until neither can
/// improve from there, so inf phi <= V0 <= sup phi holds for the returned pair.
V0Result compute_V0_detail(const ModelSpec& model, const ControlPath& phi_ctrl, const ControlPath& psi,
                           const FunctionalPtr& phi_test, const OptimizerOptions& opts,
                           const V0WarmStart& warm = {});

double compute_V0(const ModelSpec& model, const ControlPath& phi_ctrl, const ControlPath& psi,
                  const FunctionalPtr& phi_test, const OptimizerOptions& opts);

/// CSV `t,u0,...` of a control, one row per step, and its inverse.
std::string control_to_csv(const ControlPath& u);
ControlPath control_from_csv(const TimeGrid& grid, const std::string& csv);

}  // namespace mortensen
