#pragma once

// The rate function I(z) = min 1/2 ||phi||^2 + 1/2 ||psi||^2 over control
// pairs with V0^{phi,psi} = z, solved by a quadratic penalty with a
// geometric ramp. The V0 gradient comes from the inner minimizers
// (envelope theorem).

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mortensen/action.hpp"

namespace mortensen {

struct RateOptions {
  OptimizerOptions inner;  // V0 solves
  std::size_t outer_pieces = 0;  // pieces of phi_ctrl and psi; 0 = one per step
  std::size_t outer_restarts = 1;  // zero/warm start plus random starts, first stage only
  std::size_t outer_max_iters = 200;
  double outer_grad_tol = 1e-6;
  double tol = 1e-3;        // constraint residual accepted as feasible
  double lambda0 = 1.0;
  double lambda_factor = 10.0;
  double lambda_cap = 1e8;
  bool strict = true;       // throw RateNotConverged for an unresolved point

  RateOptions() {
    inner.n_restarts = 1;
    inner.grad_tol = 1e-9;
    inner.strict = false;
  }
};

struct PenaltyStage {
  double lambda = 0.0;
  double residual = 0.0;
  double cost = 0.0;
  double v0 = 0.0;
  bool converged = false;
};

struct RatePoint {
  double z = 0.0;
  double rate = 0.0;  // 1/2 ||phi||^2 + 1/2 ||psi||^2; +inf when infeasible
  ControlPath phi_ctrl;
  ControlPath psi_ctrl;
  double constraint_residual = 0.0;
  double penalty_final = 0.0;
  double v0 = 0.0;
  bool feasible = false;
  bool monotone = true;  // residual nonincreasing and cost nondecreasing over the ramp
  std::vector<PenaltyStage> stages;
  std::string status;

  [[nodiscard]] nlohmann::json to_json() const;
};

class RateNotConverged : public Error {
 public:
  RateNotConverged(const std::string& what, RatePoint point) : Error(what), point_(std::move(point)) {}
  [[nodiscard]] const RatePoint& point() const noexcept { return point_; }

 private:
  RatePoint point_;
};

struct RateProfile {
  std::vector<RatePoint> points;  // ascending z
  double z_star = 0.0;
  std::string model;
  std::string phi_test;

  /// Header `z,rate,residual,feasible`.
  [[nodiscard]] std::string to_csv() const;
  [[nodiscard]] nlohmann::json to_json() const;
};

/// z* = V0 with zero controls.
double typical_value(const ModelSpec& model, const FunctionalPtr& phi_test, const TimeGrid& grid,
                     const OptimizerOptions& opts);

/// Throws Infeasible when z lies outside the bounds of phi_test, and
/// RateNotConverged (carrying the point) when the ramp ends infeasible and
/// opts.strict is set.
RatePoint rate_at(const ModelSpec& model, const FunctionalPtr& phi_test, const TimeGrid& grid, double z,
                  const RateOptions& opts, const std::optional<std::pair<ControlPath, ControlPath>>& warm = {});

/// Sweeps outward from z*, warm-starting each point from its neighbour.
/// Points that fail are flagged, never fatal.
RateProfile profile(const ModelSpec& model, const FunctionalPtr& phi_test, const TimeGrid& grid,
                    const std::vector<double>& z_grid, const RateOptions& opts);

}  // namespace mortensen
