#include "mortensen/rate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "mortensen/optim.hpp"

namespace mortensen {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct V0Gradient {
  double v0;
  RowMatrix d_phi;  // per step, n x k
  RowMatrix d_psi;  // per step, n x m
};

V0Gradient v0_with_gradient(const ModelSpec& model, const FunctionalPtr& phi_test, const ControlPath& phi_ctrl,
                            const ControlPath& psi, const OptimizerOptions& inner, V0WarmStart& warm) {
  const V0Result r = compute_V0_detail(model, phi_ctrl, psi, phi_test, inner, warm);
  warm.with_phi = r.with_phi.optimal_control;
  warm.without_phi = r.without_phi.optimal_control;
  const FlowLinearization lin = linearize_flow(model, phi_ctrl);
  const ActionProblem without{model, lin.path, psi, nullptr};
  ActionProblem with = without;
  with.phi_test = phi_test;
  const ActionSensitivity sa = action_sensitivity(with, r.with_phi.optimal_control);
  const ActionSensitivity sb = action_sensitivity(without, r.without_phi.optimal_control);
  return {r.value, flow_vjp(lin, sa.d_reference - sb.d_reference), sa.d_psi - sb.d_psi};
}

bool monotone_ramp(const std::vector<PenaltyStage>& stages) {
  for (std::size_t j = 1; j < stages.size(); ++j) {
    const auto& a = stages[j - 1];
    const auto& b = stages[j];
    if (b.residual > a.residual * (1.0 + 1e-6) + 1e-12) return false;
    if (b.cost < a.cost * (1.0 - 1e-6) - 1e-12) return false;
  }
  return true;
}

}  // namespace

double typical_value(const ModelSpec& model, const FunctionalPtr& phi_test, const TimeGrid& grid,
                     const OptimizerOptions& opts) {
  return compute_V0(model, ControlPath::zero(grid, model.dim_k()), ControlPath::zero(grid, model.dim_m()), phi_test,
                    opts);
}

RatePoint rate_at(const ModelSpec& model, const FunctionalPtr& phi_test, const TimeGrid& grid, double z,
                  const RateOptions& opts, const std::optional<std::pair<ControlPath, ControlPath>>& warm) {
  if (!phi_test) throw ValidationError("rate_at needs a test functional");
  if (!std::isfinite(z)) throw ValidationError("z must be finite");
  const Bounds bounds = phi_test->bounds();
  if (!bounds.contains(z))
    throw Infeasible("z = " + format_double(z) + " lies outside [" + format_double(bounds.lo) + ", " +
                     format_double(bounds.hi) + "], the range of V0 over all control pairs");
  if (!(opts.lambda0 > 0.0) || !(opts.lambda_factor > 1.0) || !(opts.tol > 0.0))
    throw ValidationError("penalty schedule needs lambda0 > 0, lambda_factor > 1, tol > 0");

  const std::size_t k = model.dim_k(), m = model.dim_m();
  const ControlBasis bphi(grid, k, opts.outer_pieces), bpsi(grid, m, opts.outer_pieces);
  const Eigen::Index np = static_cast<Eigen::Index>(bphi.size()), nq = static_cast<Eigen::Index>(bpsi.size());
  auto split = [&](const Eigen::VectorXd& th) {
    return std::pair{bphi.expand(th.head(np)), bpsi.expand(th.tail(nq))};
  };

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(np + nq);
  if (warm) {
    theta.head(np) = bphi.project(warm->first);
    theta.tail(nq) = bpsi.project(warm->second);
  }
  V0WarmStart inner_warm;

  std::vector<PenaltyStage> stages;
  bool feasible = false;
  double lambda = opts.lambda0;
  double v0 = 0.0;
  for (; lambda <= opts.lambda_cap; lambda *= opts.lambda_factor) {
    const Objective f = [&](const Eigen::VectorXd& th, Eigen::VectorXd& grad) {
      const auto [phi, psi] = split(th);
      V0Gradient g;
      try {
        g = v0_with_gradient(model, phi_test, phi, psi, opts.inner, inner_warm);
      } catch (const NonFiniteState&) {
        return kInf;
      }
      const double gap = g.v0 - z;
      grad.head(np) = th.head(np) + 2.0 * lambda * gap * bphi.collapse(g.d_phi);
      grad.tail(nq) = th.tail(nq) + 2.0 * lambda * gap * bpsi.collapse(g.d_psi);
      return 0.5 * th.squaredNorm() + lambda * gap * gap;
    };
    LbfgsOptions lo;
    lo.max_iters = opts.outer_max_iters;
    lo.grad_tol = opts.outer_grad_tol;

    LbfgsResult best = lbfgs_minimize(f, theta, lo);
    if (stages.empty()) {
      for (std::size_t r = 1; r < opts.outer_restarts; ++r) {
        Eigen::VectorXd start(np + nq);
        start.head(np) = bphi.random_start(opts.inner.seed ^ 0x9e3779b97f4a7c15ull, r, opts.inner.restart_scale);
        start.tail(nq) =
            bpsi.random_start(opts.inner.seed ^ 0x7f4a7c159e3779b9ull, r, opts.inner.restart_scale);
        LbfgsResult cand = lbfgs_minimize(f, start, lo);
        if (cand.value < best.value) best = std::move(cand);
      }
    }
    theta = best.x;
    const auto [phi, psi] = split(theta);
    v0 = compute_V0_detail(model, phi, psi, phi_test, opts.inner, inner_warm).value;
    const double cost = 0.5 * phi.squared_l2_norm() + 0.5 * psi.squared_l2_norm();
    stages.push_back({lambda, std::abs(v0 - z), cost, v0, best.converged});
    if (stages.back().residual <= opts.tol) {
      feasible = true;
      break;
    }
  }

  auto [phi, psi] = split(theta);
  const PenaltyStage& last = stages.back();
  RatePoint point{z,
                  0.5 * phi.squared_l2_norm() + 0.5 * psi.squared_l2_norm(),
                  std::move(phi),
                  std::move(psi),
                  last.residual,
                  last.lambda,
                  v0,
                  feasible,
                  monotone_ramp(stages),
                  stages,
                  feasible ? "feasible" : "penalty cap reached with residual " + format_double(last.residual)};
  if (!feasible && opts.strict)
    throw RateNotConverged("rate at z = " + format_double(z) + " did not reach the constraint tolerance",
                           std::move(point));
  return point;
}

RateProfile profile(const ModelSpec& model, const FunctionalPtr& phi_test, const TimeGrid& grid,
                    const std::vector<double>& z_grid, const RateOptions& opts) {
  if (z_grid.empty()) throw ValidationError("profile needs a nonempty z grid");
  if (!phi_test) throw ValidationError("profile needs a test functional");
  RateProfile out;
  out.model = model.name();
  out.phi_test = phi_test->id();
  out.z_star = typical_value(model, phi_test, grid, opts.inner);

  std::vector<double> zs = z_grid;
  zs.push_back(out.z_star);
  std::sort(zs.begin(), zs.end());
  zs.erase(std::unique(zs.begin(), zs.end()), zs.end());
  const auto star = static_cast<std::size_t>(std::find(zs.begin(), zs.end(), out.z_star) - zs.begin());

  RateOptions lax = opts;
  lax.strict = false;
  std::vector<std::optional<RatePoint>> pts(zs.size());
  auto solve = [&](std::size_t i, const std::optional<std::pair<ControlPath, ControlPath>>& warm) {
    try {
      pts[i] = rate_at(model, phi_test, grid, zs[i], lax, warm);
    } catch (const Infeasible& e) {
      pts[i] = RatePoint{zs[i], kInf, ControlPath::zero(grid, model.dim_k()), ControlPath::zero(grid, model.dim_m()),
                         kInf, 0.0, 0.0, false, true, {}, e.what()};
    } catch (const Error& e) {
      pts[i] = RatePoint{zs[i], kInf, ControlPath::zero(grid, model.dim_k()), ControlPath::zero(grid, model.dim_m()),
                         kInf, 0.0, 0.0, false, true, {}, e.what()};
    }
  };
  auto warm_of = [&](std::size_t i) -> std::optional<std::pair<ControlPath, ControlPath>> {
    if (!pts[i] || !std::isfinite(pts[i]->rate)) return std::nullopt;
    return std::pair{pts[i]->phi_ctrl, pts[i]->psi_ctrl};
  };
  solve(star, std::nullopt);
  for (std::size_t i = star + 1; i < zs.size(); ++i) solve(i, warm_of(i - 1));
  for (std::size_t i = star; i-- > 0;) solve(i, warm_of(i + 1));
  for (auto& p : pts) out.points.push_back(std::move(*p));
  return out;
}

// --- Serialization -------------------------------------------------------------------

nlohmann::json RatePoint::to_json() const {
  nlohmann::json st = nlohmann::json::array();
  for (const auto& s : stages)
    st.push_back({{"lambda", s.lambda}, {"residual", s.residual}, {"cost", s.cost}, {"v0", s.v0},
                  {"converged", s.converged}});
  auto num = [](double v) -> nlohmann::json {
    if (std::isfinite(v)) return v;
    return format_double(v);
  };
  return {{"z", z},
          {"rate", num(rate)},
          {"v0", v0},
          {"constraint_residual", num(constraint_residual)},
          {"penalty_final", penalty_final},
          {"feasible", feasible},
          {"monotone_penalty", monotone},
          {"status", status},
          {"stages", st},
          {"phi_ctrl_csv", control_to_csv(phi_ctrl)},
          {"psi_ctrl_csv", control_to_csv(psi_ctrl)}};
}

std::string RateProfile::to_csv() const {
  std::ostringstream os;
  os << "z,rate,residual,feasible\n";
  for (const auto& p : points)
    os << format_double(p.z) << ',' << format_double(p.rate) << ',' << format_double(p.constraint_residual) << ','
       << (p.feasible ? 1 : 0) << '\n';
  return os.str();
}

nlohmann::json RateProfile::to_json() const {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : points) pts.push_back(p.to_json());
  return {{"model", model}, {"phi_test", phi_test}, {"z_star", z_star}, {"points", pts}};
}

}  // namespace mortensen
