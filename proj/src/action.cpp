#include "mortensen/action.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "mortensen/optim.hpp"
#include "mortensen/parallel.hpp"
#include "mortensen/rng.hpp"

namespace mortensen {

namespace {

constexpr double kMinSingular = 1e-8;

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

void check_problem(const ActionProblem& p) {
  require_same_grid(p.reference.grid(), p.psi.grid(), "action problem");
  if (p.reference.dim() != p.model.dim_d()) throw ValidationError("reference path must have dimension d");
  if (p.psi.dim() != p.model.dim_m()) throw ValidationError("psi must have dimension m");
}

// Residuals r_i = h(eta_i) - h(ref_i) - psi_i for i < n.
RowMatrix residuals(const Path& eta, const Path& reference, const ControlPath& psi, const ModelSpec& model) {
  const std::size_t n = eta.grid().n_steps();
  RowMatrix r(n, model.dim_m());
  for (std::size_t i = 0; i < n; ++i)
    r.row(idx(i)) = (model.observe(eta.node(i)) - model.observe(reference.node(i)) - psi.step(i)).transpose();
  return r;
}

double objective_at(const ActionProblem& p, const ControlPath& u, const Path& eta) {
  double value = 0.5 * u.squared_l2_norm() + eval_H(eta, p.reference, p.psi, p.model);
  if (p.phi_test) value += p.phi_test->value(eta.view());
  return value;
}

struct Descent {
  Eigen::VectorXd v;
  double value;
  double grad_norm;
  bool converged;
  std::string status;
};

Descent descend(const ActionProblem& p, const ControlBasis& basis, const Eigen::VectorXd& start,
                const OptimizerOptions& opts) {
  const Objective f = [&](const Eigen::VectorXd& v, Eigen::VectorXd& grad) {
    const ControlPath u = basis.expand(v);
    double value;
    try {
      value = action_objective(p, u);
    } catch (const NonFiniteState&) {
      return std::numeric_limits<double>::infinity();
    }
    const RowMatrix g = opts.finite_difference ? action_gradient_fd(p, u, opts.fd_step) : action_gradient(p, u);
    grad = basis.collapse(g);
    return value;
  };
  LbfgsOptions lo;
  lo.max_iters = opts.max_iters;
  lo.grad_tol = opts.grad_tol;
  LbfgsResult r = lbfgs_minimize(f, start, lo);
  return {std::move(r.x), r.value, r.grad_norm, r.converged, r.status};
}

bool better(double va, double na, double vb, double nb) {
  if (va != vb) return va < vb;
  return na < nb;
}

VariationalSolution make_solution(const ActionProblem& p, const ControlBasis& basis, const Descent& d) {
  ControlPath u = basis.expand(d.v);
  Path eta = integrate_flow(p.model, u);
  const double value = objective_at(p, u, eta);
  return VariationalSolution{value, std::move(u), std::move(eta), 1, d.grad_norm, d.converged, 0, {value},
                             d.status};
}

}  // namespace

// --- Functionals ------------------------------------------------------------------

double eval_H(const Path& eta, const Path& reference, const ControlPath& psi, const ModelSpec& model) {
  require_same_grid(eta.grid(), reference.grid(), "eval_H");
  require_same_grid(eta.grid(), psi.grid(), "eval_H");
  if (psi.dim() != model.dim_m()) throw ValidationError("psi must have dimension m");
  const RowMatrix r = residuals(eta, reference, psi, model);
  const double dt = eta.grid().dt();
  double s = 0.0;
  for (Eigen::Index i = 0; i < r.rows(); ++i) s += r.row(i).squaredNorm();
  return 0.5 * s * dt;
}

double eval_J_closed_form(const Path& eta, const ModelSpec& model) {
  if (model.dim_d() != model.dim_k()) throw ValidationError("closed-form action needs a square diffusion (d = k)");
  const TimeGrid& grid = eta.grid();
  const double dt = grid.dt();
  double s = 0.0;
  for (std::size_t i = 0; i < grid.n_steps(); ++i) {
    const Vec x = eta.node(i);
    const Mat sig = model.diffusion(x);
    Eigen::JacobiSVD<Mat> svd(sig, Eigen::ComputeFullU | Eigen::ComputeFullV);
    if (svd.singularValues().minCoeff() < kMinSingular) throw SingularSigma(i);
    const Vec rhs = (eta.node(i + 1) - x) / dt - model.drift(x);
    const Vec u = svd.solve(rhs);
    s += u.squaredNorm();
  }
  return 0.5 * s * dt;
}

std::vector<std::size_t> piece_boundaries(std::size_t n_steps, std::size_t pieces) {
  if (pieces == 0 || pieces > n_steps) pieces = n_steps;
  std::vector<std::size_t> b(pieces + 1);
  for (std::size_t j = 0; j <= pieces; ++j) b[j] = j * n_steps / pieces;
  return b;
}

ControlBasis::ControlBasis(const TimeGrid& grid, std::size_t k, std::size_t pieces)
    : grid_(grid), k_(k), bounds_(piece_boundaries(grid.n_steps(), pieces)) {
  for (std::size_t j = 0; j + 1 < bounds_.size(); ++j)
    scale_.push_back(std::sqrt(static_cast<double>(bounds_[j + 1] - bounds_[j]) * grid.dt()));
}

ControlPath ControlBasis::expand(const Eigen::VectorXd& v) const {
  RowMatrix u(grid_.n_steps(), k_);
  for (std::size_t j = 0; j < pieces(); ++j)
    for (std::size_t i = bounds_[j]; i < bounds_[j + 1]; ++i)
      for (std::size_t c = 0; c < k_; ++c) u(idx(i), idx(c)) = v[idx(j * k_ + c)] / scale_[j];
  return ControlPath(grid_, std::move(u));
}

Eigen::VectorXd ControlBasis::collapse(const RowMatrix& g) const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(idx(size()));
  for (std::size_t j = 0; j < pieces(); ++j)
    for (std::size_t c = 0; c < k_; ++c) {
      double s = 0.0;
      for (std::size_t i = bounds_[j]; i < bounds_[j + 1]; ++i) s += g(idx(i), idx(c));
      out[idx(j * k_ + c)] = s / scale_[j];
    }
  return out;
}

Eigen::VectorXd ControlBasis::project(const ControlPath& u) const {
  Eigen::VectorXd out(idx(size()));
  for (std::size_t j = 0; j < pieces(); ++j)
    for (std::size_t c = 0; c < k_; ++c) {
      double s = 0.0;
      for (std::size_t i = bounds_[j]; i < bounds_[j + 1]; ++i) s += u.values()(idx(i), idx(c));
      out[idx(j * k_ + c)] = s / static_cast<double>(bounds_[j + 1] - bounds_[j]) * scale_[j];
    }
  return out;
}

Eigen::VectorXd ControlBasis::random_start(std::uint64_t seed, std::uint64_t index, double scale) const {
  const rng::CounterStream stream(seed, index);
  std::vector<double> z(size());
  stream.normals(0, z.data(), z.size());
  Eigen::VectorXd v(idx(size()));
  for (std::size_t j = 0; j < pieces(); ++j)
    for (std::size_t c = 0; c < k_; ++c) v[idx(j * k_ + c)] = scale * z[j * k_ + c] * scale_[j];
  return v;
}

ActionProblem ActionProblem::around(const ModelSpec& model, const ControlPath& phi_ctrl, std::optional<ControlPath> psi,
                                    FunctionalPtr phi_test) {
  Path ref = integrate_flow(model, phi_ctrl);
  ControlPath ps = psi ? std::move(*psi) : ControlPath::zero(phi_ctrl.grid(), model.dim_m());
  return ActionProblem{model, std::move(ref), std::move(ps), std::move(phi_test)};
}

double action_objective(const ActionProblem& p, const ControlPath& u) {
  check_problem(p);
  require_same_grid(u.grid(), p.grid(), "action_objective");
  return objective_at(p, u, integrate_flow(p.model, u));
}

RowMatrix action_gradient(const ActionProblem& p, const ControlPath& u) {
  check_problem(p);
  require_same_grid(u.grid(), p.grid(), "action_gradient");
  const FlowLinearization lin = linearize_flow(p.model, u);
  const Path& eta = lin.path;
  const std::size_t n = p.grid().n_steps(), d = p.model.dim_d();
  const double dt = p.grid().dt();
  const RowMatrix r = residuals(eta, p.reference, p.psi, p.model);

  RowMatrix cot = RowMatrix::Zero(idx(n + 1), idx(d));
  for (std::size_t i = 0; i < n; ++i)
    cot.row(idx(i)) = dt * (p.model.observe_jacobian(eta.node(i)).transpose() * r.row(idx(i)).transpose()).transpose();
  if (p.phi_test) p.phi_test->add_gradient(eta.view(), 1.0, cot);
  RowMatrix g = flow_vjp(lin, cot);
  g += dt * u.values();
  return g;
}

RowMatrix action_gradient_fd(const ActionProblem& p, const ControlPath& u, double h) {
  RowMatrix g(u.values().rows(), u.values().cols());
  RowMatrix v = u.values();
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
      const double orig = v(i, c);
      v(i, c) = orig + h;
      const double fp = action_objective(p, ControlPath(u.grid(), v));
      v(i, c) = orig - h;
      const double fm = action_objective(p, ControlPath(u.grid(), v));
      v(i, c) = orig;
      g(i, c) = (fp - fm) / (2.0 * h);
    }
  return g;
}

ActionSensitivity action_sensitivity(const ActionProblem& p, const ControlPath& u) {
  check_problem(p);
  const Path eta = integrate_flow(p.model, u);
  const RowMatrix r = residuals(eta, p.reference, p.psi, p.model);
  const std::size_t n = p.grid().n_steps(), d = p.model.dim_d();
  const double dt = p.grid().dt();
  ActionSensitivity s{-dt * r, RowMatrix::Zero(idx(n + 1), idx(d))};
  for (std::size_t i = 0; i < n; ++i)
    s.d_reference.row(idx(i)) =
        -dt * (p.model.observe_jacobian(p.reference.node(i)).transpose() * r.row(idx(i)).transpose()).transpose();
  return s;
}

// --- Minimization -----------------------------------------------------------------

VariationalSolution minimize_action(const ActionProblem& p, const OptimizerOptions& opts,
                                    const std::vector<ControlPath>& warm_starts) {
  check_problem(p);
  if (opts.n_restarts == 0) throw ValidationError("n_restarts must be >= 1");
  if (p.phi_test && !p.phi_test->smooth() && !opts.finite_difference)
    throw ValidationError("functional '" + p.phi_test->id() + "' is not smooth; gradient solves need a smooth one");
  const ControlBasis basis(p.grid(), p.model.dim_k(), opts.pieces);
  const Eigen::Index dim = idx(basis.size());

  std::vector<Eigen::VectorXd> starts;
  starts.push_back(Eigen::VectorXd::Zero(dim));
  for (const auto& w : warm_starts) {
    require_same_grid(w.grid(), p.grid(), "minimize_action warm start");
    starts.push_back(basis.project(w));
  }
  for (std::size_t r = 1; r < opts.n_restarts; ++r) starts.push_back(basis.random_start(opts.seed, r, opts.restart_scale));

  std::vector<std::optional<Descent>> results(starts.size());
  std::vector<std::string> errors(starts.size());
  parallel_for(
      starts.size(),
      [&](std::size_t begin, std::size_t end) {
        for (std::size_t s = begin; s < end; ++s) results[s] = descend(p, basis, starts[s], opts);
      },
      opts.workers);

  std::size_t best = 0;
  for (std::size_t s = 1; s < results.size(); ++s)
    if (better(results[s]->value, results[s]->v.squaredNorm(), results[best]->value, results[best]->v.squaredNorm()))
      best = s;

  VariationalSolution sol = make_solution(p, basis, *results[best]);
  sol.n_restarts_used = starts.size();
  sol.best_restart = best;
  sol.restart_values.clear();
  for (const auto& r : results) sol.restart_values.push_back(r->value);
  if (!sol.converged && opts.strict)
    throw NotConverged("action minimization did not converge (" + sol.status + ", gradient norm " +
                           format_double(sol.gradient_norm_at_opt) + ")",
                       std::move(sol));
  return sol;
}

// --- V0 ------------------------------------------------------------------------------

V0Result compute_V0_detail(const ModelSpec& model, const ControlPath& phi_ctrl, const ControlPath& psi,
                           const FunctionalPtr& phi_test, const OptimizerOptions& opts, const V0WarmStart& warm) {
  if (!phi_test) throw ValidationError("compute_V0 needs a test functional");
  ActionProblem without = ActionProblem::around(model, phi_ctrl, psi, nullptr);
  ActionProblem with = without;
  with.phi_test = phi_test;

  OptimizerOptions lax = opts;
  lax.strict = false;
  std::vector<ControlPath> wb, wa;
  if (warm.without_phi) wb.push_back(*warm.without_phi);
  VariationalSolution b = minimize_action(without, lax, wb);
  wa.push_back(b.optimal_control);
  if (warm.with_phi) wa.push_back(*warm.with_phi);
  VariationalSolution a = minimize_action(with, lax, wa);

  // Each infimum must not exceed the other problem's minimizer evaluated in
  // it; re-descend from there until both hold.
  OptimizerOptions single = lax;
  single.n_restarts = 1;
  for (int round = 0; round < 20; ++round) {
    bool changed = false;
    if (action_objective(without, a.optimal_control) < b.optimal_value) {
      VariationalSolution nb = minimize_action(without, single, {a.optimal_control});
      if (nb.optimal_value < b.optimal_value) {
        b = std::move(nb);
        changed = true;
      }
    }
    if (action_objective(with, b.optimal_control) < a.optimal_value) {
      VariationalSolution na = minimize_action(with, single, {b.optimal_control});
      if (na.optimal_value < a.optimal_value) {
        a = std::move(na);
        changed = true;
      }
    }
    if (!changed) break;
  }

  if (opts.strict && !(a.converged && b.converged)) {
    const bool a_bad = !a.converged;
    VariationalSolution& bad = a_bad ? a : b;
    throw NotConverged(std::string("V0 inner solve ") + (a_bad ? "with" : "without") +
                           " the test functional did not converge (" + bad.status + ")",
                       bad);
  }
  // The pair satisfies inf phi <= V0 <= sup phi exactly; only the rounding
  // of the two sums can step outside.
  double value = a.optimal_value - b.optimal_value;
  if (phi_test) value = std::clamp(value, phi_test->bounds().lo, phi_test->bounds().hi);
  return V0Result{value, std::move(a), std::move(b)};
}

double compute_V0(const ModelSpec& model, const ControlPath& phi_ctrl, const ControlPath& psi,
                  const FunctionalPtr& phi_test, const OptimizerOptions& opts) {
  return compute_V0_detail(model, phi_ctrl, psi, phi_test, opts).value;
}

// --- Serialization -------------------------------------------------------------------

std::string control_to_csv(const ControlPath& u) {
  std::ostringstream os;
  os << "t";
  for (std::size_t c = 0; c < u.dim(); ++c) os << ",u" << c;
  os << '\n';
  for (std::size_t i = 0; i < u.grid().n_steps(); ++i) {
    os << format_double(u.grid().time(i));
    for (std::size_t c = 0; c < u.dim(); ++c) os << ',' << format_double(u.values()(idx(i), idx(c)));
    os << '\n';
  }
  return os.str();
}

ControlPath control_from_csv(const TimeGrid& grid, const std::string& csv) {
  std::istringstream is(csv);
  std::string line;
  if (!std::getline(is, line)) throw ValidationError("control CSV is empty");
  const auto cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  RowMatrix v(grid.n_steps(), cols);
  std::size_t row = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (row >= grid.n_steps()) throw ValidationError("control CSV has more rows than grid steps");
    std::istringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    for (std::size_t c = 0; c < cols; ++c) {
      if (!std::getline(ls, cell, ',')) throw ValidationError("control CSV row is short");
      v(idx(row), idx(c)) = std::stod(cell);
    }
    ++row;
  }
  if (row != grid.n_steps()) throw ValidationError("control CSV has fewer rows than grid steps");
  return ControlPath(grid, std::move(v));
}

nlohmann::json VariationalSolution::to_json() const {
  std::ostringstream path_csv;
  write_csv(path_csv, optimal_path);
  return {{"optimal_value", optimal_value},
          {"control_cost", control_cost()},
          {"gradient_norm_at_opt", gradient_norm_at_opt},
          {"converged", converged},
          {"status", status},
          {"n_restarts_used", n_restarts_used},
          {"best_restart", best_restart},
          {"restart_values", restart_values},
          {"n_steps", optimal_control.grid().n_steps()},
          {"horizon", optimal_control.grid().horizon()},
          {"optimal_control_csv", control_to_csv(optimal_control)},
          {"optimal_path_csv", path_csv.str()}};
}

}  // namespace mortensen
