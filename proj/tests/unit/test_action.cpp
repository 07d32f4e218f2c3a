#include <array>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "doctest.h"
#include "mortensen/action.hpp"
#include "mortensen/error.hpp"
#include "oracles/linear_control.hpp"

using namespace mortensen;

namespace {

Vec v1(double x) { return Vec::Constant(1, x); }

Path sampled(const TimeGrid& g, const std::function<double(double)>& f) {
  RowMatrix v(g.n_nodes(), 1);
  for (std::size_t i = 0; i < g.n_nodes(); ++i) v(static_cast<Eigen::Index>(i), 0) = f(g.time(i));
  return Path(g, std::move(v));
}

ControlPath sampled_control(const TimeGrid& g, const std::function<double(double)>& f) {
  RowMatrix v(g.n_steps(), 1);
  for (std::size_t i = 0; i < g.n_steps(); ++i) v(static_cast<Eigen::Index>(i), 0) = f(g.time(i));
  return ControlPath(g, std::move(v));
}

ModelSpec unit_brownian() {
  ModelDefinition def;
  def.name = "unit";
  def.x0 = v1(0.0);
  def.maps.drift = [](const Vec&) -> Vec { return v1(0.0); };
  def.maps.diffusion = [](const Vec&) -> Mat { return Mat::Ones(1, 1); };
  def.maps.observe = [](const Vec& x) -> Vec { return x; };
  return ModelSpec(std::move(def));
}

double simpson(const std::function<double(double)>& f, double a, double b, int n = 20000) {
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * f(a + i * h);
  return s * h / 3.0;
}

OptimizerOptions quick(std::size_t restarts = 1) {
  OptimizerOptions o;
  o.n_restarts = restarts;
  o.grad_tol = 1e-9;
  return o;
}

// Exhaustive search over piece values on a nested sequence of 11-point
// grids, each centred on the previous best and five times finer.
double brute_force(const std::function<double(const std::array<double, 5>&)>& f, double half_width, int levels) {
  std::array<double, 5> centre{}, best_point{};
  double best = f(centre);
  for (int level = 0; level < levels; ++level) {
    const double h = half_width / 5.0;
    std::array<double, 5> v{};
    for (int a = 0; a < 11; ++a)
      for (int b = 0; b < 11; ++b)
        for (int c = 0; c < 11; ++c)
          for (int d = 0; d < 11; ++d)
            for (int e = 0; e < 11; ++e) {
              const int idx[5] = {a, b, c, d, e};
              for (int j = 0; j < 5; ++j) v[j] = centre[j] + (idx[j] - 5) * h;
              const double val = f(v);
              if (val < best) best = val, best_point = v;
            }
    centre = best_point;
    half_width /= 5.0;
  }
  return best;
}

}  // namespace

TEST_SUITE("action") {
  TEST_CASE("eval_H examples") {
    const ModelSpec m = unit_brownian();
    const TimeGrid g(10000, 1.0);
    const Path eta = sampled(g, [](double t) { return t; });
    CHECK(eval_H(eta, eta, ControlPath::zero(g, 1), m) == 0.0);
    CHECK(std::abs(eval_H(eta, Path::constant(g, v1(0.0)), ControlPath::zero(g, 1), m) - 1.0 / 6.0) <= 1e-4);
    CHECK_THROWS_AS(eval_H(eta, Path::constant(TimeGrid(5, 1.0), v1(0.0)), ControlPath::zero(g, 1), m), GridMismatch);
  }

  TEST_CASE("eval_H converges to the Simpson integral at first order") {
    const ModelSpec m = build_model("ou_nlobs", {{"c", 1.5}});
    auto eta = [](double t) { return std::sin(3.0 * t) + 0.5 * t; };
    auto ref = [](double t) { return std::cos(2.0 * t); };
    auto psi = [](double t) { return 0.3 * t * t - 0.2; };
    const double exact = simpson([&](double t) {
      const double r = std::sin(1.5 * eta(t)) - std::sin(1.5 * ref(t)) - psi(t);
      return 0.5 * r * r;
    }, 0.0, 1.0);
    std::vector<double> err;
    for (std::size_t n : {100u, 200u, 400u}) {
      const TimeGrid g(n, 1.0);
      err.push_back(std::abs(eval_H(sampled(g, eta), sampled(g, ref), sampled_control(g, psi), m) - exact));
      CHECK(err.back() <= 2.0 * g.dt());
    }
    CHECK(err[1] < 0.6 * err[0]);
    CHECK(err[2] < 0.6 * err[1]);
  }

  TEST_CASE("eval_J_closed_form examples") {
    const ModelSpec lin = build_model("linear1d", {{"a", -1}, {"s", 1}, {"x0", 1}});
    const TimeGrid g(1000, 1.0);
    CHECK(eval_J_closed_form(integrate_flow(lin, ControlPath::zero(g, 1)), lin) <= 1e-3);
    const ModelSpec unit = unit_brownian();
    CHECK(std::abs(eval_J_closed_form(sampled(g, [](double t) { return t; }), unit) - 0.5) <= 1e-6);
    // eta = e^{-t} + t gives eta' - b(eta) = 1 + t.
    const Path eta = sampled(g, [](double t) { return std::exp(-t) + t; });
    CHECK(std::abs(eval_J_closed_form(eta, lin) - 7.0 / 6.0) <= 1e-3);

    const ModelSpec frozen = build_model("linear1d", {{"s", 0.0}});
    CHECK_THROWS_AS(eval_J_closed_form(eta, frozen), SingularSigma);

    ModelDefinition wide;
    wide.name = "wide";
    wide.dim_k = 2;
    wide.x0 = v1(0.0);
    wide.maps.drift = [](const Vec&) -> Vec { return v1(0.0); };
    wide.maps.diffusion = [](const Vec&) -> Mat { return Mat::Ones(1, 2); };
    wide.maps.observe = [](const Vec& x) -> Vec { return x; };
    CHECK_THROWS_AS(eval_J_closed_form(eta, ModelSpec(wide)), ValidationError);
  }

  TEST_CASE("closed-form J of a controlled flow is its control cost") {
    const TimeGrid g(400, 1.0);
    const ControlPath u = sampled_control(g, [](double t) { return std::sin(4.0 * t) + 0.3; });
    for (const char* name : {"linear1d", "ou_nlobs", "doublewell"}) {
      CAPTURE(name);
      const ModelSpec m = build_model(name);
      const double j = eval_J_closed_form(integrate_flow(m, u), m);
      CHECK(std::abs(j - 0.5 * u.squared_l2_norm()) <= 20.0 * g.dt());
    }
  }

  TEST_CASE("piece boundaries and basis") {
    CHECK(piece_boundaries(10, 3) == std::vector<std::size_t>{0, 3, 6, 10});
    CHECK(piece_boundaries(4, 0) == std::vector<std::size_t>{0, 1, 2, 3, 4});
    CHECK(piece_boundaries(4, 9) == std::vector<std::size_t>{0, 1, 2, 3, 4});
    const TimeGrid g(10, 1.0);
    const ControlBasis b(g, 1, 3);
    Eigen::VectorXd v(3);
    v << 0.3, -1.0, 2.0;
    const ControlPath u = b.expand(v);
    CHECK(0.5 * u.squared_l2_norm() == doctest::Approx(0.5 * v.squaredNorm()).epsilon(1e-14));
    CHECK((b.project(u) - v).norm() < 1e-14);
  }

  TEST_CASE("trivial minimizations are exact") {
    const ModelSpec m = build_model("doublewell");
    const TimeGrid g(50, 1.0);
    const ControlPath zero = ControlPath::zero(g, 1);
    const ActionProblem plain = ActionProblem::around(m, zero);
    const VariationalSolution s = minimize_action(plain, OptimizerOptions{});
    CHECK(s.optimal_value == 0.0);
    CHECK(s.optimal_control.values().cwiseAbs().maxCoeff() == 0.0);
    CHECK(s.converged);
    CHECK(s.n_restarts_used == 8);

    const VariationalSolution c = minimize_action(ActionProblem::around(m, zero, std::nullopt, make_constant(0.4)), {});
    CHECK(c.optimal_value == 0.4);
    CHECK(c.optimal_control.values().cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("quadratic terminal cost matches the LQR oracle") {
    const double a = -1, s = 1, c = 1, q = 2.0;
    const ModelSpec m = build_model("linear1d", {{"a", a}, {"s", s}, {"c", c}});
    const TimeGrid g(200, 1.0);
    const ActionProblem p = ActionProblem::around(m, ControlPath::zero(g, 1), std::nullopt,
                                                  make_terminal_quadratic(q, 10.0));
    const VariationalSolution sol = minimize_action(p, quick(2));
    CHECK(sol.converged);
    CHECK(std::abs(sol.optimal_value - oracle::lqr_terminal_quadratic(a, s, c, 1.0, 1.0, 200, q)) <= 1e-3);
  }

  TEST_CASE("V0 examples") {
    const ModelSpec m = build_model("linear1d");
    const TimeGrid g(40, 1.0);
    const ControlPath zk = ControlPath::zero(g, 1), zm = ControlPath::zero(g, 1);
    CHECK(std::abs(compute_V0(m, zk, zm, make_constant(0.3), quick()) - 0.3) <= 2e-6);
    CHECK(std::abs(compute_V0(m, zk, zm, make_constant(0.0), quick())) <= 1e-8);

    std::mt19937_64 gen(3);
    std::normal_distribution<double> z(0.0, 1.0);
    for (int trial = 0; trial < 10; ++trial) {
      RowMatrix phi(40, 1), psi(40, 1);
      for (int i = 0; i < 40; ++i) phi(i, 0) = z(gen), psi(i, 0) = z(gen);
      const auto f = make_sup_clamp(0.2, 0.9, 0.05);
      const double v = compute_V0(m, ControlPath(g, phi), ControlPath(g, psi), f, quick());
      CHECK(v >= f->bounds().lo);
      CHECK(v <= f->bounds().hi);
    }
  }

  TEST_CASE("V0 matches exhaustive search over five-piece controls") {
    const double a = -1, s = 1, c = 1, x0 = 1;
    const int n = 10;
    const ModelSpec m = build_model("linear1d", {{"a", a}, {"s", s}, {"c", c}, {"x0", x0}});
    const TimeGrid g(n, 1.0);
    const auto phi = make_terminal_clamp(0.0, 1.0);
    const oracle::LinearResponse lr = oracle::linear_response(a, s, 1.0, n);
    const Eigen::MatrixXd E = oracle::piece_basis(n, 5);
    const double xs_n = x0 * std::pow(oracle::zoh(a, s, lr.dt).A, n);
    auto objective = [&](const std::array<double, 5>& v, bool with_phi) {
      const Eigen::VectorXd step = E * Eigen::Map<const Eigen::VectorXd>(v.data(), 5);
      const Eigen::VectorXd dev = lr.nodes * step;
      double track = 0.0;
      for (int i = 0; i < n; ++i) track += c * c * dev[i] * dev[i];
      const double base = 0.5 * step.squaredNorm() + 0.5 * track * lr.dt;
      return with_phi ? base + soft_clamp(xs_n + dev[n], 0.0, 1.0, kSoftTemperature) : base;
    };
    const double inf_with = brute_force([&](const std::array<double, 5>& v) { return objective(v, true); }, 1.0, 4);
    const double inf_without = brute_force([&](const std::array<double, 5>& v) { return objective(v, false); }, 1.0, 2);
    OptimizerOptions o = quick(4);
    o.pieces = 5;
    const double v0 = compute_V0(m, ControlPath::zero(g, 1), ControlPath::zero(g, 1), phi, o);
    CHECK(std::abs(v0 - (inf_with - inf_without)) <= 5e-3);
  }

  TEST_CASE("adjoint gradient matches central differences") {
    std::mt19937_64 gen(21);
    std::normal_distribution<double> z(0.0, 1.0);
    for (const char* name : {"linear1d", "ou_nlobs", "doublewell"}) {
      CAPTURE(name);
      const ModelSpec m = build_model(name);
      const TimeGrid g(30, 1.0);
      RowMatrix phi(30, 1), psi(30, 1), u(30, 1);
      for (int i = 0; i < 30; ++i) phi(i, 0) = 0.5 * z(gen), psi(i, 0) = 0.5 * z(gen), u(i, 0) = 0.7 * z(gen);
      const ActionProblem p =
          ActionProblem::around(m, ControlPath(g, phi), ControlPath(g, psi), make_sup_clamp(0.0, 2.0, 0.1));
      const RowMatrix adj = action_gradient(p, ControlPath(g, u));
      const RowMatrix fd = action_gradient_fd(p, ControlPath(g, u), 1e-6);
      CHECK((adj - fd).norm() <= 1e-4 * fd.norm());
    }
  }

  TEST_CASE("solutions are reproducible and replayable") {
    const ModelSpec m = build_model("doublewell", {{"x0", -1.0}});
    const TimeGrid g(40, 1.0);
    const ActionProblem p = ActionProblem::around(m, ControlPath::zero(g, 1), std::nullopt, make_terminal_clamp(0.0, 1.0, -1.0, 0.0));
    OptimizerOptions o;
    o.workers = 1;
    const VariationalSolution a = minimize_action(p, o);
    o.workers = 4;
    const VariationalSolution b = minimize_action(p, o);
    CHECK(a.optimal_value == b.optimal_value);
    CHECK(a.optimal_control.values() == b.optimal_control.values());
    CHECK(a.best_restart == b.best_restart);
    CHECK(a.restart_values == b.restart_values);

    CHECK(a.optimal_value <= action_objective(p, ControlPath::zero(g, 1)));
    CHECK(a.optimal_path.values() == integrate_flow(m, a.optimal_control).values());
    CHECK(std::abs(action_objective(p, a.optimal_control) - a.optimal_value) <= 1e-10);

    const nlohmann::json j = nlohmann::json::parse(a.to_json().dump());
    const ControlPath replay = control_from_csv(g, j.at("optimal_control_csv").get<std::string>());
    CHECK(std::abs(action_objective(p, replay) - j.at("optimal_value").get<double>()) <= 1e-10);
  }

  TEST_CASE("non-convergence keeps the best iterate") {
    const ModelSpec m = build_model("doublewell");
    const TimeGrid g(40, 1.0);
    const ActionProblem p = ActionProblem::around(m, ControlPath::zero(g, 1), std::nullopt, make_terminal_clamp(-1.0, 1.0, -1.0, 0.0));
    OptimizerOptions o;
    o.max_iters = 1;
    o.n_restarts = 2;
    try {
      (void)minimize_action(p, o);
      FAIL("expected NotConverged");
    } catch (const NotConverged& e) {
      CHECK_FALSE(e.best().converged);
      CHECK(e.best().optimal_value <= action_objective(p, ControlPath::zero(g, 1)));
      CHECK(e.best().restart_values.size() == 2);
    }
    o.strict = false;
    CHECK_FALSE(minimize_action(p, o).converged);
  }
}
