#include <cmath>
#include <vector>

#include "doctest.h"
#include "mortensen/error.hpp"
#include "mortensen/rate.hpp"
#include "oracles/linear_control.hpp"

using namespace mortensen;

namespace {

RateOptions small_rate(std::size_t outer_pieces) {
  RateOptions o;
  o.outer_pieces = outer_pieces;
  o.inner.n_restarts = 1;
  return o;
}

}  // namespace

TEST_SUITE("rate") {
  TEST_CASE("rate vanishes at the typical value") {
    const ModelSpec m = build_model("linear1d");
    const TimeGrid g(20, 1.0);
    const auto phi = make_terminal_clamp(0.0, 1.0);
    const RateOptions o = small_rate(5);
    const double zs = typical_value(m, phi, g, o.inner);
    const RatePoint p = rate_at(m, phi, g, zs, o);
    CHECK(p.feasible);
    CHECK(p.rate <= 1e-3);
    CHECK(p.phi_ctrl.values().cwiseAbs().maxCoeff() <= 1e-3);
    CHECK(p.psi_ctrl.values().cwiseAbs().maxCoeff() <= 1e-3);
  }

  TEST_CASE("levels outside the functional range are infeasible") {
    const ModelSpec m = build_model("linear1d");
    const TimeGrid g(10, 1.0);
    const auto phi = make_terminal_clamp(0.0, 1.0);
    CHECK_THROWS_AS(rate_at(m, phi, g, 1.5, small_rate(2)), Infeasible);
    CHECK_THROWS_AS(rate_at(m, phi, g, -0.5, small_rate(2)), Infeasible);
    CHECK_THROWS_AS(rate_at(m, phi, g, 0.3, [] {
      RateOptions o = small_rate(2);
      o.lambda_factor = 1.0;
      return o;
    }()), ValidationError);
  }

  TEST_CASE("rate matches the semi-analytic linear oracle") {
    const int n = 16, pieces = 5;
    const ModelSpec m = build_model("linear1d");
    const TimeGrid g(n, 1.0);
    const auto phi = make_terminal_clamp(0.0, 1.0);
    const oracle::LinearRateOracle ref(-1.0, 1.0, 1.0, 1.0, 1.0, n, pieces,
                                       [](double s) { return soft_clamp(s, 0.0, 1.0, kSoftTemperature); });
    const RateOptions o = small_rate(pieces);
    const double zs = typical_value(m, phi, g, o.inner);
    CHECK(std::abs(zs - ref.z_star()) <= 1e-3);
    for (double z : {0.4 * zs, 0.75 * zs, zs + 0.1, zs + 0.2, zs + 0.35}) {
      CAPTURE(z);
      const RatePoint p = rate_at(m, phi, g, z, o);
      const double expected = ref.rate(z);
      CAPTURE(expected);
      CAPTURE(p.rate);
      CHECK(p.feasible);
      CHECK(std::abs(p.rate - expected) <= 0.1 * expected);
    }
  }

  TEST_CASE("rate points are reproducible from their controls") {
    const ModelSpec m = build_model("ou_nlobs");
    const TimeGrid g(20, 1.0);
    const auto phi = make_terminal_clamp(-1.0, 1.0);
    const RateOptions o = small_rate(4);
    const double zs = typical_value(m, phi, g, o.inner);
    const RatePoint p = rate_at(m, phi, g, zs + 0.2, o);
    CHECK(p.feasible);
    CHECK(p.monotone);
    CHECK(p.rate == 0.5 * p.phi_ctrl.squared_l2_norm() + 0.5 * p.psi_ctrl.squared_l2_norm());
    const double v0 = compute_V0(m, p.phi_ctrl, p.psi_ctrl, phi, o.inner);
    CHECK(std::abs(v0 - (zs + 0.2)) <= o.tol);
    CHECK(std::abs(v0 - p.v0) <= 1e-9);
    for (std::size_t j = 1; j < p.stages.size(); ++j) CHECK(p.stages[j].lambda == 10.0 * p.stages[j - 1].lambda);
    CHECK(p.to_json().at("feasible").get<bool>());
  }

  TEST_CASE("profile contains z* and grows away from it") {
    const ModelSpec m = build_model("linear1d");
    const TimeGrid g(16, 1.0);
    const auto phi = make_terminal_clamp(0.0, 1.0);
    const RateOptions o = small_rate(4);
    const double zs = typical_value(m, phi, g, o.inner);

    const RateProfile only = profile(m, phi, g, {zs}, o);
    REQUIRE(only.points.size() == 1);
    CHECK(only.points[0].rate <= 1e-3);

    const RateProfile p = profile(m, phi, g, {0.3 * zs, 0.7 * zs, zs + 0.1, zs + 0.25, 1.2}, o);
    REQUIRE(p.points.size() == 6);
    std::size_t star = 0;
    for (std::size_t i = 0; i < p.points.size(); ++i)
      if (p.points[i].z == p.z_star) star = i;
    CHECK(p.points[star].rate <= 1e-3);
    for (std::size_t i = 0; i + 1 < p.points.size(); ++i) CHECK(p.points[i].z < p.points[i + 1].z);
    // 1.2 lies above the range: flagged, never fatal.
    CHECK_FALSE(p.points.back().feasible);
    CHECK(std::isinf(p.points.back().rate));
    for (std::size_t i = star + 1; i + 1 < p.points.size(); ++i) CHECK(p.points[i].rate > p.points[i - 1].rate);
    for (std::size_t i = star; i-- > 0;) CHECK(p.points[i].rate > p.points[i + 1].rate);
    const std::string csv = p.to_csv();
    CHECK(csv.rfind("z,rate,residual,feasible\n", 0) == 0);
    CHECK(p.to_json().at("points").size() == 6);
  }

  TEST_CASE("rate is lower semicontinuous on a fine grid") {
    const ModelSpec m = build_model("linear1d");
    const TimeGrid g(16, 1.0);
    const auto phi = make_terminal_clamp(0.0, 1.0);
    const RateOptions o = small_rate(4);
    const double z0 = typical_value(m, phi, g, o.inner) + 0.15;
    const double centre = rate_at(m, phi, g, z0, o).rate;
    for (double dz : {-2e-3, -1e-3, 1e-3, 2e-3}) {
      const double side = rate_at(m, phi, g, z0 + dz, o).rate;
      CHECK(centre <= side + 0.05 * centre + 1e-4);
    }
  }
}
