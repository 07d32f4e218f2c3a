#include <array>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "mortensen/kalman.hpp"
#include "oracles/gaussian.hpp"

using namespace mortensen;

TEST_SUITE("kalman") {
  TEST_CASE("smoother matches dense Gaussian conditioning") {
    for (const auto& [a, s, c, eps] : std::vector<std::array<double, 4>>{
             {-1, 1, 1, 0.3}, {0.5, 2, -1, 0.5}, {-2, 0.5, 3, 0.1}, {-1, 1, 0, 0.3}}) {
      CAPTURE(a);
      const ModelSpec m = build_model("linear1d", {{"a", a}, {"s", s}, {"c", c}, {"x0", 0.7}});
      const TimeGrid g(80, 1.0);
      const Path y = simulate_pair(m, eps, g, 12).observation;
      std::vector<double> yv(81);
      for (int i = 0; i <= 80; ++i) yv[i] = y.values()(i, 0);
      const oracle::Moments o = oracle::terminal_posterior(a, s, c, 0.7, eps, 1.0, yv);
      const KalmanResult k = kalman_smoother(LinearGaussian{a, s, c}, 0.7, eps, y);
      CHECK(k.terminal_mean() == doctest::Approx(o.mean).epsilon(1e-10));
      CHECK(k.terminal_variance() == doctest::Approx(o.variance).epsilon(1e-10));
      CHECK(k.smoothed_mean.front() == 0.7);
      CHECK(k.smoothed_variance.front() == 0.0);
    }
  }

  TEST_CASE("blind observations leave the prior") {
    const double a = -1, s = 1;
    const ModelSpec m = build_model("linear1d", {{"a", a}, {"s", s}, {"c", 0}});
    const TimeGrid g(100, 1.0);
    const KalmanResult k = kalman_smoother(LinearGaussian{a, s, 0}, 1.0, 0.3, simulate_pair(m, 0.3, g, 2).observation);
    const double alpha = 1.0 + a * g.dt();
    CHECK(k.terminal_mean() == doctest::Approx(std::pow(alpha, 100)).epsilon(1e-12));
    double var = 0.0;
    for (int i = 0; i < 100; ++i) var = alpha * alpha * var + 0.09 * g.dt();
    CHECK(k.terminal_variance() == doctest::Approx(var).epsilon(1e-12));
  }
}
