#pragma once

// Exact Gaussian filter and smoother for the linear1d model discretized as
// the ensemble simulates it:
//   X_{i+1} = (1 + a dt) X_i + eps s dW_i,   dY_i = c X_i dt + eps dB_i,
// with X_0 = x0 deterministic. Because the Euler-Maruyama chain is itself
// linear-Gaussian, these moments are the exact target of the weighted
// ensemble on the same grid (no time-discretization bias).

#include <vector>

#include "mortensen/model.hpp"
#include "mortensen/path.hpp"

namespace mortensen {

struct KalmanResult {
  // Moments of X_i given all increments dY_0 .. dY_{n-1}, i = 0..n.
  std::vector<double> smoothed_mean;
  std::vector<double> smoothed_variance;
  // Moments of X_i given dY_0 .. dY_{i-1}.
  std::vector<double> predicted_mean;
  std::vector<double> predicted_variance;

  [[nodiscard]] double terminal_mean() const { return smoothed_mean.back(); }
  [[nodiscard]] double terminal_variance() const { return smoothed_variance.back(); }
};

KalmanResult kalman_smoother(const LinearGaussian& lg, double x0, double eps, const Path& observation);

}  // namespace mortensen
