#include "mortensen/kalman.hpp"

#include "mortensen/error.hpp"

namespace mortensen {

KalmanResult kalman_smoother(const LinearGaussian& lg, double x0, double eps, const Path& observation) {
  if (observation.dim() != 1) throw ValidationError("kalman_smoother needs a scalar observation");
  if (!(eps > 0.0)) throw ValidationError("eps must be positive");
  const TimeGrid& grid = observation.grid();
  const std::size_t n = grid.n_steps();
  const double dt = grid.dt();
  const double alpha = 1.0 + lg.a * dt;
  const double q = eps * eps * lg.s * lg.s * dt;  // process noise
  const double r = eps * eps * dt;                // observation noise
  const double hgain = lg.c * dt;
  const auto& y = observation.values();

  KalmanResult out;
  out.predicted_mean.resize(n + 1);
  out.predicted_variance.resize(n + 1);
  std::vector<double> fm(n + 1), fp(n + 1);  // after assimilating dY_i
  double m = x0, p = 0.0;
  for (std::size_t i = 0; i <= n; ++i) {
    out.predicted_mean[i] = m;
    out.predicted_variance[i] = p;
    if (i == n) {
      fm[i] = m;
      fp[i] = p;
      break;
    }
    const double dy = y(static_cast<Eigen::Index>(i + 1), 0) - y(static_cast<Eigen::Index>(i), 0);
    const double s = hgain * hgain * p + r;
    const double gain = p * hgain / s;
    m += gain * (dy - hgain * m);
    p = (1.0 - gain * hgain) * p;
    fm[i] = m;
    fp[i] = p;
    m = alpha * m;
    p = alpha * alpha * p + q;
  }

  // Rauch-Tung-Striebel backward pass.
  out.smoothed_mean.assign(n + 1, 0.0);
  out.smoothed_variance.assign(n + 1, 0.0);
  out.smoothed_mean[n] = fm[n];
  out.smoothed_variance[n] = fp[n];
  for (std::size_t i = n; i-- > 0;) {
    const double pred = out.predicted_variance[i + 1];
    const double g = pred > 0.0 ? fp[i] * alpha / pred : 0.0;
    out.smoothed_mean[i] = fm[i] + g * (out.smoothed_mean[i + 1] - out.predicted_mean[i + 1]);
    out.smoothed_variance[i] = fp[i] + g * g * (out.smoothed_variance[i + 1] - pred);
  }
  return out;
}

}  // namespace mortensen
