#pragma once

// Closed-form references for the scalar linear model x' = a x + s u with u
// constant on each step. The step map is the exact zero-order-hold
// discretization x_{i+1} = A x_i + B u_i, independent of the library's RK4.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

struct Zoh {
  double A;
  double B;
};

inline Zoh zoh(double a, double s, double dt) {
  const double A = std::exp(a * dt);
  const double B = a == 0.0 ? s * dt : s * std::expm1(a * dt) / a;
  return {A, B};
}

/// min over u of 1/2 sum u_i^2 dt + 1/2 sum_{i<n} c^2 (x_i - xs_i)^2 dt + q x_n^2,
/// where xs is the uncontrolled path. Backward Riccati recursion on the
/// deviation d = x - xs with value 1/2 P d^2 + p d + const.
inline double lqr_terminal_quadratic(double a, double s, double c, double x0, double horizon, int n, double q) {
  const double dt = horizon / n;
  const auto [A, B] = zoh(a, s, dt);
  const double xs_n = x0 * std::pow(A, n);
  // Terminal q (xs_n + d)^2 = q xs_n^2 + 2 q xs_n d + q d^2.
  double P = 2.0 * q, p = 2.0 * q * xs_n, r = q * xs_n * xs_n;
  for (int i = n - 1; i >= 0; --i) {
    // stage: 1/2 dt u^2 + 1/2 c^2 dt d^2, next d' = A d + B u
    const double denom = dt + B * B * P;
    const double Pn = c * c * dt + A * A * P - (A * B * P) * (A * B * P) / denom;
    const double pn = A * p - (A * B * P) * (B * p) / denom;
    const double rn = r - 0.5 * (B * p) * (B * p) / denom;
    P = Pn;
    p = pn;
    r = rn;
  }
  return r;  // d_0 = 0
}

/// Maps scaled step controls v (u_i = v_i / sqrt(dt)) to node deviations.
struct LinearResponse {
  int n;
  double dt;
  Eigen::MatrixXd nodes;  // (n + 1) x n, row i = d x_i / d v
};

inline LinearResponse linear_response(double a, double s, double horizon, int n) {
  const double dt = horizon / n;
  const auto [A, B] = zoh(a, s, dt);
  LinearResponse r{n, dt, Eigen::MatrixXd::Zero(n + 1, n)};
  for (int i = 1; i <= n; ++i) {
    r.nodes.row(i) = A * r.nodes.row(i - 1);
    r.nodes(i, i - 1) += B / std::sqrt(dt);
  }
  return r;
}

/// Piece-mean basis in scaled coordinates: columns are unit vectors of
/// R^n constant on each piece, pieces split at floor(j n / P).
inline Eigen::MatrixXd piece_basis(int n, int pieces) {
  Eigen::MatrixXd E = Eigen::MatrixXd::Zero(n, pieces);
  for (int j = 0; j < pieces; ++j) {
    const int b0 = j * n / pieces, b1 = (j + 1) * n / pieces;
    for (int i = b0; i < b1; ++i) E(i, j) = 1.0 / std::sqrt(static_cast<double>(b1 - b0));
  }
  return E;
}

/// Minimum of a unimodal-enough 1-D function on [lo, hi]: dense scan then
/// golden-section refinement around the best sample.
inline double minimize_1d(const std::function<double(double)>& f, double lo, double hi, int samples = 4001) {
  double best_x = lo, best = f(lo);
  const double h = (hi - lo) / (samples - 1);
  for (int i = 1; i < samples; ++i) {
    const double x = lo + i * h, v = f(x);
    if (v < best) best = v, best_x = x;
  }
  double l = best_x - h, r = best_x + h;
  const double g = 0.5 * (std::sqrt(5.0) - 1.0);
  for (int it = 0; it < 200; ++it) {
    const double m1 = r - g * (r - l), m2 = l + g * (r - l);
    if (f(m1) < f(m2))
      r = m2;
    else
      l = m1;
  }
  return std::min(best, f(0.5 * (l + r)));
}

/// Root of a monotone function on [lo, hi] by bisection.
inline double bisect(const std::function<double(double)>& f, double lo, double hi) {
  double flo = f(lo);
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi), fm = f(mid);
    if ((fm > 0) == (flo > 0))
      lo = mid, flo = fm;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

/// Rate function of a terminal functional g on linear1d with outer controls
/// on `pieces` pieces and inner controls per step.
///
/// With both inner problems quadratic except for g(x_n), their difference
/// is G(s_B) = min_s kappa (s - s_B)^2 + g(s), where s_B is the terminal
/// value of the inner minimizer without g. s_B is affine in the outer
/// controls, s_B = xs_n + gamma . theta, so the cheapest pair reaching
/// level z costs (s_z - xs_n)^2 / (2 |gamma|^2) with G(s_z) = z.
class LinearRateOracle {
 public:
  LinearRateOracle(double a, double s, double c, double x0, double horizon, int n, int pieces,
                   std::function<double(double)> g)
      : g_(std::move(g)) {
    const LinearResponse lr = linear_response(a, s, horizon, n);
    const double sdt = std::sqrt(lr.dt);
    xs_n_ = x0 * std::pow(zoh(a, s, lr.dt).A, n);
    const Eigen::MatrixXd K = sdt * c * lr.nodes.topRows(n);  // tracking residual per scaled control
    const Eigen::RowVectorXd ell = lr.nodes.row(n);
    const Eigen::MatrixXd Q = Eigen::MatrixXd::Identity(n, n) + K.transpose() * K;
    const Eigen::LDLT<Eigen::MatrixXd> qf(Q);
    const Eigen::VectorXd qinv_ell = qf.solve(ell.transpose());
    kappa_ = 0.5 / ell.dot(qinv_ell);
    // Residual shift r = sqrt(dt) (c (L phi)_i + psi_i); s_B - xs_n = ell Q^-1 K^T r.
    const Eigen::MatrixXd E = piece_basis(n, pieces);
    Eigen::MatrixXd R(n, 2 * pieces);
    R.leftCols(pieces) = K * E;  // phi moves the reference
    R.rightCols(pieces) = E;     // sqrt(dt) psi_i = v_j / sqrt(steps in piece j)
    const Eigen::VectorXd gamma = R.transpose() * (K * qinv_ell);
    gamma2_ = gamma.squaredNorm();
  }

  [[nodiscard]] double G(double sb) const {
    return minimize_1d([&](double s) { return kappa_ * (s - sb) * (s - sb) + g_(s); }, sb - 6.0, sb + 6.0);
  }
  [[nodiscard]] double z_star() const { return G(xs_n_); }
  [[nodiscard]] double rate(double z) const {
    const double span = 20.0;
    const double sz = bisect([&](double s) { return G(s) - z; }, xs_n_ - span, xs_n_ + span);
    return (sz - xs_n_) * (sz - xs_n_) / (2.0 * gamma2_);
  }

 private:
  std::function<double(double)> g_;
  double xs_n_ = 0.0, kappa_ = 0.0, gamma2_ = 0.0;
};

}  // namespace oracle
