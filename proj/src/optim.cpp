#include "mortensen/optim.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

namespace mortensen {

namespace {

struct Trial {
  double alpha;
  double f;
  double slope;
};

// Minimizer of the cubic interpolating (a.f, a.slope) and (b.f, b.slope),
// safeguarded into the middle of [a.alpha, b.alpha].
double cubic_step(const Trial& a, const Trial& b) {
  const double lo = std::min(a.alpha, b.alpha), hi = std::max(a.alpha, b.alpha);
  const double d1 = a.slope + b.slope - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
  const double disc = d1 * d1 - a.slope * b.slope;
  double t = 0.5 * (lo + hi);
  if (disc >= 0.0) {
    const double d2 = std::copysign(std::sqrt(disc), b.alpha - a.alpha);
    const double cand = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    if (std::isfinite(cand)) t = cand;
  }
  const double margin = 0.1 * (hi - lo);
  return std::clamp(t, lo + margin, hi - margin);
}

class LineSearch {
 public:
  LineSearch(const Objective& f, const Eigen::VectorXd& x, const Eigen::VectorXd& dir, double f0, double slope0,
             const LbfgsOptions& opts, std::size_t& evals)
      : f_(f), x_(x), dir_(dir), f0_(f0), slope0_(slope0), opts_(opts), evals_(evals),
        grad_(Eigen::VectorXd::Zero(x.size())) {}

  // Returns true when a strong-Wolfe point was found; `best` then holds it.
  bool run(double alpha1) {
    Trial prev{0.0, f0_, slope0_};
    double alpha = alpha1;
    for (std::size_t it = 0; it < opts_.max_line_search; ++it) {
      const Trial cur = eval(alpha);
      if (approximate_wolfe(cur)) return accept(cur);
      if (!std::isfinite(cur.f) || cur.f > f0_ + opts_.c1 * alpha * slope0_ || (it > 0 && cur.f >= prev.f))
        return zoom(prev, cur);
      if (std::abs(cur.slope) <= -opts_.c2 * slope0_) return accept(cur);
      if (cur.slope >= 0.0) return zoom(cur, prev);
      prev = cur;
      alpha *= 2.0;
    }
    return false;
  }

  [[nodiscard]] const Eigen::VectorXd& x() const { return best_x_; }
  [[nodiscard]] const Eigen::VectorXd& grad() const { return best_g_; }
  [[nodiscard]] double value() const { return best_f_; }
  [[nodiscard]] bool improved() const { return has_best_; }

 private:
  Trial eval(double alpha) {
    trial_x_ = x_ + alpha * dir_;
    const double fv = f_(trial_x_, grad_);
    ++evals_;
    const double slope = grad_.dot(dir_);
    if (std::isfinite(fv) && fv < f0_ && (!has_best_ || fv < best_f_)) {
      has_best_ = true;
      best_f_ = fv;
      best_x_ = trial_x_;
      best_g_ = grad_;
    }
    last_x_ = trial_x_;
    last_g_ = grad_;
    return {alpha, fv, std::isfinite(fv) ? slope : std::numeric_limits<double>::infinity()};
  }

  // Near a minimizer the decrease c1 alpha slope0 falls below the rounding
  // of f, so the sufficient-decrease test can no longer be decided. A
  // curvature-satisfying point whose value is within a few ulps of f0 is
  // then accepted on the strength of its slope.
  [[nodiscard]] bool approximate_wolfe(const Trial& t) const {
    const double fuzz = 8.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f0_));
    return std::isfinite(t.f) && t.f <= f0_ + fuzz && -opts_.c1 * t.alpha * slope0_ < fuzz &&
           std::abs(t.slope) <= -opts_.c2 * slope0_;
  }

  bool accept(const Trial& t) {
    best_f_ = t.f;
    best_x_ = last_x_;
    best_g_ = last_g_;
    has_best_ = true;
    return true;
  }

  bool zoom(Trial lo, Trial hi) {
    for (std::size_t it = 0; it < opts_.max_line_search; ++it) {
      if (std::abs(hi.alpha - lo.alpha) <= 1e-14 * std::max(1.0, lo.alpha)) return false;
      const double alpha = std::isfinite(hi.f) ? cubic_step(lo, hi) : 0.5 * (lo.alpha + hi.alpha);
      const Trial cur = eval(alpha);
      if (approximate_wolfe(cur)) return accept(cur);
      if (!std::isfinite(cur.f) || cur.f > f0_ + opts_.c1 * alpha * slope0_ || cur.f >= lo.f) {
        hi = cur;
      } else {
        if (std::abs(cur.slope) <= -opts_.c2 * slope0_) return accept(cur);
        if (cur.slope * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
        lo = cur;
      }
    }
    return false;
  }

  const Objective& f_;
  const Eigen::VectorXd& x_;
  const Eigen::VectorXd& dir_;
  double f0_, slope0_;
  const LbfgsOptions& opts_;
  std::size_t& evals_;
  Eigen::VectorXd grad_, trial_x_, last_x_, last_g_;
  bool has_best_ = false;
  double best_f_ = 0.0;
  Eigen::VectorXd best_x_, best_g_;
};

}  // namespace

LbfgsResult lbfgs_minimize(const Objective& f, Eigen::VectorXd x0, const LbfgsOptions& opts) {
  LbfgsResult res;
  res.x = std::move(x0);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(res.x.size());
  res.value = f(res.x, g);
  res.evaluations = 1;
  if (!std::isfinite(res.value)) {
    res.status = "non-finite objective at the starting point";
    res.grad_norm = std::numeric_limits<double>::infinity();
    return res;
  }
  res.grad_norm = g.norm();
  if (res.x.size() == 0 || res.grad_norm <= opts.grad_tol) {
    res.converged = true;
    res.status = "gradient tolerance reached";
    return res;
  }

  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;
  for (res.iterations = 0; res.iterations < opts.max_iters; ++res.iterations) {
    // Two-loop recursion.
    Eigen::VectorXd q = -g;
    std::vector<double> alphas(s_hist.size());
    for (std::size_t j = s_hist.size(); j-- > 0;) {
      alphas[j] = rho_hist[j] * s_hist[j].dot(q);
      q -= alphas[j] * y_hist[j];
    }
    if (!s_hist.empty()) q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    for (std::size_t j = 0; j < s_hist.size(); ++j) {
      const double beta = rho_hist[j] * y_hist[j].dot(q);
      q += (alphas[j] - beta) * s_hist[j];
    }
    double slope = g.dot(q);
    if (!(slope < 0.0)) {
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      q = -g;
      slope = -g.squaredNorm();
    }
    const double alpha1 = s_hist.empty() ? std::min(1.0, 1.0 / q.norm()) : 1.0;

    LineSearch ls(f, res.x, q, res.value, slope, opts, res.evaluations);
    const bool wolfe = ls.run(alpha1);
    if (!ls.improved()) {
      res.status = "line search could not decrease the objective";
      break;
    }
    const Eigen::VectorXd s = ls.x() - res.x;
    const Eigen::VectorXd y = ls.grad() - g;
    res.x = ls.x();
    res.value = ls.value();
    g = ls.grad();
    res.grad_norm = g.norm();
    if (res.grad_norm <= opts.grad_tol) {
      res.converged = true;
      res.status = "gradient tolerance reached";
      ++res.iterations;
      return res;
    }
    const double sy = s.dot(y);
    if (wolfe && sy > 1e-300) {
      s_hist.push_back(s);
      y_hist.push_back(y);
      rho_hist.push_back(1.0 / sy);
      if (s_hist.size() > opts.history) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
  }
  if (res.status.empty()) res.status = "iteration limit reached";
  return res;
}

}  // namespace mortensen
