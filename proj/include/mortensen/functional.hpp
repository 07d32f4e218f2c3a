#pragma once

// Path functionals: the test functions phi fed to the Laplace functional and
// the variational problems, and the functionals f estimated by the filter.
// Smooth functionals expose their gradient with respect to every node value.

#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <string>

#include "mortensen/path.hpp"

namespace mortensen {

struct Bounds {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  [[nodiscard]] bool finite() const noexcept { return std::isfinite(lo) && std::isfinite(hi); }
  [[nodiscard]] bool contains(double z) const noexcept { return z >= lo && z <= hi; }
};

class PathFunctional {
 public:
  virtual ~PathFunctional() = default;

  [[nodiscard]] virtual std::string id() const = 0;
  [[nodiscard]] virtual double value(const PathView& path) const = 0;

  /// Adds scale * d(value)/d(path(node, comp)) into grad (n_nodes x dim).
  /// Throws std::logic_error for non-smooth functionals.
  virtual void add_gradient(const PathView& path, double scale, RowMatrix& grad) const;

  [[nodiscard]] virtual bool smooth() const { return true; }

  /// Interval containing every value (infinite ends when unbounded). The
  /// clamp functionals report their exact infimum and supremum.
  [[nodiscard]] virtual Bounds bounds() const { return {}; }

  /// True when the functional takes one value on every path.
  [[nodiscard]] virtual bool constant() const { return false; }
};

using FunctionalPtr = std::shared_ptr<const PathFunctional>;

// Soft clamps with temperature `tau`: softmax(x, lo) = lo + tau softplus((x - lo)/tau),
// softmin(y, hi) = hi - tau softplus((hi - y)/tau).
double softplus(double x);
double logistic(double x);
inline constexpr double kSoftTemperature = 1e-2;

/// softmin(softmax(x, lo), hi) and its derivative.
double soft_clamp(double x, double lo, double hi, double tau);
double soft_clamp_derivative(double x, double lo, double hi, double tau);
/// Infimum of soft_clamp over the real line (its supremum is hi).
double soft_clamp_infimum(double lo, double hi, double tau);

FunctionalPtr make_constant(double c);

/// soft_clamp(weight * path(T, comp) + offset, lo, hi).
FunctionalPtr make_terminal_clamp(double lo, double hi, double weight = 1.0, double offset = 0.0,
                                  std::size_t comp = 0, double tau = kSoftTemperature);

/// softmin(q * (path(T, comp) - center)^2, bound), q >= 0.
FunctionalPtr make_terminal_quadratic(double q, double bound, double center = 0.0, std::size_t comp = 0,
                                      double tau = kSoftTemperature);

/// soft_clamp of a smoothed sup-norm: tau log sum_j exp(sqrt(||path_j||^2 + delta^2) / tau).
FunctionalPtr make_sup_clamp(double lo, double hi, double tau = kSoftTemperature, double delta = 1e-3);

/// amplitude * exp(-||path(T) - center||^2 / (2 width^2)).
FunctionalPtr make_bump(double amplitude, double center, double width);

/// path(T, comp); unbounded.
FunctionalPtr make_terminal_value(std::size_t comp = 0);
/// path(T, comp)^2; unbounded.
FunctionalPtr make_terminal_square(std::size_t comp = 0);

/// 1{inner(path) >= threshold}; not smooth.
FunctionalPtr make_indicator(FunctionalPtr inner, double threshold);
/// 1{max_j ||path_j|| > threshold}; not smooth.
FunctionalPtr make_sup_exceeds(double threshold);

/// weight * max(0, threshold - inner(path))^2, used to push paths into
/// the set {inner >= threshold}.
FunctionalPtr make_shortfall_penalty(FunctionalPtr inner, double threshold, double weight);

/// Parameters (with defaults) accepted by a registry id. Throws ConfigError.
std::map<std::string, double> functional_defaults(const std::string& id);

/// Registry lookup for configuration files. Known ids: zero, const,
/// terminal_clamp, terminal_quadratic, sup_clamp, bump, terminal_value,
/// terminal_square. Throws ConfigError for an unknown id or parameter.
FunctionalPtr make_functional(const std::string& id, const std::map<std::string, double>& params);

}  // namespace mortensen
