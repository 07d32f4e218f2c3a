#include "mortensen/functional.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "mortensen/error.hpp"

namespace mortensen {

void PathFunctional::add_gradient(const PathView&, double, RowMatrix&) const {
  throw std::logic_error("functional '" + id() + "' is not differentiable");
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double soft_clamp(double x, double lo, double hi, double tau) {
  const double y = lo + tau * softplus((x - lo) / tau);
  return hi - tau * softplus((hi - y) / tau);
}

double soft_clamp_derivative(double x, double lo, double hi, double tau) {
  const double y = lo + tau * softplus((x - lo) / tau);
  return logistic((x - lo) / tau) * logistic((hi - y) / tau);
}

double soft_clamp_infimum(double lo, double hi, double tau) { return hi - tau * softplus((hi - lo) / tau); }

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

class Constant final : public PathFunctional {
 public:
  explicit Constant(double c) : c_(c) {}
  std::string id() const override { return "const(" + fmt(c_) + ")"; }
  double value(const PathView&) const override { return c_; }
  void add_gradient(const PathView&, double, RowMatrix&) const override {}
  Bounds bounds() const override { return {c_, c_}; }
  bool constant() const override { return true; }

 private:
  double c_;
};

class TerminalClamp final : public PathFunctional {
 public:
  TerminalClamp(double lo, double hi, double weight, double offset, std::size_t comp, double tau)
      : lo_(lo), hi_(hi), w_(weight), b_(offset), comp_(comp), tau_(tau) {}
  std::string id() const override {
    return "terminal_clamp(lo=" + fmt(lo_) + ",hi=" + fmt(hi_) + ",weight=" + fmt(w_) + ",offset=" + fmt(b_) + ")";
  }
  double value(const PathView& p) const override {
    return soft_clamp(w_ * p(p.n_nodes() - 1, comp_) + b_, lo_, hi_, tau_);
  }
  void add_gradient(const PathView& p, double scale, RowMatrix& g) const override {
    const std::size_t last = p.n_nodes() - 1;
    g(static_cast<Eigen::Index>(last), static_cast<Eigen::Index>(comp_)) +=
        scale * w_ * soft_clamp_derivative(w_ * p(last, comp_) + b_, lo_, hi_, tau_);
  }
  Bounds bounds() const override { return {soft_clamp_infimum(lo_, hi_, tau_), hi_}; }

 private:
  double lo_, hi_, w_, b_;
  std::size_t comp_;
  double tau_;
};

class TerminalQuadratic final : public PathFunctional {
 public:
  TerminalQuadratic(double q, double bound, double center, std::size_t comp, double tau)
      : q_(q), bound_(bound), center_(center), comp_(comp), tau_(tau) {}
  std::string id() const override {
    return "terminal_quadratic(q=" + fmt(q_) + ",bound=" + fmt(bound_) + ",center=" + fmt(center_) + ")";
  }
  double value(const PathView& p) const override {
    const double e = p(p.n_nodes() - 1, comp_) - center_;
    return bound_ - tau_ * softplus((bound_ - q_ * e * e) / tau_);
  }
  void add_gradient(const PathView& p, double scale, RowMatrix& g) const override {
    const std::size_t last = p.n_nodes() - 1;
    const double e = p(last, comp_) - center_;
    g(static_cast<Eigen::Index>(last), static_cast<Eigen::Index>(comp_)) +=
        scale * logistic((bound_ - q_ * e * e) / tau_) * 2.0 * q_ * e;
  }
  Bounds bounds() const override { return {bound_ - tau_ * softplus(bound_ / tau_), bound_}; }

 private:
  double q_, bound_, center_;
  std::size_t comp_;
  double tau_;
};

class SupClamp final : public PathFunctional {
 public:
  SupClamp(double lo, double hi, double tau, double delta) : lo_(lo), hi_(hi), tau_(tau), delta_(delta) {}
  std::string id() const override { return "sup_clamp(lo=" + fmt(lo_) + ",hi=" + fmt(hi_) + ")"; }

  double value(const PathView& p) const override { return soft_clamp(smooth_sup(p, nullptr), lo_, hi_, tau_); }

  void add_gradient(const PathView& p, double scale, RowMatrix& g) const override {
    std::vector<double> weights;
    const double s = smooth_sup(p, &weights);
    const double outer = scale * soft_clamp_derivative(s, lo_, hi_, tau_);
    for (std::size_t j = 0; j < p.n_nodes(); ++j) {
      const double rho = radius(p, j);
      for (std::size_t c = 0; c < p.dim(); ++c)
        g(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c)) += outer * weights[j] * p(j, c) / rho;
    }
  }
  Bounds bounds() const override { return {soft_clamp_infimum(lo_, hi_, tau_), hi_}; }

 private:
  double radius(const PathView& p, std::size_t j) const {
    double r2 = delta_ * delta_;
    for (std::size_t c = 0; c < p.dim(); ++c) r2 += p(j, c) * p(j, c);
    return std::sqrt(r2);
  }
  // Log-sum-exp of radius/tau; optionally returns the softmax weights.
  double smooth_sup(const PathView& p, std::vector<double>* weights) const {
    std::vector<double> r(p.n_nodes());
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = radius(p, j) / tau_;
    const double m = *std::max_element(r.begin(), r.end());
    double sum = 0.0;
    for (double v : r) sum += std::exp(v - m);
    if (weights) {
      weights->resize(r.size());
      for (std::size_t j = 0; j < r.size(); ++j) (*weights)[j] = std::exp(r[j] - m) / sum;
    }
    return tau_ * (m + std::log(sum));
  }

  double lo_, hi_, tau_, delta_;
};

class Bump final : public PathFunctional {
 public:
  Bump(double amplitude, double center, double width) : a_(amplitude), c_(center), w_(width) {}
  std::string id() const override {
    return "bump(amplitude=" + fmt(a_) + ",center=" + fmt(c_) + ",width=" + fmt(w_) + ")";
  }
  double value(const PathView& p) const override { return a_ * std::exp(-dist2(p) / (2.0 * w_ * w_)); }
  void add_gradient(const PathView& p, double scale, RowMatrix& g) const override {
    const std::size_t last = p.n_nodes() - 1;
    const double v = value(p);
    for (std::size_t c = 0; c < p.dim(); ++c)
      g(static_cast<Eigen::Index>(last), static_cast<Eigen::Index>(c)) += scale * v * (-(p(last, c) - c_) / (w_ * w_));
  }
  Bounds bounds() const override { return {std::min(0.0, a_), std::max(0.0, a_)}; }

 private:
  double dist2(const PathView& p) const {
    const std::size_t last = p.n_nodes() - 1;
    double s = 0.0;
    for (std::size_t c = 0; c < p.dim(); ++c) s += (p(last, c) - c_) * (p(last, c) - c_);
    return s;
  }
  double a_, c_, w_;
};

class TerminalValue final : public PathFunctional {
 public:
  explicit TerminalValue(std::size_t comp) : comp_(comp) {}
  std::string id() const override { return "terminal_value(" + std::to_string(comp_) + ")"; }
  double value(const PathView& p) const override { return p(p.n_nodes() - 1, comp_); }
  void add_gradient(const PathView& p, double scale, RowMatrix& g) const override {
    g(static_cast<Eigen::Index>(p.n_nodes() - 1), static_cast<Eigen::Index>(comp_)) += scale;
  }

 private:
  std::size_t comp_;
};

class TerminalSquare final : public PathFunctional {
 public:
  explicit TerminalSquare(std::size_t comp) : comp_(comp) {}
  std::string id() const override { return "terminal_square(" + std::to_string(comp_) + ")"; }
  double value(const PathView& p) const override {
    const double v = p(p.n_nodes() - 1, comp_);
    return v * v;
  }
  void add_gradient(const PathView& p, double scale, RowMatrix& g) const override {
    const std::size_t last = p.n_nodes() - 1;
    g(static_cast<Eigen::Index>(last), static_cast<Eigen::Index>(comp_)) += scale * 2.0 * p(last, comp_);
  }
  Bounds bounds() const override { return {0.0, std::numeric_limits<double>::infinity()}; }

 private:
  std::size_t comp_;
};

class Indicator final : public PathFunctional {
 public:
  Indicator(FunctionalPtr inner, double threshold) : inner_(std::move(inner)), thr_(threshold) {}
  std::string id() const override { return "indicator(" + inner_->id() + ">=" + fmt(thr_) + ")"; }
  double value(const PathView& p) const override { return inner_->value(p) >= thr_ ? 1.0 : 0.0; }
  bool smooth() const override { return false; }
  Bounds bounds() const override { return {0.0, 1.0}; }

 private:
  FunctionalPtr inner_;
  double thr_;
};

class SupExceeds final : public PathFunctional {
 public:
  explicit SupExceeds(double threshold) : thr_(threshold) {}
  std::string id() const override { return "sup_exceeds(" + fmt(thr_) + ")"; }
  double value(const PathView& p) const override {
    for (std::size_t j = 0; j < p.n_nodes(); ++j) {
      double r2 = 0.0;
      for (std::size_t c = 0; c < p.dim(); ++c) r2 += p(j, c) * p(j, c);
      if (std::sqrt(r2) > thr_) return 1.0;
    }
    return 0.0;
  }
  bool smooth() const override { return false; }
  Bounds bounds() const override { return {0.0, 1.0}; }

 private:
  double thr_;
};

class ShortfallPenalty final : public PathFunctional {
 public:
  ShortfallPenalty(FunctionalPtr inner, double threshold, double weight)
      : inner_(std::move(inner)), thr_(threshold), w_(weight) {}
  std::string id() const override {
    return "shortfall(" + inner_->id() + ",threshold=" + fmt(thr_) + ",weight=" + fmt(w_) + ")";
  }
  double value(const PathView& p) const override {
    const double gap = std::max(0.0, thr_ - inner_->value(p));
    return w_ * gap * gap;
  }
  void add_gradient(const PathView& p, double scale, RowMatrix& g) const override {
    const double gap = std::max(0.0, thr_ - inner_->value(p));
    if (gap > 0.0) inner_->add_gradient(p, -2.0 * w_ * gap * scale, g);
  }
  Bounds bounds() const override { return {0.0, std::numeric_limits<double>::infinity()}; }

 private:
  FunctionalPtr inner_;
  double thr_, w_;
};

}  // namespace

FunctionalPtr make_constant(double c) { return std::make_shared<Constant>(c); }

FunctionalPtr make_terminal_clamp(double lo, double hi, double weight, double offset, std::size_t comp,
                                  double tau) {
  if (!(hi > lo)) throw ValidationError("terminal_clamp needs hi > lo");
  if (!(tau > 0.0)) throw ValidationError("terminal_clamp needs tau > 0");
  return std::make_shared<TerminalClamp>(lo, hi, weight, offset, comp, tau);
}

FunctionalPtr make_terminal_quadratic(double q, double bound, double center, std::size_t comp, double tau) {
  if (!(q >= 0.0)) throw ValidationError("terminal_quadratic needs q >= 0");
  if (!(tau > 0.0)) throw ValidationError("terminal_quadratic needs tau > 0");
  return std::make_shared<TerminalQuadratic>(q, bound, center, comp, tau);
}

FunctionalPtr make_sup_clamp(double lo, double hi, double tau, double delta) {
  if (!(hi > lo)) throw ValidationError("sup_clamp needs hi > lo");
  if (!(tau > 0.0) || !(delta > 0.0)) throw ValidationError("sup_clamp needs tau, delta > 0");
  return std::make_shared<SupClamp>(lo, hi, tau, delta);
}

FunctionalPtr make_bump(double amplitude, double center, double width) {
  if (!(width > 0.0)) throw ValidationError("bump needs width > 0");
  return std::make_shared<Bump>(amplitude, center, width);
}

FunctionalPtr make_terminal_value(std::size_t comp) { return std::make_shared<TerminalValue>(comp); }
FunctionalPtr make_terminal_square(std::size_t comp) { return std::make_shared<TerminalSquare>(comp); }

FunctionalPtr make_indicator(FunctionalPtr inner, double threshold) {
  return std::make_shared<Indicator>(std::move(inner), threshold);
}

FunctionalPtr make_sup_exceeds(double threshold) { return std::make_shared<SupExceeds>(threshold); }

FunctionalPtr make_shortfall_penalty(FunctionalPtr inner, double threshold, double weight) {
  return std::make_shared<ShortfallPenalty>(std::move(inner), threshold, weight);
}

std::map<std::string, double> functional_defaults(const std::string& id) {
  static const std::map<std::string, std::map<std::string, double>> table = {
      {"zero", {}},
      {"const", {{"c", 0.0}}},
      {"terminal_clamp", {{"lo", 0.0}, {"hi", 1.0}, {"weight", 1.0}, {"offset", 0.0}, {"comp", 0.0},
                          {"tau", kSoftTemperature}}},
      {"terminal_quadratic", {{"q", 1.0}, {"bound", 10.0}, {"center", 0.0}, {"comp", 0.0}, {"tau", kSoftTemperature}}},
      {"sup_clamp", {{"lo", 0.0}, {"hi", 1.0}, {"tau", kSoftTemperature}, {"delta", 1e-3}}},
      {"bump", {{"amplitude", 1.0}, {"center", 0.0}, {"width", 1.0}}},
      {"terminal_value", {{"comp", 0.0}}},
      {"terminal_square", {{"comp", 0.0}}},
  };
  const auto it = table.find(id);
  if (it == table.end()) throw ConfigError("phi_test.id", "unknown functional '" + id + "'");
  return it->second;
}

FunctionalPtr make_functional(const std::string& id, const std::map<std::string, double>& params) {
  std::map<std::string, double> p = functional_defaults(id);
  for (const auto& [key, value] : params) {
    if (!p.count(key)) throw ConfigError("phi_test." + key, "not a parameter of '" + id + "'");
    p[key] = value;
  }
  auto comp = [&] {
    const double c = p.at("comp");
    if (!(c >= 0.0) || c != std::floor(c)) throw ConfigError("phi_test.comp", "must be a component index");
    return static_cast<std::size_t>(c);
  };
  try {
    if (id == "zero") return make_constant(0.0);
    if (id == "const") return make_constant(p.at("c"));
    if (id == "terminal_clamp")
      return make_terminal_clamp(p.at("lo"), p.at("hi"), p.at("weight"), p.at("offset"), comp(), p.at("tau"));
    if (id == "terminal_quadratic")
      return make_terminal_quadratic(p.at("q"), p.at("bound"), p.at("center"), comp(), p.at("tau"));
    if (id == "sup_clamp") return make_sup_clamp(p.at("lo"), p.at("hi"), p.at("tau"), p.at("delta"));
    if (id == "bump") return make_bump(p.at("amplitude"), p.at("center"), p.at("width"));
    if (id == "terminal_value") return make_terminal_value(comp());
    return make_terminal_square(comp());
  } catch (const ConfigError&) {
    throw;
  } catch (const ValidationError& e) {
    throw ConfigError("phi_test", e.what());
  }
}

}  // namespace mortensen
