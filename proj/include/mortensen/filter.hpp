#pragma once

// Weighted Monte Carlo for the Kallianpur-Striebel representation: signal
// paths drawn from the unconditioned law carry the log-likelihood of the
// observation as a log-weight. All weight arithmetic stays in the log domain.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mortensen/functional.hpp"
#include "mortensen/model.hpp"
#include "mortensen/path.hpp"

namespace mortensen {

/// (1/eps^2) sum_i <h(x_i), y_{i+1} - y_i> - (1/(2 eps^2)) sum_i ||h(x_i)||^2 dt.
/// Throws GridMismatch.
double log_likelihood(const ModelSpec& model, const Path& signal, const Path& observation, double eps);

struct FilterEstimate {
  double value = 0.0;
  double std_error = 0.0;
  double effective_sample_size = 0.0;
  std::size_t n_particles = 0;
};

struct EnsembleOptions {
  /// Sample under the drift b + sigma u and correct the weights by the
  /// Girsanov factor, which keeps every estimate unbiased.
  std::optional<ControlPath> tilt;
  std::size_t workers = 0;
};

class WeightedEnsemble {
 public:
  WeightedEnsemble(TimeGrid grid, std::size_t dim, double eps, Path observation, std::vector<double> states,
                   std::vector<double> log_weights);

  [[nodiscard]] std::size_t size() const noexcept { return log_weights_.size(); }
  [[nodiscard]] std::size_t dim() const noexcept { return dim_; }
  [[nodiscard]] double eps() const noexcept { return eps_; }
  [[nodiscard]] const TimeGrid& grid() const noexcept { return grid_; }
  [[nodiscard]] const Path& observation() const noexcept { return observation_; }
  [[nodiscard]] const std::vector<double>& log_weights() const noexcept { return log_weights_; }

  [[nodiscard]] PathView particle(std::size_t i) const;
  [[nodiscard]] Path particle_path(std::size_t i) const;

  /// logsumexp of the log-weights.
  [[nodiscard]] double log_normalizer() const noexcept { return log_norm_; }
  [[nodiscard]] std::vector<double> normalized_weights() const;
  [[nodiscard]] double effective_sample_size() const;

  /// f evaluated on every particle, in particle order.
  [[nodiscard]] std::vector<double> evaluate(const PathFunctional& f) const;

 private:
  TimeGrid grid_;
  std::size_t dim_;
  double eps_;
  Path observation_;
  std::vector<double> states_;  // [(node * dim + c) * n + p]
  std::vector<double> log_weights_;
  double log_norm_;
};

/// Particle i is the signal of simulate_pair(model, eps, grid, child_seed(seed, i)).
WeightedEnsemble build_ensemble(const ModelSpec& model, const Path& observation, double eps,
                                std::size_t n_particles, std::uint64_t seed, const EnsembleOptions& options = {});

/// Self-normalized estimate sum_i w_i f(particle_i).
FilterEstimate estimate_lambda(const WeightedEnsemble& ensemble, const PathFunctional& f);

/// -eps^2 log of the filter expectation of exp(-phi/eps^2).
FilterEstimate neg_eps2_log_U(const WeightedEnsemble& ensemble, const PathFunctional& phi, double eps);

/// log of the unnormalized expectation (1/n) sum_i exp(lw_i) g_i with
/// log g_i = log_g(particle_i); -inf entries drop out. The standard error
/// refers to the log value (delta method).
FilterEstimate log_gamma(const WeightedEnsemble& ensemble, const std::vector<double>& log_g);

struct NamedEstimate {
  std::string functional;
  FilterEstimate estimate;
};

/// {eps, n_particles, ess, estimates:[{functional, value, std_error}]}
nlohmann::json ensemble_summary(const WeightedEnsemble& ensemble, const std::vector<NamedEstimate>& estimates);

}  // namespace mortensen
