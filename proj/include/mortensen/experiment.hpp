#pragma once

// Batch experiments driven by a flat INI configuration: small-noise
// convergence of -eps^2 log U toward z*, conditional-probability decay
// against the variational bound, and the Kalman check of the filter.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "mortensen/action.hpp"
#include "mortensen/filter.hpp"
#include "mortensen/model.hpp"
#include "mortensen/rate.hpp"

namespace mortensen {

std::string software_version();

struct ExperimentConfig {
  // [model]
  std::string model = "linear1d";
  ParamMap model_params;
  // [grid]
  std::size_t n_steps = 100;
  // [filter]
  std::vector<double> eps_list = {0.5, 0.35, 0.25};
  std::vector<std::size_t> n_particles = {100000};  // one value, or one per eps
  std::size_t n_replicates = 50;
  std::string tilt = "smallest";  // none | smallest | all
  std::uint64_t seed = 20240611;
  // [phi_test]
  std::string phi_id = "terminal_clamp";
  std::map<std::string, double> phi_params = {{"lo", 0.0}, {"hi", 1.0}};
  // [optimizer]
  OptimizerOptions optimizer;
  // [rate]
  RateOptions rate;
  std::vector<double> z_grid;
  // [decay]
  std::string event_id = "terminal_value";
  std::map<std::string, double> event_params;
  double event_threshold = 1.0;
  bool event_relative = true;  // threshold is added to event(flow without control)
  double event_tol = 1e-4;     // accepted shortfall of the constrained minimizer
  // [output]
  std::string output_dir = "out";

  [[nodiscard]] std::size_t particles_for(std::size_t eps_index) const {
    return n_particles.size() == 1 ? n_particles.front() : n_particles.at(eps_index);
  }
  [[nodiscard]] bool tilted(std::size_t eps_index) const {
    return tilt == "all" || (tilt == "smallest" && eps_index + 1 == eps_list.size());
  }
};

/// Parses INI text. Unknown sections or keys, malformed values and failed
/// validation throw ConfigError naming the field as `section.key`.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

/// Checks invariants: eps_list positive and strictly decreasing, counts
/// positive, model and functional ids resolvable. Throws ConfigError.
void validate_config(const ExperimentConfig& config);

/// INI text with every field spelled out, defaults included.
std::string config_to_ini(const ExperimentConfig& config);
nlohmann::json config_to_json(const ExperimentConfig& config);

ModelSpec config_model(const ExperimentConfig& config);
FunctionalPtr config_phi(const ExperimentConfig& config);
TimeGrid config_grid(const ExperimentConfig& config, const ModelSpec& model);

struct RunControl {
  double max_seconds = 0.0;  // 0 = no limit; partial tables are kept
  bool write_files = true;
};

double median(std::vector<double> values);

// --- Convergence ---------------------------------------------------------------

struct ConvergenceRecord {
  double eps = 0.0;
  std::size_t replicate = 0;
  double v_eps = 0.0;
  double std_error = 0.0;
  double z_star = 0.0;
  double abs_gap = 0.0;
  double ess = 0.0;
  bool tilted = false;
  double wall_time = 0.0;  // seconds; written to timing.csv only
  std::string status = "ok";
};

struct ConvergenceResult {
  std::vector<ConvergenceRecord> records;
  double z_star = 0.0;
  std::vector<double> median_gap;  // per eps, over successful records
  bool truncated = false;
  nlohmann::json summary;
};

/// Writes convergence.csv, summary.json and timing.csv into output_dir.
ConvergenceResult run_convergence(const ExperimentConfig& config, const RunControl& control = {});

/// -eps^2 log U for one observation, optionally with importance tilts
/// toward the two minimizers of the observation-conditioned problem.
FilterEstimate laplace_estimate(const ModelSpec& model, const Path& observation, const FunctionalPtr& phi, double eps,
                                std::size_t n_particles, std::uint64_t seed, bool tilted,
                                const OptimizerOptions& opts, double* ess = nullptr);

/// psi_i = (y_{i+1} - y_i)/dt - h(xi*_i), so that H(eta, xi*, psi) is the
/// tracking cost 1/2 sum ||h(eta_i) - dy_i/dt||^2 dt of the observation.
ControlPath observation_shift(const ModelSpec& model, const Path& observation, const Path& flow);

// --- Conditional decay ---------------------------------------------------------

struct DecayRecord {
  double eps = 0.0;
  std::size_t replicate = 0;
  double eps2_log_lambda = 0.0;
  double std_error = 0.0;
  double bound = 0.0;
  double gap = 0.0;
  std::string status = "ok";
};

struct DecayResult {
  std::vector<DecayRecord> records;
  double bound = 0.0;
  double threshold = 0.0;  // absolute event threshold
  std::vector<double> median_estimate;  // per eps
  bool truncated = false;
  nlohmann::json summary;
};

/// Minimal H + J over paths with event >= threshold, by a shortfall penalty
/// whose weight grows tenfold until the shortfall is below `tol`. The
/// returned optimal_value excludes the penalty.
VariationalSolution constrained_minimum(const ActionProblem& base, const FunctionalPtr& event, double threshold,
                                        const OptimizerOptions& opts, double tol);

/// Writes decay.csv and decay_summary.json.
DecayResult run_conditional_decay(const ExperimentConfig& config, const RunControl& control = {});

// --- Filter oracle -------------------------------------------------------------

struct OracleRecord {
  double eps = 0.0;
  std::size_t replicate = 0;
  double ks_mean = 0.0;
  double std_error = 0.0;
  double kalman_mean = 0.0;
  double z_score = 0.0;
  double ks_variance = 0.0;
  double kalman_variance = 0.0;
  double ess = 0.0;
};

struct OracleResult {
  std::vector<OracleRecord> records;
  double fraction_within_3 = 0.0;
  bool truncated = false;
  nlohmann::json summary;
};

/// Throws NonLinearModel unless the model is linear-Gaussian. Writes
/// oracle.csv and oracle_summary.json.
OracleResult run_filter_oracle(const ExperimentConfig& config, const RunControl& control = {});

/// Seeds used by the experiments for replicate r at eps index e.
std::uint64_t observation_seed(std::uint64_t seed, std::size_t replicate);
std::uint64_t ensemble_seed(std::uint64_t seed, std::size_t eps_index, std::size_t replicate);

/// Provenance block embedded in every JSON output.
nlohmann::json provenance(const ExperimentConfig& config, const std::string& command);

/// Writes `text` to dir/name, creating dir.
void write_text(const std::string& dir, const std::string& name, const std::string& text);

}  // namespace mortensen
