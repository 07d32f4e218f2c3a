// Command-line front end. Exit codes: 0 success, 1 invalid input or usage,
// 2 numerical failure.

#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "mortensen/action.hpp"
#include "mortensen/error.hpp"
#include "mortensen/experiment.hpp"
#include "mortensen/filter.hpp"
#include "mortensen/rate.hpp"

using namespace mortensen;

namespace {

struct Common {
  std::string config_path;
  std::optional<double> eps;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  double max_seconds = 0.0;
  bool print_config = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "INI configuration file");
  sub->add_option("--eps", c.eps, "noise level; replaces the eps list");
  sub->add_option("--seed", c.seed, "experiment seed");
  sub->add_option("--out", c.out, "output directory");
  sub->add_option("--max-seconds", c.max_seconds, "wall-clock budget; partial tables are kept")->check(CLI::NonNegativeNumber);
  sub->add_flag("--print-config", c.print_config, "print the resolved configuration and exit");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config_path.empty() ? ExperimentConfig{} : load_config(c.config_path);
  if (c.eps) {
    cfg.eps_list = {*c.eps};
    cfg.n_particles = {cfg.n_particles.back()};
  }
  if (c.seed) cfg.seed = *c.seed;
  if (c.out) cfg.output_dir = *c.out;
  validate_config(cfg);
  return cfg;
}

std::string csv_of(const Path& p, const std::string& prefix) {
  std::ostringstream os;
  write_csv(os, p, prefix);
  return os.str();
}

void emit(const ExperimentConfig& cfg, const std::string& command, const std::string& file, nlohmann::json body) {
  body["provenance"] = provenance(cfg, command);
  const std::string text = body.dump(2) + "\n";
  write_text(cfg.output_dir, file, text);
  std::cout << text;
}

int run(const std::string& command, const Common& common, std::optional<double> z) {
  const ExperimentConfig cfg = resolve(common);
  if (common.print_config) {
    std::cout << config_to_ini(cfg);
    return 0;
  }
  const RunControl control{common.max_seconds, true};
  const ModelSpec model = config_model(cfg);
  const FunctionalPtr phi = config_phi(cfg);
  const TimeGrid grid = config_grid(cfg, model);
  const double eps = cfg.eps_list.back();
  const ControlPath zero_k = ControlPath::zero(grid, model.dim_k());
  const ControlPath zero_m = ControlPath::zero(grid, model.dim_m());

  if (command == "simulate") {
    const SimulatedPair pair = simulate_pair(model, eps, grid, observation_seed(cfg.seed, 0));
    write_text(cfg.output_dir, "signal.csv", csv_of(pair.signal, "x"));
    write_text(cfg.output_dir, "observation.csv", csv_of(pair.observation, "y"));
    emit(cfg, command, "simulate.json", {{"eps", eps}, {"n_steps", grid.n_steps()}, {"files", {"signal.csv", "observation.csv"}}});
  } else if (command == "filter") {
    const Path y = simulate_pair(model, eps, grid, observation_seed(cfg.seed, 0)).observation;
    const std::size_t idx = cfg.eps_list.size() - 1;
    const WeightedEnsemble ens = build_ensemble(model, y, eps, cfg.particles_for(idx), ensemble_seed(cfg.seed, idx, 0));
    std::vector<NamedEstimate> est;
    est.push_back({"lambda[" + phi->id() + "]", estimate_lambda(ens, *phi)});
    est.push_back({"neg_eps2_log_U[" + phi->id() + "]", neg_eps2_log_U(ens, *phi, eps)});
    est.push_back({"lambda[terminal_value]", estimate_lambda(ens, *make_terminal_value(0))});
    emit(cfg, command, "filter.json", ensemble_summary(ens, est));
  } else if (command == "minimize") {
    const ActionProblem problem = ActionProblem::around(model, zero_k, zero_m, phi);
    emit(cfg, command, "minimize.json", minimize_action(problem, cfg.optimizer).to_json());
  } else if (command == "v0") {
    const V0Result r = compute_V0_detail(model, zero_k, zero_m, phi, cfg.optimizer);
    emit(cfg, command, "v0.json",
         {{"v0", r.value}, {"inf_with_phi", r.with_phi.optimal_value}, {"inf_without_phi", r.without_phi.optimal_value},
          {"converged", r.with_phi.converged && r.without_phi.converged}});
  } else if (command == "rate") {
    if (z) {
      try {
        emit(cfg, command, "rate_point.json", rate_at(model, phi, grid, *z, cfg.rate).to_json());
      } catch (const RateNotConverged& e) {
        emit(cfg, command, "rate_point.json", e.point().to_json());
        throw;
      }
    } else {
      if (cfg.z_grid.empty()) throw ConfigError("rate.z_grid", "needed for a profile (or pass --z)");
      const RateProfile p = profile(model, phi, grid, cfg.z_grid, cfg.rate);
      write_text(cfg.output_dir, "rate_profile.csv", p.to_csv());
      nlohmann::json j = p.to_json();
      j["provenance"] = provenance(cfg, command);
      write_text(cfg.output_dir, "rate_profile.json", j.dump(2) + "\n");
      std::cout << p.to_csv();
    }
  } else if (command == "converge") {
    std::cout << run_convergence(cfg, control).summary.dump(2) << '\n';
  } else if (command == "decay") {
    std::cout << run_conditional_decay(cfg, control).summary.dump(2) << '\n';
  } else if (command == "oracle") {
    std::cout << run_filter_oracle(cfg, control).summary.dump(2) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Small-noise nonlinear filtering experiments"};
  app.set_version_flag("--version", software_version());
  app.require_subcommand(1);

  Common common;
  std::optional<double> z;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"simulate", "simulate one signal/observation pair"},
      {"filter", "weighted-ensemble filter estimates for one observation"},
      {"minimize", "minimize the action with the test functional"},
      {"v0", "variational value V0 at zero controls"},
      {"rate", "rate function at --z, or a profile over rate.z_grid"},
      {"converge", "convergence of -eps^2 log U toward z*"},
      {"decay", "conditional event probabilities against the variational bound"},
      {"oracle", "filter check against the Kalman smoother"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    add_common(sub, common);
    if (name == "rate") sub->add_option("--z", z, "single level z");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, common, z);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
