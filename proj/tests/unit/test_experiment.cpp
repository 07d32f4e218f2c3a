#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "mortensen/error.hpp"
#include "mortensen/experiment.hpp"

using namespace mortensen;
namespace fs = std::filesystem;

namespace {

std::string field_of(const std::string& ini) {
  try {
    (void)parse_config(ini);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mortensen_test_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig small_convergence(const std::string& dir) {
  ExperimentConfig c;
  c.n_steps = 40;
  c.eps_list = {0.5, 0.3};
  c.n_particles = {2000};
  c.n_replicates = 3;
  c.optimizer.n_restarts = 2;
  c.output_dir = dir;
  return c;
}

struct ThreadsEnv {
  explicit ThreadsEnv(const char* v) { setenv("MORTENSEN_THREADS", v, 1); }
  ~ThreadsEnv() { unsetenv("MORTENSEN_THREADS"); }
};

}  // namespace

TEST_SUITE("experiment") {
  TEST_CASE("parse errors name the offending field") {
    CHECK(field_of("[filter]\neps_list = -0.1\n") == "filter.eps_list");
    CHECK(field_of("[filter]\neps_list = 0.1, 0.2\n") == "filter.eps_list");
    CHECK(field_of("[filter]\neps_list = abc\n") == "filter.eps_list");
    CHECK(field_of("[filter]\nn_particles = 0\n") == "filter.n_particles");
    CHECK(field_of("[filter]\ncolour = blue\n") == "filter.colour");
    CHECK(field_of("[grid]\nn_steps = 2.5\n") == "grid.n_steps");
    CHECK(field_of("[plot]\nx = 1\n") == "plot");
    CHECK(field_of("[model]\nname = nosuch\n") == "model.name");
    CHECK(field_of("[model]\ns = -1\n") == "model.s");
    CHECK(field_of("[phi_test]\nid = terminal_clamp\nwidth = 2\n") == "phi_test.width");
    CHECK(field_of("[rate]\nlambda_factor = 1\n") == "rate.lambda_factor");
    CHECK(field_of("[decay]\nevent = nope\n") == "decay.event");
    CHECK(field_of("[filter]\ntilt = sometimes\n") == "filter.tilt");
    try {
      (void)parse_config("[filter]\neps_list = -0.1\n");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("filter.eps_list") != std::string::npos);
      CHECK(e.exit_code() == 1);
    }
    CHECK_THROWS_AS(load_config("/nonexistent/config.cfg"), ConfigError);
  }

  TEST_CASE("config text round-trips") {
    const ExperimentConfig c = load_config(std::string(MORTENSEN_SOURCE_DIR) + "/configs/linear1d.cfg");
    const std::string ini = config_to_ini(c);
    const ExperimentConfig back = parse_config(ini);
    CHECK(config_to_ini(back) == ini);
    CHECK(config_to_json(back) == config_to_json(c));
    CHECK(back.eps_list == c.eps_list);
    CHECK(back.z_grid == c.z_grid);
    CHECK(ini.find("eps_list = 0.5, 0.35, 0.25\n") != std::string::npos);

    const ExperimentConfig d = parse_config("[phi_test]\nhi = 2\n");
    CHECK(d.phi_params.at("lo") == 0.0);
    CHECK(d.phi_params.at("hi") == 2.0);
    const ExperimentConfig e = parse_config("[phi_test]\nid = const\nc = 0.25\n");
    CHECK(e.phi_params.size() == 1);
    CHECK(config_to_ini(parse_config(config_to_ini(e))) == config_to_ini(e));
  }

  TEST_CASE("zero test functional gives zero estimates") {
    ExperimentConfig c = small_convergence(scratch("zero").string());
    c.phi_id = "zero";
    c.phi_params = {};
    c.tilt = "all";
    const ConvergenceResult r = run_convergence(c, {0.0, false});
    CHECK(r.z_star == 0.0);
    REQUIRE(r.records.size() == 6);
    for (const auto& rec : r.records) {
      CHECK(rec.status == "ok");
      CHECK(rec.v_eps == 0.0);
      CHECK(rec.abs_gap == 0.0);
    }
  }

  TEST_CASE("convergence files agree with the summary") {
    const fs::path dir = scratch("converge");
    const ConvergenceResult r = run_convergence(small_convergence(dir.string()));
    REQUIRE(fs::exists(dir / "convergence.csv"));
    REQUIRE(fs::exists(dir / "summary.json"));
    REQUIRE(fs::exists(dir / "timing.csv"));
    const auto rows = read_csv(dir / "convergence.csv");
    REQUIRE(rows.size() == 7);
    CHECK(rows[0] == std::vector<std::string>{"eps", "replicate", "V_eps", "std_error", "z_star", "abs_gap", "ess",
                                              "tilted", "status"});
    const nlohmann::json s = nlohmann::json::parse(slurp(dir / "summary.json"));
    CHECK(s == r.summary);
    CHECK(s.at("provenance").at("command") == "converge");
    const std::vector<double> eps = {0.5, 0.3};
    for (std::size_t e = 0; e < eps.size(); ++e) {
      std::vector<double> gaps;
      for (std::size_t i = 1; i < rows.size(); ++i)
        if (std::stod(rows[i][0]) == eps[e]) gaps.push_back(std::stod(rows[i][5]));
      CHECK(s.at("per_eps")[e].at("median_abs_gap").get<double>() == median(gaps));
      CHECK(s.at("per_eps")[e].at("tilted").get<bool>() == (e == 1));
    }
    CHECK(s.dump().find("wall_time") == std::string::npos);
    CHECK(read_csv(dir / "timing.csv")[0] == std::vector<std::string>{"eps", "replicate", "wall_time"});
  }

  TEST_CASE("results do not depend on the worker count") {
    ExperimentConfig c = small_convergence(scratch("threads").string());
    c.n_replicates = 2;
    ConvergenceResult one, three;
    {
      ThreadsEnv env("1");
      one = run_convergence(c, {0.0, false});
    }
    {
      ThreadsEnv env("3");
      three = run_convergence(c, {0.0, false});
    }
    REQUIRE(one.records.size() == three.records.size());
    for (std::size_t i = 0; i < one.records.size(); ++i) {
      CHECK(one.records[i].v_eps == three.records[i].v_eps);
      CHECK(one.records[i].std_error == three.records[i].std_error);
      CHECK(one.records[i].ess == three.records[i].ess);
    }
  }

  TEST_CASE("budget truncates and keeps partial tables") {
    const fs::path dir = scratch("budget");
    ExperimentConfig c = small_convergence(dir.string());
    c.n_replicates = 1000;
    const ConvergenceResult r = run_convergence(c, {0.2, true});
    CHECK(r.truncated);
    CHECK(r.records.size() < 2000);
    CHECK(r.summary.at("truncated").get<bool>());
    CHECK(read_csv(dir / "convergence.csv").size() == r.records.size() + 1);
  }

  TEST_CASE("decay: trivial events") {
    ExperimentConfig c;
    c.n_steps = 40;
    c.eps_list = {0.5};
    c.n_particles = {500};
    c.n_replicates = 3;
    c.output_dir = scratch("decay_trivial").string();
    c.event_relative = false;
    c.event_threshold = -100.0;  // the whole space
    DecayResult r = run_conditional_decay(c, {0.0, false});
    CHECK(r.bound == 0.0);
    for (const auto& rec : r.records) {
      CHECK(rec.status == "ok");
      CHECK(rec.eps2_log_lambda == 0.0);
    }
    c.event_relative = true;
    c.event_threshold = -0.5;  // the noiseless flow is inside the event
    r = run_conditional_decay(c, {0.0, false});
    CHECK(r.bound == 0.0);
    for (const auto& rec : r.records) CHECK(rec.eps2_log_lambda <= 0.0);
  }

  TEST_CASE("decay: estimate approaches the variational bound") {
    const fs::path dir = scratch("decay");
    ExperimentConfig c = load_config(std::string(MORTENSEN_SOURCE_DIR) + "/configs/decay.cfg");
    c.eps_list = {0.25};
    c.output_dir = dir.string();
    const DecayResult r = run_conditional_decay(c);
    CHECK(r.bound < 0.0);
    REQUIRE(r.median_estimate.size() == 1);
    CAPTURE(r.bound);
    CAPTURE(r.median_estimate[0]);
    CHECK(std::abs(r.median_estimate[0] - r.bound) <= 0.15);
    for (const auto& rec : r.records) CHECK(rec.status == "ok");
    const auto rows = read_csv(dir / "decay.csv");
    CHECK(rows[0] == std::vector<std::string>{"eps", "replicate", "eps2_log_lambda", "std_error", "bound", "gap",
                                              "status"});
    CHECK(rows.size() == r.records.size() + 1);
    CHECK(fs::exists(dir / "decay_summary.json"));
  }

  TEST_CASE("oracle command") {
    const fs::path dir = scratch("oracle");
    ExperimentConfig c;
    c.model_params = {{"c", 0.0}};
    c.eps_list = {0.3};
    c.n_particles = {5000};
    c.n_replicates = 4;
    c.output_dir = dir.string();
    const OracleResult r = run_filter_oracle(c);
    REQUIRE(r.records.size() == 4);
    for (const auto& rec : r.records) {
      // Blind observations: the ensemble mean is the prior mean.
      CHECK(std::abs(rec.kalman_mean - std::exp(-1.0)) <= 1e-2);
      CHECK(std::abs(rec.z_score) <= 5.0);
    }
    CHECK(fs::exists(dir / "oracle.csv"));
    CHECK(fs::exists(dir / "oracle_summary.json"));

    c.model = "doublewell";
    c.model_params = {};
    CHECK_THROWS_AS(run_filter_oracle(c), NonLinearModel);
  }

  TEST_CASE("seed helpers") {
    CHECK(observation_seed(1, 0) != observation_seed(1, 1));
    CHECK(ensemble_seed(1, 0, 0) != ensemble_seed(1, 1, 0));
    CHECK(ensemble_seed(1, 0, 0) != observation_seed(1, 0));
    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
  }
}
