#include "mortensen/experiment.hpp"

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "mortensen/filter.hpp"
#include "mortensen/kalman.hpp"
#include "mortensen/rng.hpp"

#ifndef MORTENSEN_VERSION
#define MORTENSEN_VERSION "dev"
#endif

namespace mortensen {

namespace pt = boost::property_tree;

std::string software_version() { return MORTENSEN_VERSION; }

// --- Config parsing ---------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_real(const std::string& field, const std::string& text) {
  const std::string t = trim(text);
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (t.empty() || end != t.c_str() + t.size() || !std::isfinite(v))
    throw ConfigError(field, "'" + text + "' is not a finite number");
  return v;
}

std::uint64_t parse_count(const std::string& field, const std::string& text) {
  const std::string t = trim(text);
  if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError(field, "'" + text + "' is not a non-negative integer");
  try {
    return std::stoull(t);
  } catch (const std::exception&) {
    throw ConfigError(field, "'" + text + "' is out of range");
  }
}

bool parse_bool(const std::string& field, const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "no") return false;
  throw ConfigError(field, "'" + text + "' is not a boolean");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::vector<double> parse_reals(const std::string& field, const std::string& text) {
  std::vector<double> out;
  if (trim(text).empty()) return out;
  for (const auto& s : split_list(text)) out.push_back(parse_real(field, s));
  return out;
}

// Shortest text that parses back to the same double.
std::string short_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + short_double(v[i]);
  return s;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s;
}

using ByKey = std::function<void(const std::string& field, const std::string& value)>;

void apply_section(const pt::ptree& section, const std::string& name, const std::map<std::string, ByKey>& keys,
                   const ByKey& fallback = nullptr) {
  for (const auto& [key, node] : section) {
    const std::string field = name + "." + key;
    if (!node.empty()) throw ConfigError(field, "nested values are not supported");
    const auto it = keys.find(key);
    if (it != keys.end())
      it->second(field, node.data());
    else if (fallback)
      fallback(field, node.data());
    else
      throw ConfigError(field, "unknown key");
  }
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config", "line " + std::to_string(e.line()) + ": " + e.message());
  }
  ExperimentConfig c;
  bool phi_id_seen = false;
  std::map<std::string, double> phi_params;
  auto real_into = [](double& dst) { return [&dst](const std::string& f, const std::string& v) { dst = parse_real(f, v); }; };
  auto count_into = [](std::size_t& dst) {
    return [&dst](const std::string& f, const std::string& v) { dst = static_cast<std::size_t>(parse_count(f, v)); };
  };

  for (const auto& [section, body] : tree) {
    if (body.data().size() && body.empty()) throw ConfigError(section, "top-level keys must be inside a section");
    if (section == "model") {
      apply_section(body, section, {{"name", [&](const std::string&, const std::string& v) { c.model = trim(v); }}},
                    [&](const std::string& f, const std::string& v) {
                      c.model_params[f.substr(f.find('.') + 1)] = parse_real(f, v);
                    });
    } else if (section == "grid") {
      apply_section(body, section, {{"n_steps", count_into(c.n_steps)}});
    } else if (section == "filter") {
      apply_section(body, section,
                    {{"eps_list", [&](const std::string& f, const std::string& v) { c.eps_list = parse_reals(f, v); }},
                     {"n_particles",
                      [&](const std::string& f, const std::string& v) {
                        c.n_particles.clear();
                        for (const auto& s : split_list(v)) c.n_particles.push_back(parse_count(f, s));
                      }},
                     {"n_replicates", count_into(c.n_replicates)},
                     {"tilt", [&](const std::string&, const std::string& v) { c.tilt = trim(v); }},
                     {"seed", [&](const std::string& f, const std::string& v) { c.seed = parse_count(f, v); }}});
    } else if (section == "phi_test") {
      apply_section(body, section,
                    {{"id",
                      [&](const std::string&, const std::string& v) {
                        c.phi_id = trim(v);
                        phi_id_seen = true;
                      }}},
                    [&](const std::string& f, const std::string& v) {
                      phi_params[f.substr(f.find('.') + 1)] = parse_real(f, v);
                    });
    } else if (section == "optimizer") {
      auto& o = c.optimizer;
      apply_section(body, section,
                    {{"n_restarts", count_into(o.n_restarts)},
                     {"max_iters", count_into(o.max_iters)},
                     {"grad_tol", real_into(o.grad_tol)},
                     {"restart_scale", real_into(o.restart_scale)},
                     {"seed", [&](const std::string& f, const std::string& v) { o.seed = parse_count(f, v); }},
                     {"pieces", count_into(o.pieces)},
                     {"finite_difference",
                      [&](const std::string& f, const std::string& v) { o.finite_difference = parse_bool(f, v); }}});
    } else if (section == "rate") {
      auto& r = c.rate;
      apply_section(body, section,
                    {{"tol", real_into(r.tol)},
                     {"lambda0", real_into(r.lambda0)},
                     {"lambda_factor", real_into(r.lambda_factor)},
                     {"lambda_cap", real_into(r.lambda_cap)},
                     {"outer_pieces", count_into(r.outer_pieces)},
                     {"outer_restarts", count_into(r.outer_restarts)},
                     {"outer_max_iters", count_into(r.outer_max_iters)},
                     {"outer_grad_tol", real_into(r.outer_grad_tol)},
                     {"inner_restarts", count_into(r.inner.n_restarts)},
                     {"inner_grad_tol", real_into(r.inner.grad_tol)},
                     {"inner_pieces", count_into(r.inner.pieces)},
                     {"z_grid", [&](const std::string& f, const std::string& v) { c.z_grid = parse_reals(f, v); }}});
    } else if (section == "decay") {
      apply_section(body, section,
                    {{"event", [&](const std::string&, const std::string& v) { c.event_id = trim(v); }},
                     {"threshold", real_into(c.event_threshold)},
                     {"relative",
                      [&](const std::string& f, const std::string& v) { c.event_relative = parse_bool(f, v); }},
                     {"tol", real_into(c.event_tol)}},
                    [&](const std::string& f, const std::string& v) {
                      c.event_params[f.substr(f.find('.') + 1)] = parse_real(f, v);
                    });
    } else if (section == "output") {
      apply_section(body, section, {{"dir", [&](const std::string&, const std::string& v) { c.output_dir = trim(v); }}});
    } else {
      throw ConfigError(section, "unknown section");
    }
  }
  // A config naming a functional describes all of its non-default parameters.
  if (phi_id_seen)
    c.phi_params = phi_params;
  else
    for (const auto& [k, v] : phi_params) c.phi_params[k] = v;
  c.rate.inner.seed = c.optimizer.seed;
  c.rate.inner.max_iters = c.optimizer.max_iters;
  c.rate.inner.restart_scale = c.optimizer.restart_scale;
  c.rate.inner.finite_difference = c.optimizer.finite_difference;
  validate_config(c);
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void validate_config(const ExperimentConfig& c) {
  if (!Catalog::global().contains(c.model)) throw ConfigError("model.name", "unknown model '" + c.model + "'");
  try {
    (void)Catalog::global().resolve(c.model, c.model_params);
  } catch (const ParamOutOfRange& e) {
    throw ConfigError("model." + e.param(), e.what());
  }
  if (c.n_steps == 0) throw ConfigError("grid.n_steps", "must be >= 1");
  if (c.eps_list.empty()) throw ConfigError("filter.eps_list", "must list at least one eps");
  for (std::size_t i = 0; i < c.eps_list.size(); ++i) {
    if (!(c.eps_list[i] > 0.0)) throw ConfigError("filter.eps_list", "eps must be positive");
    if (i > 0 && !(c.eps_list[i] < c.eps_list[i - 1]))
      throw ConfigError("filter.eps_list", "eps values must be strictly decreasing");
  }
  if (c.n_particles.empty() || (c.n_particles.size() != 1 && c.n_particles.size() != c.eps_list.size()))
    throw ConfigError("filter.n_particles", "give one count or one per eps");
  for (auto n : c.n_particles)
    if (n == 0) throw ConfigError("filter.n_particles", "must be >= 1");
  if (c.n_replicates == 0) throw ConfigError("filter.n_replicates", "must be >= 1");
  if (c.tilt != "none" && c.tilt != "smallest" && c.tilt != "all")
    throw ConfigError("filter.tilt", "must be none, smallest or all");
  (void)make_functional(c.phi_id, c.phi_params);
  try {
    (void)make_functional(c.event_id, c.event_params);
  } catch (const ConfigError& e) {
    throw ConfigError("decay.event", e.what());
  }
  if (c.optimizer.n_restarts == 0) throw ConfigError("optimizer.n_restarts", "must be >= 1");
  if (c.optimizer.max_iters == 0) throw ConfigError("optimizer.max_iters", "must be >= 1");
  if (!(c.optimizer.grad_tol > 0.0)) throw ConfigError("optimizer.grad_tol", "must be positive");
  if (!(c.optimizer.restart_scale >= 0.0)) throw ConfigError("optimizer.restart_scale", "must be >= 0");
  if (!(c.rate.tol > 0.0)) throw ConfigError("rate.tol", "must be positive");
  if (!(c.rate.lambda0 > 0.0)) throw ConfigError("rate.lambda0", "must be positive");
  if (!(c.rate.lambda_factor > 1.0)) throw ConfigError("rate.lambda_factor", "must exceed 1");
  if (!(c.rate.lambda_cap >= c.rate.lambda0)) throw ConfigError("rate.lambda_cap", "must be >= lambda0");
  if (c.rate.inner.n_restarts == 0) throw ConfigError("rate.inner_restarts", "must be >= 1");
  if (c.rate.outer_restarts == 0) throw ConfigError("rate.outer_restarts", "must be >= 1");
  if (!(c.rate.inner.grad_tol > 0.0)) throw ConfigError("rate.inner_grad_tol", "must be positive");
  if (!(c.rate.outer_grad_tol > 0.0)) throw ConfigError("rate.outer_grad_tol", "must be positive");
  if (!(c.event_tol > 0.0)) throw ConfigError("decay.tol", "must be positive");
  if (c.output_dir.empty()) throw ConfigError("output.dir", "must not be empty");
}

std::string config_to_ini(const ExperimentConfig& c) {
  std::ostringstream os;
  os << "[model]\nname = " << c.model << '\n';
  for (const auto& [k, v] : Catalog::global().resolve(c.model, c.model_params)) os << k << " = " << short_double(v) << '\n';
  os << "\n[grid]\nn_steps = " << c.n_steps << '\n';
  os << "\n[filter]\neps_list = " << join(c.eps_list) << "\nn_particles = " << join(c.n_particles)
     << "\nn_replicates = " << c.n_replicates << "\ntilt = " << c.tilt << "\nseed = " << c.seed << '\n';
  os << "\n[phi_test]\nid = " << c.phi_id << '\n';
  std::map<std::string, double> phi = functional_defaults(c.phi_id);
  for (const auto& [k, v] : c.phi_params) phi[k] = v;
  for (const auto& [k, v] : phi) os << k << " = " << short_double(v) << '\n';
  const auto& o = c.optimizer;
  os << "\n[optimizer]\nn_restarts = " << o.n_restarts << "\nmax_iters = " << o.max_iters
     << "\ngrad_tol = " << short_double(o.grad_tol) << "\nrestart_scale = " << short_double(o.restart_scale)
     << "\nseed = " << o.seed << "\npieces = " << o.pieces
     << "\nfinite_difference = " << (o.finite_difference ? "true" : "false") << '\n';
  const auto& r = c.rate;
  os << "\n[rate]\ntol = " << short_double(r.tol) << "\nlambda0 = " << short_double(r.lambda0)
     << "\nlambda_factor = " << short_double(r.lambda_factor) << "\nlambda_cap = " << short_double(r.lambda_cap)
     << "\nouter_pieces = " << r.outer_pieces << "\nouter_restarts = " << r.outer_restarts
     << "\nouter_max_iters = " << r.outer_max_iters << "\nouter_grad_tol = " << short_double(r.outer_grad_tol)
     << "\ninner_restarts = " << r.inner.n_restarts << "\ninner_grad_tol = " << short_double(r.inner.grad_tol)
     << "\ninner_pieces = " << r.inner.pieces << "\nz_grid = " << join(c.z_grid) << '\n';
  os << "\n[decay]\nevent = " << c.event_id << '\n';
  std::map<std::string, double> ev = functional_defaults(c.event_id);
  for (const auto& [k, v] : c.event_params) ev[k] = v;
  for (const auto& [k, v] : ev) os << k << " = " << short_double(v) << '\n';
  os << "threshold = " << short_double(c.event_threshold) << "\nrelative = " << (c.event_relative ? "true" : "false")
     << "\ntol = " << short_double(c.event_tol) << '\n';
  os << "\n[output]\ndir = " << c.output_dir << '\n';
  return os.str();
}

nlohmann::json config_to_json(const ExperimentConfig& c) {
  std::map<std::string, double> phi = functional_defaults(c.phi_id);
  for (const auto& [k, v] : c.phi_params) phi[k] = v;
  std::map<std::string, double> ev = functional_defaults(c.event_id);
  for (const auto& [k, v] : c.event_params) ev[k] = v;
  const auto& o = c.optimizer;
  const auto& r = c.rate;
  return {{"model", {{"name", c.model}, {"params", Catalog::global().resolve(c.model, c.model_params)}}},
          {"grid", {{"n_steps", c.n_steps}}},
          {"filter",
           {{"eps_list", c.eps_list},
            {"n_particles", c.n_particles},
            {"n_replicates", c.n_replicates},
            {"tilt", c.tilt},
            {"seed", c.seed}}},
          {"phi_test", {{"id", c.phi_id}, {"params", phi}}},
          {"optimizer",
           {{"n_restarts", o.n_restarts},
            {"max_iters", o.max_iters},
            {"grad_tol", o.grad_tol},
            {"restart_scale", o.restart_scale},
            {"seed", o.seed},
            {"pieces", o.pieces},
            {"finite_difference", o.finite_difference}}},
          {"rate",
           {{"tol", r.tol},
            {"lambda0", r.lambda0},
            {"lambda_factor", r.lambda_factor},
            {"lambda_cap", r.lambda_cap},
            {"outer_pieces", r.outer_pieces},
            {"outer_restarts", r.outer_restarts},
            {"outer_max_iters", r.outer_max_iters},
            {"outer_grad_tol", r.outer_grad_tol},
            {"inner_restarts", r.inner.n_restarts},
            {"inner_grad_tol", r.inner.grad_tol},
            {"inner_pieces", r.inner.pieces},
            {"z_grid", c.z_grid}}},
          {"decay",
           {{"event", c.event_id},
            {"params", ev},
            {"threshold", c.event_threshold},
            {"relative", c.event_relative},
            {"tol", c.event_tol}}},
          {"output", {{"dir", c.output_dir}}}};
}

ModelSpec config_model(const ExperimentConfig& c) { return build_model(c.model, c.model_params); }
FunctionalPtr config_phi(const ExperimentConfig& c) { return make_functional(c.phi_id, c.phi_params); }
TimeGrid config_grid(const ExperimentConfig& c, const ModelSpec& model) { return TimeGrid(c.n_steps, model.horizon()); }

// --- Shared helpers -------------------------------------------------------------------

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::uint64_t observation_seed(std::uint64_t seed, std::size_t replicate) {
  return child_seed(rng::derive_key(seed, 11), replicate);
}

std::uint64_t ensemble_seed(std::uint64_t seed, std::size_t eps_index, std::size_t replicate) {
  return child_seed(rng::derive_key(seed, 100 + eps_index), replicate);
}

nlohmann::json provenance(const ExperimentConfig& c, const std::string& command) {
  return {{"software", "mortensen"}, {"version", software_version()}, {"command", command},
          {"config", config_to_json(c)}};
}

void write_text(const std::string& dir, const std::string& name, const std::string& text) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path p = std::filesystem::path(dir) / name;
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  out << text;
  if (!out) throw Error("failed writing '" + p.string() + "'");
}

ControlPath observation_shift(const ModelSpec& model, const Path& observation, const Path& flow) {
  require_same_grid(observation.grid(), flow.grid(), "observation_shift");
  const TimeGrid& grid = observation.grid();
  const std::size_t m = model.dim_m();
  RowMatrix psi(grid.n_steps(), m);
  const auto& y = observation.values();
  for (std::size_t i = 0; i < grid.n_steps(); ++i) {
    const Vec h = model.observe(flow.node(i));
    for (std::size_t c = 0; c < m; ++c) {
      const auto ii = static_cast<Eigen::Index>(i), cc = static_cast<Eigen::Index>(c);
      psi(ii, cc) = (y(ii + 1, cc) - y(ii, cc)) / grid.dt() - h[c];
    }
  }
  return ControlPath(grid, std::move(psi));
}

namespace {

using Clock = std::chrono::steady_clock;

class Budget {
 public:
  explicit Budget(double max_seconds) : max_(max_seconds), start_(Clock::now()) {}
  [[nodiscard]] bool exhausted() const { return max_ > 0.0 && elapsed() > max_; }
  [[nodiscard]] double elapsed() const { return std::chrono::duration<double>(Clock::now() - start_).count(); }

 private:
  double max_;
  Clock::time_point start_;
};

OptimizerOptions lax(OptimizerOptions o) {
  o.strict = false;
  return o;
}

std::uint64_t tilt_seed(std::uint64_t seed, std::uint64_t which) { return rng::derive_key(seed, 0x7417 + which); }

}  // namespace

FilterEstimate laplace_estimate(const ModelSpec& model, const Path& observation, const FunctionalPtr& phi, double eps,
                                std::size_t n_particles, std::uint64_t seed, bool tilted, const OptimizerOptions& opts,
                                double* ess) {
  if (!tilted) {
    const WeightedEnsemble ens = build_ensemble(model, observation, eps, n_particles, seed);
    const FilterEstimate e = neg_eps2_log_U(ens, *phi, eps);
    if (ess) *ess = e.effective_sample_size;
    return e;
  }
  // Importance sampling around the observation-conditioned minimizers: the
  // numerator is tilted toward argmin [H + phi + J], the normalizer toward
  // the minimum-energy path argmin [H + J].
  const TimeGrid& grid = observation.grid();
  const Path flow = integrate_flow(model, ControlPath::zero(grid, model.dim_k()));
  const ControlPath psi = observation_shift(model, observation, flow);
  const ActionProblem base{model, flow, psi, nullptr};
  ActionProblem with = base;
  with.phi_test = phi;
  const VariationalSolution b = minimize_action(base, lax(opts));
  const VariationalSolution a = minimize_action(with, lax(opts), {b.optimal_control});

  EnsembleOptions num_opts, den_opts;
  num_opts.tilt = a.optimal_control;
  den_opts.tilt = b.optimal_control;
  const double eps2 = eps * eps;
  FilterEstimate num, den;
  {
    const WeightedEnsemble ens = build_ensemble(model, observation, eps, n_particles, tilt_seed(seed, 0), num_opts);
    std::vector<double> lg = ens.evaluate(*phi);
    for (double& v : lg) v = -v / eps2;
    num = log_gamma(ens, lg);
  }
  {
    const WeightedEnsemble ens = build_ensemble(model, observation, eps, n_particles, tilt_seed(seed, 1), den_opts);
    den = log_gamma(ens, std::vector<double>(n_particles, 0.0));
  }
  const Bounds bounds = phi->bounds();
  FilterEstimate out;
  out.value = std::clamp(-eps2 * (num.value - den.value), bounds.lo, bounds.hi);
  out.std_error = eps2 * std::sqrt(num.std_error * num.std_error + den.std_error * den.std_error);
  out.effective_sample_size = std::min(num.effective_sample_size, den.effective_sample_size);
  out.n_particles = n_particles;
  if (ess) *ess = out.effective_sample_size;
  return out;
}

// --- Convergence ----------------------------------------------------------------------

namespace {

std::string convergence_csv(const std::vector<ConvergenceRecord>& records) {
  std::ostringstream os;
  os << "eps,replicate,V_eps,std_error,z_star,abs_gap,ess,tilted,status\n";
  for (const auto& r : records)
    os << format_double(r.eps) << ',' << r.replicate << ',' << format_double(r.v_eps) << ','
       << format_double(r.std_error) << ',' << format_double(r.z_star) << ',' << format_double(r.abs_gap) << ','
       << format_double(r.ess) << ',' << (r.tilted ? 1 : 0) << ',' << r.status << '\n';
  return os.str();
}

std::string timing_csv(const std::vector<ConvergenceRecord>& records) {
  std::ostringstream os;
  os << "eps,replicate,wall_time\n";
  for (const auto& r : records) os << format_double(r.eps) << ',' << r.replicate << ',' << format_double(r.wall_time) << '\n';
  return os.str();
}

std::string sanitize(std::string s) {
  for (char& ch : s)
    if (ch == ',' || ch == '\n' || ch == '\r') ch = ';';
  return s;
}

}  // namespace

ConvergenceResult run_convergence(const ExperimentConfig& config, const RunControl& control) {
  validate_config(config);
  const ModelSpec model = config_model(config);
  const FunctionalPtr phi = config_phi(config);
  const TimeGrid grid = config_grid(config, model);
  const Budget budget(control.max_seconds);

  ConvergenceResult res;
  res.z_star = typical_value(model, phi, grid, config.optimizer);

  auto flush = [&] {
    res.median_gap.clear();
    nlohmann::json per_eps = nlohmann::json::array();
    for (std::size_t e = 0; e < config.eps_list.size(); ++e) {
      std::vector<double> gaps;
      for (const auto& r : res.records)
        if (r.eps == config.eps_list[e] && r.status == "ok") gaps.push_back(r.abs_gap);
      const double med = median(gaps);
      res.median_gap.push_back(med);
      per_eps.push_back({{"eps", config.eps_list[e]},
                         {"median_abs_gap", gaps.empty() ? nlohmann::json(nullptr) : nlohmann::json(med)},
                         {"n_ok", gaps.size()},
                         {"tilted", config.tilted(e)}});
    }
    res.summary = {{"provenance", provenance(config, "converge")},
                   {"z_star", res.z_star},
                   {"per_eps", per_eps},
                   {"n_records", res.records.size()},
                   {"truncated", res.truncated}};
    if (control.write_files) {
      write_text(config.output_dir, "convergence.csv", convergence_csv(res.records));
      write_text(config.output_dir, "summary.json", res.summary.dump(2) + "\n");
      write_text(config.output_dir, "timing.csv", timing_csv(res.records));
    }
  };

  for (std::size_t e = 0; e < config.eps_list.size() && !res.truncated; ++e) {
    const double eps = config.eps_list[e];
    for (std::size_t r = 0; r < config.n_replicates; ++r) {
      if (budget.exhausted()) {
        res.truncated = true;
        break;
      }
      const auto t0 = Clock::now();
      ConvergenceRecord rec;
      rec.eps = eps;
      rec.replicate = r;
      rec.z_star = res.z_star;
      rec.tilted = config.tilted(e);
      try {
        const Path y = simulate_pair(model, eps, grid, observation_seed(config.seed, r)).observation;
        const FilterEstimate est = laplace_estimate(model, y, phi, eps, config.particles_for(e),
                                                    ensemble_seed(config.seed, e, r), rec.tilted, config.optimizer,
                                                    &rec.ess);
        rec.v_eps = est.value;
        rec.std_error = est.std_error;
        rec.abs_gap = std::abs(est.value - res.z_star);
      } catch (const Error& ex) {
        rec.v_eps = rec.std_error = rec.abs_gap = rec.ess = std::numeric_limits<double>::quiet_NaN();
        rec.status = "error: " + sanitize(ex.what());
      }
      rec.wall_time = std::chrono::duration<double>(Clock::now() - t0).count();
      res.records.push_back(rec);
    }
    flush();
  }
  flush();
  return res;
}

// --- Conditional decay ------------------------------------------------------------------

VariationalSolution constrained_minimum(const ActionProblem& base, const FunctionalPtr& event, double threshold,
                                        const OptimizerOptions& opts, double tol) {
  std::vector<ControlPath> warm;
  ActionProblem p = base;
  VariationalSolution sol = minimize_action(base, lax(opts));
  for (double w = 10.0; event->value(sol.optimal_path.view()) < threshold - tol && w <= 1e10; w *= 10.0) {
    p.phi_test = make_shortfall_penalty(event, threshold, w);
    warm.assign(1, sol.optimal_control);
    sol = minimize_action(p, lax(opts), warm);
  }
  sol.optimal_value = action_objective(base, sol.optimal_control);
  if (event->value(sol.optimal_path.view()) < threshold - tol) {
    sol.converged = false;
    sol.status = "constraint shortfall above tolerance";
  }
  return sol;
}

namespace {

std::string decay_csv(const std::vector<DecayRecord>& records) {
  std::ostringstream os;
  os << "eps,replicate,eps2_log_lambda,std_error,bound,gap,status\n";
  for (const auto& r : records)
    os << format_double(r.eps) << ',' << r.replicate << ',' << format_double(r.eps2_log_lambda) << ','
       << format_double(r.std_error) << ',' << format_double(r.bound) << ',' << format_double(r.gap) << ','
       << r.status << '\n';
  return os.str();
}

}  // namespace

DecayResult run_conditional_decay(const ExperimentConfig& config, const RunControl& control) {
  validate_config(config);
  const ModelSpec model = config_model(config);
  const TimeGrid grid = config_grid(config, model);
  const FunctionalPtr event = make_functional(config.event_id, config.event_params);
  const Budget budget(control.max_seconds);
  const OptimizerOptions opts = lax(config.optimizer);

  const Path flow = integrate_flow(model, ControlPath::zero(grid, model.dim_k()));
  DecayResult res;
  res.threshold = config.event_relative ? event->value(flow.view()) + config.event_threshold : config.event_threshold;
  const FunctionalPtr in_a = make_indicator(event, res.threshold);
  const ActionProblem limit{model, flow, ControlPath::zero(grid, model.dim_m()), nullptr};
  const VariationalSolution limit_sol = constrained_minimum(limit, event, res.threshold, opts, config.event_tol);
  res.bound = -limit_sol.optimal_value;

  auto flush = [&] {
    res.median_estimate.clear();
    nlohmann::json per_eps = nlohmann::json::array();
    for (std::size_t e = 0; e < config.eps_list.size(); ++e) {
      std::vector<double> est, gaps;
      for (const auto& r : res.records)
        if (r.eps == config.eps_list[e] && r.status == "ok") {
          est.push_back(r.eps2_log_lambda);
          gaps.push_back(r.gap);
        }
      res.median_estimate.push_back(median(est));
      per_eps.push_back({{"eps", config.eps_list[e]},
                         {"median_eps2_log_lambda", est.empty() ? nlohmann::json(nullptr) : nlohmann::json(median(est))},
                         {"median_gap", gaps.empty() ? nlohmann::json(nullptr) : nlohmann::json(median(gaps))},
                         {"n_ok", est.size()}});
    }
    res.summary = {{"provenance", provenance(config, "decay")},
                   {"bound", res.bound},
                   {"threshold", res.threshold},
                   {"bound_converged", limit_sol.converged},
                   {"per_eps", per_eps},
                   {"truncated", res.truncated}};
    if (control.write_files) {
      write_text(config.output_dir, "decay.csv", decay_csv(res.records));
      write_text(config.output_dir, "decay_summary.json", res.summary.dump(2) + "\n");
    }
  };

  for (std::size_t e = 0; e < config.eps_list.size() && !res.truncated; ++e) {
    const double eps = config.eps_list[e];
    const double eps2 = eps * eps;
    for (std::size_t r = 0; r < config.n_replicates; ++r) {
      if (budget.exhausted()) {
        res.truncated = true;
        break;
      }
      DecayRecord rec;
      rec.eps = eps;
      rec.replicate = r;
      rec.bound = res.bound;
      try {
        const Path y = simulate_pair(model, eps, grid, observation_seed(config.seed, r)).observation;
        const std::size_t n = config.particles_for(e);
        const std::uint64_t seed = ensemble_seed(config.seed, e, r);
        std::optional<ControlPath> den_tilt, num_tilt;
        if (config.tilted(e)) {
          const ActionProblem cond{model, flow, observation_shift(model, y, flow), nullptr};
          const VariationalSolution b = minimize_action(cond, opts);
          den_tilt = b.optimal_control;
          if (event->value(b.optimal_path.view()) < res.threshold)
            num_tilt = constrained_minimum(cond, event, res.threshold, opts, config.event_tol).optimal_control;
        }
        if (!num_tilt) {
          // One ensemble serves both expectations.
          EnsembleOptions eo;
          eo.tilt = den_tilt;
          const WeightedEnsemble ens = build_ensemble(model, y, eps, n, seed, eo);
          const FilterEstimate p = estimate_lambda(ens, *in_a);
          if (!(p.value > 0.0)) throw Error("no particle reached the event set");
          rec.eps2_log_lambda = eps2 * std::log(p.value);
          rec.std_error = eps2 * p.std_error / p.value;
        } else {
          EnsembleOptions num_opts, den_opts;
          num_opts.tilt = num_tilt;
          den_opts.tilt = den_tilt;
          FilterEstimate num, den;
          {
            const WeightedEnsemble ens = build_ensemble(model, y, eps, n, tilt_seed(seed, 0), num_opts);
            std::vector<double> lg = ens.evaluate(*in_a);
            for (double& v : lg) v = v > 0.5 ? 0.0 : -std::numeric_limits<double>::infinity();
            num = log_gamma(ens, lg);
          }
          {
            const WeightedEnsemble ens = build_ensemble(model, y, eps, n, tilt_seed(seed, 1), den_opts);
            den = log_gamma(ens, std::vector<double>(n, 0.0));
          }
          if (!std::isfinite(num.value)) throw Error("no particle reached the event set");
          rec.eps2_log_lambda = std::min(0.0, eps2 * (num.value - den.value));
          rec.std_error = eps2 * std::sqrt(num.std_error * num.std_error + den.std_error * den.std_error);
        }
        rec.gap = rec.eps2_log_lambda - res.bound;
      } catch (const Error& ex) {
        rec.eps2_log_lambda = rec.std_error = rec.gap = std::numeric_limits<double>::quiet_NaN();
        rec.status = "error: " + sanitize(ex.what());
      }
      res.records.push_back(rec);
    }
    flush();
  }
  flush();
  return res;
}

// --- Filter oracle ----------------------------------------------------------------------

OracleResult run_filter_oracle(const ExperimentConfig& config, const RunControl& control) {
  validate_config(config);
  const ModelSpec model = config_model(config);
  if (!model.linear_gaussian()) throw NonLinearModel(model.name());
  const LinearGaussian lg = *model.linear_gaussian();
  const TimeGrid grid = config_grid(config, model);
  const Budget budget(control.max_seconds);
  const FunctionalPtr mean_f = make_terminal_value(0), square_f = make_terminal_square(0);

  OracleResult res;
  auto flush = [&] {
    std::size_t within = 0;
    for (const auto& r : res.records)
      if (std::abs(r.z_score) <= 3.0) ++within;
    res.fraction_within_3 = res.records.empty() ? 0.0 : static_cast<double>(within) / res.records.size();
    std::ostringstream os;
    os << "eps,replicate,ks_mean,std_error,kalman_mean,z_score,ks_variance,kalman_variance,ess\n";
    for (const auto& r : res.records)
      os << format_double(r.eps) << ',' << r.replicate << ',' << format_double(r.ks_mean) << ','
         << format_double(r.std_error) << ',' << format_double(r.kalman_mean) << ',' << format_double(r.z_score) << ','
         << format_double(r.ks_variance) << ',' << format_double(r.kalman_variance) << ',' << format_double(r.ess)
         << '\n';
    res.summary = {{"provenance", provenance(config, "oracle")},
                   {"n_records", res.records.size()},
                   {"n_within_3", within},
                   {"fraction_within_3", res.fraction_within_3},
                   {"truncated", res.truncated}};
    if (control.write_files) {
      write_text(config.output_dir, "oracle.csv", os.str());
      write_text(config.output_dir, "oracle_summary.json", res.summary.dump(2) + "\n");
    }
  };

  for (std::size_t e = 0; e < config.eps_list.size() && !res.truncated; ++e) {
    const double eps = config.eps_list[e];
    for (std::size_t r = 0; r < config.n_replicates; ++r) {
      if (budget.exhausted()) {
        res.truncated = true;
        break;
      }
      const Path y = simulate_pair(model, eps, grid, observation_seed(config.seed, r)).observation;
      const WeightedEnsemble ens = build_ensemble(model, y, eps, config.particles_for(e), ensemble_seed(config.seed, e, r));
      const FilterEstimate mean = estimate_lambda(ens, *mean_f);
      const FilterEstimate square = estimate_lambda(ens, *square_f);
      const KalmanResult k = kalman_smoother(lg, model.x0()[0], eps, y);
      OracleRecord rec;
      rec.eps = eps;
      rec.replicate = r;
      rec.ks_mean = mean.value;
      rec.std_error = mean.std_error;
      rec.kalman_mean = k.terminal_mean();
      rec.z_score = mean.std_error > 0.0 ? (mean.value - rec.kalman_mean) / mean.std_error
                                         : (mean.value == rec.kalman_mean ? 0.0 : std::numeric_limits<double>::infinity());
      rec.ks_variance = square.value - mean.value * mean.value;
      rec.kalman_variance = k.terminal_variance();
      rec.ess = mean.effective_sample_size;
      res.records.push_back(rec);
    }
    flush();
  }
  flush();
  return res;
}

}  // namespace mortensen
