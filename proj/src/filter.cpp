#include "mortensen/filter.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mortensen/error.hpp"
#include "mortensen/kernels.hpp"
#include "mortensen/parallel.hpp"

namespace mortensen {

namespace {

void check_eps(double eps) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw ValidationError("eps must be positive and finite");
}

std::vector<double> shifted_exp(const std::vector<double>& x, double shift) {
  std::vector<double> out(x.size());
  simd::active_kernels().exp_shifted(x.data(), shift, out.data(), x.size());
  return out;
}

double sum(const std::vector<double>& v) { return simd::canonical_sum(v); }

}  // namespace

double log_likelihood(const ModelSpec& model, const Path& signal, const Path& observation, double eps) {
  check_eps(eps);
  require_same_grid(signal.grid(), observation.grid(), "log_likelihood");
  if (signal.dim() != model.dim_d() || observation.dim() != model.dim_m())
    throw ValidationError("log_likelihood: path dimensions do not match the model");
  const TimeGrid& grid = signal.grid();
  const double dt = grid.dt();
  const auto& y = observation.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < grid.n_steps(); ++i) {
    const Vec h = model.observe(signal.node(i));
    for (std::size_t c = 0; c < model.dim_m(); ++c) {
      const double dy = y(static_cast<Eigen::Index>(i + 1), static_cast<Eigen::Index>(c)) -
                        y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
      acc += h[c] * dy - (0.5 * dt * h[c]) * h[c];
    }
  }
  return acc / (eps * eps);
}

// --- WeightedEnsemble ---------------------------------------------------------

WeightedEnsemble::WeightedEnsemble(TimeGrid grid, std::size_t dim, double eps, Path observation,
                                   std::vector<double> states, std::vector<double> log_weights)
    : grid_(grid), dim_(dim), eps_(eps), observation_(std::move(observation)), states_(std::move(states)),
      log_weights_(std::move(log_weights)) {
  if (log_weights_.empty()) throw ValidationError("ensemble needs at least one particle");
  if (states_.size() != grid_.n_nodes() * dim_ * log_weights_.size())
    throw ValidationError("ensemble state storage has the wrong size");
  for (double lw : log_weights_)
    if (!std::isfinite(lw)) throw Error("ensemble log-weight is not finite");
  log_norm_ = simd::log_sum_exp(log_weights_);
}

PathView WeightedEnsemble::particle(std::size_t i) const {
  const std::size_t n = size();
  return PathView(states_.data() + i, grid_.n_nodes(), dim_, dim_ * n, n, grid_);
}

Path WeightedEnsemble::particle_path(std::size_t i) const {
  const PathView v = particle(i);
  RowMatrix m(grid_.n_nodes(), dim_);
  for (std::size_t j = 0; j < grid_.n_nodes(); ++j)
    for (std::size_t c = 0; c < dim_; ++c) m(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c)) = v(j, c);
  return Path(grid_, std::move(m));
}

std::vector<double> WeightedEnsemble::normalized_weights() const { return shifted_exp(log_weights_, log_norm_); }

double WeightedEnsemble::effective_sample_size() const {
  std::vector<double> w = normalized_weights();
  simd::active_kernels().multiply(w.data(), w.data(), w.data(), w.size());
  return 1.0 / sum(w);
}

std::vector<double> WeightedEnsemble::evaluate(const PathFunctional& f) const {
  std::vector<double> out(size());
  parallel_for(out.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) out[i] = f.value(particle(i));
  });
  return out;
}

// --- Construction -----------------------------------------------------------------

WeightedEnsemble build_ensemble(const ModelSpec& model, const Path& observation, double eps,
                                std::size_t n_particles, std::uint64_t seed, const EnsembleOptions& options) {
  check_eps(eps);
  if (n_particles == 0) throw ValidationError("n_particles must be >= 1");
  if (observation.dim() != model.dim_m())
    throw ValidationError("observation dimension does not match the model");
  const TimeGrid& grid = observation.grid();
  const std::size_t d = model.dim_d(), k = model.dim_k(), m = model.dim_m();
  const double dt = grid.dt();
  const auto& y = observation.values();
  const ControlPath* tilt = options.tilt ? &*options.tilt : nullptr;
  if (tilt) require_same_grid(tilt->grid(), grid, "build_ensemble tilt");

  std::vector<std::uint64_t> keys(n_particles);
  for (std::size_t i = 0; i < n_particles; ++i) keys[i] = signal_stream_key(child_seed(seed, i));

  std::vector<double> states(grid.n_nodes() * d * n_particles);
  std::vector<double> acc(n_particles, 0.0), tilt_acc(tilt ? n_particles : 0, 0.0);
  const auto& ker = simd::active_kernels();
  const BatchMaps& maps = model.batch();

  BatchOptions batch;
  batch.states = states.data();
  batch.drift_control = tilt;
  batch.workers = options.workers;
  batch.on_step = [&](const StepContext& ctx) {
    thread_local std::vector<double> h;
    h.resize(m * ctx.n);
    maps.observe(ctx.x, h.data(), ctx.n);
    double* a = acc.data() + ctx.first_particle;
    for (std::size_t c = 0; c < m; ++c) {
      const double dy = y(static_cast<Eigen::Index>(ctx.step + 1), static_cast<Eigen::Index>(c)) -
                        y(static_cast<Eigen::Index>(ctx.step), static_cast<Eigen::Index>(c));
      ker.loglik_step(a, h.data() + c * ctx.n, dy, dt, ctx.n);
    }
    if (tilt) {
      double* t = tilt_acc.data() + ctx.first_particle;
      for (std::size_t c = 0; c < k; ++c)
        ker.axpy(t, tilt->values()(static_cast<Eigen::Index>(ctx.step), static_cast<Eigen::Index>(c)),
                 ctx.dw + c * ctx.n, ctx.n);
    }
  };
  simulate_signals(model, eps, grid, keys, batch);

  const double inv_eps2 = 1.0 / (eps * eps);
  std::vector<double> lw(n_particles);
  for (std::size_t p = 0; p < n_particles; ++p) lw[p] = acc[p] / (eps * eps);
  if (tilt) {
    // dP/dQ = exp(-(1/eps) sum u.dW - (1/(2 eps^2)) sum |u|^2 dt) for the
    // increments dW drawn under the tilted law Q.
    const double energy = tilt->squared_l2_norm();
    for (std::size_t p = 0; p < n_particles; ++p)
      lw[p] = (lw[p] - tilt_acc[p] / eps) - 0.5 * energy * inv_eps2;
  }
  return WeightedEnsemble(grid, d, eps, observation, std::move(states), std::move(lw));
}

// --- Estimators -----------------------------------------------------------------

FilterEstimate estimate_lambda(const WeightedEnsemble& ensemble, const PathFunctional& f) {
  const std::vector<double> fv = ensemble.evaluate(f);
  for (double v : fv)
    if (!std::isfinite(v)) throw ValidationError("functional '" + f.id() + "' is not finite on a particle");
  const auto [lo_it, hi_it] = std::minmax_element(fv.begin(), fv.end());
  const double lo = *lo_it, hi = *hi_it;
  const std::vector<double> w = ensemble.normalized_weights();
  const std::size_t n = w.size();

  // Centering on the minimum makes constant functionals exact.
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = w[i] * (fv[i] - lo);
  const double mean = std::clamp(lo + sum(t) / sum(w), lo, hi);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = w[i] * (fv[i] - mean);
    t[i] = r * r;
  }
  FilterEstimate out;
  out.value = mean;
  out.std_error = std::sqrt(sum(t));
  out.effective_sample_size = ensemble.effective_sample_size();
  out.n_particles = n;
  return out;
}

FilterEstimate neg_eps2_log_U(const WeightedEnsemble& ensemble, const PathFunctional& phi, double eps) {
  check_eps(eps);
  const std::vector<double> pv = ensemble.evaluate(phi);
  for (double v : pv)
    if (!std::isfinite(v)) throw ValidationError("functional '" + phi.id() + "' is not finite on a particle");
  const auto [lo_it, hi_it] = std::minmax_element(pv.begin(), pv.end());
  const double lo = *lo_it, hi = *hi_it;
  const double eps2 = eps * eps;
  const std::vector<double>& lw = ensemble.log_weights();
  const std::size_t n = lw.size();

  std::vector<double> shifted(n);
  for (std::size_t i = 0; i < n; ++i) shifted[i] = lw[i] - (pv[i] - lo) / eps2;
  const double lse_phi = simd::log_sum_exp(shifted);
  const double delta = lse_phi - ensemble.log_normalizer();

  const std::vector<double> w = ensemble.normalized_weights();
  const std::vector<double> q = shifted_exp(shifted, lse_phi);
  std::vector<double> sq(n);
  for (std::size_t i = 0; i < n; ++i) sq[i] = (q[i] - w[i]) * (q[i] - w[i]);

  FilterEstimate out;
  out.value = std::clamp(lo - eps2 * delta, lo, hi);
  out.std_error = eps2 * std::sqrt(sum(sq));
  out.effective_sample_size = ensemble.effective_sample_size();
  out.n_particles = n;
  return out;
}

FilterEstimate log_gamma(const WeightedEnsemble& ensemble, const std::vector<double>& log_g) {
  const std::vector<double>& lw = ensemble.log_weights();
  const std::size_t n = lw.size();
  if (log_g.size() != n) throw ValidationError("log_gamma: one value per particle required");
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (std::isnan(log_g[i]) || log_g[i] == std::numeric_limits<double>::infinity())
      throw ValidationError("log_gamma: log g must be finite or -inf");
    v[i] = lw[i] + log_g[i];
  }
  FilterEstimate out;
  out.n_particles = n;
  const double lse = simd::log_sum_exp(v);
  if (lse == -std::numeric_limits<double>::infinity()) {
    out.value = lse;
    out.std_error = std::numeric_limits<double>::infinity();
    return out;
  }
  out.value = lse - std::log(static_cast<double>(n));
  const std::vector<double> s = shifted_exp(v, lse);
  std::vector<double> dev(n), s2(n);
  const double nd = static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = nd * s[i] - 1.0;
    dev[i] = r * r;
    s2[i] = s[i] * s[i];
  }
  out.std_error = n > 1 ? std::sqrt(sum(dev) / (nd * (nd - 1.0))) : std::numeric_limits<double>::infinity();
  out.effective_sample_size = 1.0 / sum(s2);
  return out;
}

nlohmann::json ensemble_summary(const WeightedEnsemble& ensemble, const std::vector<NamedEstimate>& estimates) {
  nlohmann::json j;
  j["eps"] = ensemble.eps();
  j["n_particles"] = ensemble.size();
  j["ess"] = ensemble.effective_sample_size();
  j["estimates"] = nlohmann::json::array();
  for (const auto& e : estimates)
    j["estimates"].push_back({{"functional", e.functional}, {"value", e.estimate.value},
                              {"std_error", e.estimate.std_error}});
  return j;
}

}  // namespace mortensen
