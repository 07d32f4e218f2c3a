#include "mortensen/path.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

#include "mortensen/error.hpp"
#include "mortensen/kernels.hpp"
#include "mortensen/parallel.hpp"
#include "mortensen/rng.hpp"

namespace mortensen {

TimeGrid::TimeGrid(std::size_t n_steps, double horizon) : n_steps_(n_steps), horizon_(horizon) {
  if (n_steps == 0) throw ValidationError("time grid needs n_steps >= 1");
  if (!(horizon > 0.0) || !std::isfinite(horizon))
    throw ValidationError("time grid needs a positive finite horizon");
}

void require_same_grid(const TimeGrid& a, const TimeGrid& b, const char* what) {
  if (!(a == b)) throw GridMismatch(std::string(what) + ": paths do not share a time grid");
}

Vec PathView::node(std::size_t i) const {
  Vec v(dim_);
  for (std::size_t c = 0; c < dim_; ++c) v[c] = (*this)(i, c);
  return v;
}

Path::Path(TimeGrid grid, RowMatrix values) : grid_(grid), values_(std::move(values)) {
  if (static_cast<std::size_t>(values_.rows()) != grid_.n_nodes())
    throw GridMismatch("path has " + std::to_string(values_.rows()) + " rows, grid has " +
                       std::to_string(grid_.n_nodes()) + " nodes");
}

Path Path::constant(const TimeGrid& grid, const Vec& value) {
  RowMatrix v(grid.n_nodes(), value.size());
  v.rowwise() = value.transpose();
  return Path(grid, std::move(v));
}

PathView Path::view() const {
  return PathView(values_.data(), grid_.n_nodes(), dim(), dim(), 1, grid_);
}

ControlPath::ControlPath(TimeGrid grid, RowMatrix values) : grid_(grid), values_(std::move(values)) {
  if (static_cast<std::size_t>(values_.rows()) != grid_.n_steps())
    throw GridMismatch("control has " + std::to_string(values_.rows()) + " rows, grid has " +
                       std::to_string(grid_.n_steps()) + " steps");
  if (!values_.allFinite()) throw ValidationError("control values must be finite");
}

ControlPath ControlPath::zero(const TimeGrid& grid, std::size_t dim) {
  return ControlPath(grid, RowMatrix::Zero(grid.n_steps(), dim));
}

ControlPath ControlPath::constant(const TimeGrid& grid, const Vec& value) {
  RowMatrix v(grid.n_steps(), value.size());
  v.rowwise() = value.transpose();
  return ControlPath(grid, std::move(v));
}

double ControlPath::squared_l2_norm() const { return values_.squaredNorm() * grid_.dt(); }

// --- Noise -------------------------------------------------------------------

std::uint64_t signal_stream_key(std::uint64_t seed) { return rng::derive_key(seed, 0); }
std::uint64_t observation_stream_key(std::uint64_t seed) { return rng::derive_key(seed, 1); }
std::uint64_t child_seed(std::uint64_t seed, std::uint64_t index) {
  return rng::derive_key(seed ^ 0xA5A5A5A55A5A5A5Aull, index + 0x100);
}

void stream_normals(std::uint64_t key, std::size_t step, std::size_t dim, double* out) {
  const rng::CounterStream stream(key);
  for (std::size_t c = 0; c < dim; ++c) {
    const std::uint64_t j = static_cast<std::uint64_t>(step) * dim + c;
    const auto [z0, z1] = stream.normal_pair(j / 2);
    out[c] = (j % 2 == 0) ? z0 : z1;
  }
}

NoiseDraw NoiseDraw::generate(const TimeGrid& grid, std::size_t k, std::size_t m, std::uint64_t seed) {
  NoiseDraw draw{grid, RowMatrix(grid.n_steps(), k), RowMatrix(grid.n_steps(), m), seed};
  const double sq = std::sqrt(grid.dt());
  std::vector<double> z(std::max(k, m));
  const auto wkey = signal_stream_key(seed), bkey = observation_stream_key(seed);
  for (std::size_t i = 0; i < grid.n_steps(); ++i) {
    stream_normals(wkey, i, k, z.data());
    for (std::size_t c = 0; c < k; ++c) draw.increments_w(i, c) = sq * z[c];
    stream_normals(bkey, i, m, z.data());
    for (std::size_t c = 0; c < m; ++c) draw.increments_b(i, c) = sq * z[c];
  }
  return draw;
}

// --- Euler-Maruyama ----------------------------------------------------------

void simulate_signals(const ModelSpec& model, double eps, const TimeGrid& grid,
                      std::span<const std::uint64_t> keys, const BatchOptions& options) {
  if (!(eps >= 0.0) || !std::isfinite(eps)) throw ValidationError("eps must be finite and >= 0");
  if (options.drift_control) {
    require_same_grid(options.drift_control->grid(), grid, "simulate_signals");
    if (options.drift_control->dim() != model.dim_k())
      throw ValidationError("drift control must have dimension k");
  }
  const std::size_t total = keys.size();
  const std::size_t d = model.dim_d(), k = model.dim_k();
  const double dt = grid.dt();
  const double sq = std::sqrt(dt);
  const auto& ker = simd::active_kernels();
  const BatchMaps& maps = model.batch();

  parallel_for(
      total,
      [&](std::size_t begin, std::size_t end) {
        const std::size_t n = end - begin;
        std::vector<double> x(d * n), drift(d * n), noise(d * n), dw(k * n), spare(k * n), ubuf, sbuf;
        for (std::size_t c = 0; c < d; ++c)
          std::fill(x.begin() + c * n, x.begin() + (c + 1) * n, model.x0()[c]);
        if (options.drift_control) {
          ubuf.resize(k * n);
          sbuf.resize(d * n);
        }
        auto store = [&](std::size_t node) {
          if (!options.states) return;
          for (std::size_t c = 0; c < d; ++c)
            std::copy(x.begin() + c * n, x.begin() + (c + 1) * n,
                      options.states + (node * d + c) * total + begin);
        };
        store(0);
        std::vector<rng::CounterStream> streams;
        streams.reserve(n);
        for (std::size_t p = 0; p < n; ++p) streams.emplace_back(keys[begin + p]);

        for (std::size_t step = 0; step < grid.n_steps(); ++step) {
          for (std::size_t c = 0; c < k; ++c) {
            const std::uint64_t j = static_cast<std::uint64_t>(step) * k + c;
            double* row = dw.data() + c * n;
            double* save = spare.data() + c * n;
            if (j % 2 == 0) {
              for (std::size_t p = 0; p < n; ++p) {
                const auto [z0, z1] = streams[p].normal_pair(j / 2);
                row[p] = sq * z0;
                save[p] = z1;
              }
            } else {
              // The partner draw j-1 may belong to a different component row.
              const std::size_t prev = (c == 0) ? k - 1 : c - 1;
              const double* src = spare.data() + prev * n;
              for (std::size_t p = 0; p < n; ++p) row[p] = sq * src[p];
            }
          }
          if (options.on_step) options.on_step(StepContext{step, begin, n, x.data(), dw.data()});

          maps.drift(x.data(), drift.data(), n);
          if (options.drift_control) {
            for (std::size_t c = 0; c < k; ++c)
              std::fill(ubuf.begin() + c * n, ubuf.begin() + (c + 1) * n,
                        options.drift_control->values()(step, c));
            maps.diffusion_apply(x.data(), ubuf.data(), sbuf.data(), n);
            ker.axpy(drift.data(), 1.0, sbuf.data(), d * n);
          }
          maps.diffusion_apply(x.data(), dw.data(), noise.data(), n);
          ker.em_step(x.data(), drift.data(), noise.data(), dt, eps, d * n);
          for (double v : x)
            if (!std::isfinite(v)) throw NonFiniteState(step);
          store(step + 1);
        }
      },
      options.workers);
}

SimulatedPair simulate_pair(const ModelSpec& model, double eps, const TimeGrid& grid, std::uint64_t seed) {
  if (!(eps >= 0.0) || !std::isfinite(eps)) throw ValidationError("eps must be finite and >= 0");
  const std::size_t d = model.dim_d(), m = model.dim_m();
  Path signal = [&] {
    if (eps == 0.0) return integrate_flow(model, ControlPath::zero(grid, model.dim_k()));
    std::vector<double> states(grid.n_nodes() * d);
    const std::uint64_t key = signal_stream_key(seed);
    BatchOptions opts;
    opts.states = states.data();
    opts.workers = 1;
    simulate_signals(model, eps, grid, std::span<const std::uint64_t>(&key, 1), opts);
    RowMatrix v(grid.n_nodes(), d);
    for (std::size_t i = 0; i < grid.n_nodes(); ++i)
      for (std::size_t c = 0; c < d; ++c) v(i, c) = states[i * d + c];
    return Path(grid, std::move(v));
  }();

  const double dt = grid.dt(), sq = std::sqrt(dt);
  const std::uint64_t bkey = observation_stream_key(seed);
  RowMatrix y = RowMatrix::Zero(grid.n_nodes(), m);
  std::vector<double> z(m);
  for (std::size_t i = 0; i < grid.n_steps(); ++i) {
    const Vec h = model.observe(signal.node(i));
    if (eps > 0.0) stream_normals(bkey, i, m, z.data());
    for (std::size_t c = 0; c < m; ++c) {
      const double db = eps > 0.0 ? sq * z[c] : 0.0;
      y(i + 1, c) = (y(i, c) + dt * h[c]) + eps * db;
      if (!std::isfinite(y(i + 1, c))) throw NonFiniteState(i);
    }
  }
  return {std::move(signal), Path(grid, std::move(y))};
}

// --- Controlled flow -----------------------------------------------------------

namespace {

inline Vec flow_rhs(const ModelSpec& model, const Vec& x, const Vec& u) {
  return model.drift(x) + model.diffusion(x) * u;
}

void check_control(const ModelSpec& model, const ControlPath& control) {
  if (control.dim() != model.dim_k())
    throw ValidationError("control dimension " + std::to_string(control.dim()) +
                          " does not match k = " + std::to_string(model.dim_k()));
}

}  // namespace

Path integrate_flow(const ModelSpec& model, const ControlPath& control) {
  check_control(model, control);
  const TimeGrid& grid = control.grid();
  const double dt = grid.dt();
  RowMatrix v(grid.n_nodes(), model.dim_d());
  Vec x = model.x0();
  v.row(0) = x.transpose();
  for (std::size_t i = 0; i < grid.n_steps(); ++i) {
    const Vec u = control.step(i);
    const Vec k1 = flow_rhs(model, x, u);
    const Vec k2 = flow_rhs(model, x + 0.5 * dt * k1, u);
    const Vec k3 = flow_rhs(model, x + 0.5 * dt * k2, u);
    const Vec k4 = flow_rhs(model, x + dt * k3, u);
    x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!x.allFinite()) throw NonFiniteState(i);
    v.row(static_cast<Eigen::Index>(i + 1)) = x.transpose();
  }
  return Path(grid, std::move(v));
}

FlowLinearization linearize_flow(const ModelSpec& model, const ControlPath& control) {
  check_control(model, control);
  const TimeGrid& grid = control.grid();
  const double dt = grid.dt();
  const std::size_t d = model.dim_d();
  const Mat eye = Mat::Identity(d, d);

  RowMatrix v(grid.n_nodes(), d);
  std::vector<Mat> a_jac, b_jac;
  a_jac.reserve(grid.n_steps());
  b_jac.reserve(grid.n_steps());
  Vec x = model.x0();
  v.row(0) = x.transpose();

  auto fx = [&](const Vec& y, const Vec& u) -> Mat {
    return model.drift_jacobian(y) + model.diffusion_jacobian(y, u);
  };

  for (std::size_t i = 0; i < grid.n_steps(); ++i) {
    const Vec u = control.step(i);
    const Vec x1 = x;
    const Vec k1 = flow_rhs(model, x1, u);
    const Vec x2 = x + 0.5 * dt * k1;
    const Vec k2 = flow_rhs(model, x2, u);
    const Vec x3 = x + 0.5 * dt * k2;
    const Vec k3 = flow_rhs(model, x3, u);
    const Vec x4 = x + dt * k3;
    const Vec k4 = flow_rhs(model, x4, u);

    const Mat f1 = fx(x1, u), f2 = fx(x2, u), f3 = fx(x3, u), f4 = fx(x4, u);
    const Mat g1 = model.diffusion(x1), g2 = model.diffusion(x2), g3 = model.diffusion(x3),
              g4 = model.diffusion(x4);

    const Mat k1x = f1;
    const Mat k2x = f2 * (eye + 0.5 * dt * k1x);
    const Mat k3x = f3 * (eye + 0.5 * dt * k2x);
    const Mat k4x = f4 * (eye + dt * k3x);
    const Mat k1u = g1;
    const Mat k2u = f2 * (0.5 * dt * k1u) + g2;
    const Mat k3u = f3 * (0.5 * dt * k2u) + g3;
    const Mat k4u = f4 * (dt * k3u) + g4;

    a_jac.push_back(eye + (dt / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x));
    b_jac.push_back((dt / 6.0) * (k1u + 2.0 * k2u + 2.0 * k3u + k4u));

    x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!x.allFinite()) throw NonFiniteState(i);
    v.row(static_cast<Eigen::Index>(i + 1)) = x.transpose();
  }
  return {Path(grid, std::move(v)), std::move(a_jac), std::move(b_jac)};
}

RowMatrix flow_vjp(const FlowLinearization& lin, const RowMatrix& node_cotangent) {
  const TimeGrid& grid = lin.path.grid();
  const std::size_t n = grid.n_steps();
  if (static_cast<std::size_t>(node_cotangent.rows()) != grid.n_nodes())
    throw GridMismatch("flow_vjp: cotangent rows do not match grid nodes");
  const Eigen::Index k = lin.control_jac.empty() ? 0 : lin.control_jac.front().cols();
  RowMatrix grad(n, k);
  Vec lambda = node_cotangent.row(static_cast<Eigen::Index>(n)).transpose();
  for (std::size_t i = n; i-- > 0;) {
    grad.row(static_cast<Eigen::Index>(i)) = (lin.control_jac[i].transpose() * lambda).transpose();
    lambda = node_cotangent.row(static_cast<Eigen::Index>(i)).transpose() +
             lin.state_jac[i].transpose() * lambda;
  }
  return grad;
}

// --- CSV -------------------------------------------------------------------------

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_csv(std::ostream& os, const Path& path, const std::string& prefix) {
  os << "t";
  for (std::size_t c = 0; c < path.dim(); ++c) os << ',' << prefix << c;
  os << '\n';
  for (std::size_t i = 0; i < path.grid().n_nodes(); ++i) {
    os << format_double(path.grid().time(i));
    for (std::size_t c = 0; c < path.dim(); ++c)
      os << ',' << format_double(path.values()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)));
    os << '\n';
  }
}

}  // namespace mortensen
