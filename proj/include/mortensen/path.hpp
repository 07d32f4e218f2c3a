#pragma once

// Time grids, sampled paths, piecewise-constant controls and the two
// integrators: Euler-Maruyama for the signal/observation SDE pair and RK4 for
// the controlled deterministic flow (with its discrete adjoint).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mortensen/model.hpp"

namespace mortensen {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class TimeGrid {
 public:
  TimeGrid(std::size_t n_steps, double horizon);

  [[nodiscard]] std::size_t n_steps() const noexcept { return n_steps_; }
  [[nodiscard]] std::size_t n_nodes() const noexcept { return n_steps_ + 1; }
  [[nodiscard]] double horizon() const noexcept { return horizon_; }
  [[nodiscard]] double dt() const noexcept { return horizon_ / static_cast<double>(n_steps_); }
  [[nodiscard]] double time(std::size_t node) const noexcept {
    return horizon_ * static_cast<double>(node) / static_cast<double>(n_steps_);
  }

  friend bool operator==(const TimeGrid&, const TimeGrid&) = default;

 private:
  std::size_t n_steps_;
  double horizon_;
};

/// Throws GridMismatch naming `what` when the grids differ.
void require_same_grid(const TimeGrid& a, const TimeGrid& b, const char* what);

/// Read-only strided view of one trajectory: value(node, component).
class PathView {
 public:
  PathView(const double* data, std::size_t n_nodes, std::size_t dim, std::size_t node_stride,
           std::size_t comp_stride, const TimeGrid& grid)
      : data_(data), n_nodes_(n_nodes), dim_(dim), node_stride_(node_stride),
        comp_stride_(comp_stride), grid_(&grid) {}

  [[nodiscard]] double operator()(std::size_t node, std::size_t comp) const noexcept {
    return data_[node * node_stride_ + comp * comp_stride_];
  }
  [[nodiscard]] Vec node(std::size_t i) const;
  [[nodiscard]] std::size_t n_nodes() const noexcept { return n_nodes_; }
  [[nodiscard]] std::size_t dim() const noexcept { return dim_; }
  [[nodiscard]] const TimeGrid& grid() const noexcept { return *grid_; }

 private:
  const double* data_;
  std::size_t n_nodes_, dim_, node_stride_, comp_stride_;
  const TimeGrid* grid_;
};

/// Trajectory on a grid; values has n_nodes rows and dim columns.
class Path {
 public:
  Path(TimeGrid grid, RowMatrix values);
  static Path constant(const TimeGrid& grid, const Vec& value);

  [[nodiscard]] const TimeGrid& grid() const noexcept { return grid_; }
  [[nodiscard]] const RowMatrix& values() const noexcept { return values_; }
  [[nodiscard]] std::size_t dim() const noexcept { return static_cast<std::size_t>(values_.cols()); }
  [[nodiscard]] Vec node(std::size_t i) const { return values_.row(static_cast<Eigen::Index>(i)).transpose(); }
  [[nodiscard]] Vec terminal() const { return node(grid_.n_steps()); }
  [[nodiscard]] PathView view() const;

 private:
  TimeGrid grid_;
  RowMatrix values_;
};

/// Piecewise-constant control: row i is the value on [t_i, t_{i+1}).
class ControlPath {
 public:
  ControlPath(TimeGrid grid, RowMatrix values);
  static ControlPath zero(const TimeGrid& grid, std::size_t dim);
  static ControlPath constant(const TimeGrid& grid, const Vec& value);

  [[nodiscard]] const TimeGrid& grid() const noexcept { return grid_; }
  [[nodiscard]] const RowMatrix& values() const noexcept { return values_; }
  [[nodiscard]] std::size_t dim() const noexcept { return static_cast<std::size_t>(values_.cols()); }
  [[nodiscard]] Vec step(std::size_t i) const { return values_.row(static_cast<Eigen::Index>(i)).transpose(); }

  /// sum_i ||values_i||^2 dt
  [[nodiscard]] double squared_l2_norm() const;

 private:
  TimeGrid grid_;
  RowMatrix values_;
};

/// Brownian increments of W (k-dim) and B (m-dim) on a grid.
struct NoiseDraw {
  TimeGrid grid;
  RowMatrix increments_w;  // n_steps x k
  RowMatrix increments_b;  // n_steps x m
  std::uint64_t seed;

  /// Streams (seed, 0) and (seed, 1) of the counter-based generator.
  static NoiseDraw generate(const TimeGrid& grid, std::size_t k, std::size_t m, std::uint64_t seed);
};

/// Stream key of the W increments used by `simulate_pair(…, seed)`.
std::uint64_t signal_stream_key(std::uint64_t seed);
std::uint64_t observation_stream_key(std::uint64_t seed);

/// Seed of replicate/particle `index` under a parent seed.
std::uint64_t child_seed(std::uint64_t seed, std::uint64_t index);

/// Standard normals for step `step` of a stream: draw j = step * dim + c of
/// the stream uses counter j / 2, half j % 2.
void stream_normals(std::uint64_t key, std::size_t step, std::size_t dim, double* out);

// --- Euler-Maruyama ----------------------------------------------------------

struct StepContext {
  std::size_t step;            // update from node `step` to `step + 1`
  std::size_t first_particle;  // global index of particle 0 of this chunk
  std::size_t n;               // particles in this chunk
  const double* x;             // state at node `step`, d x n
  const double* dw;            // raw increments used for this step, k x n
};

struct BatchOptions {
  /// Adds sigma(x) u_i to the drift on step i (reference-measure tilt).
  const ControlPath* drift_control = nullptr;
  /// Storage for every node: states[(node * d + c) * n_total + p]. May be null.
  double* states = nullptr;
  /// Called once per chunk and step before the update. Chunks own disjoint
  /// particle ranges, so writes indexed by particle are race free.
  std::function<void(const StepContext&)> on_step;
  std::size_t workers = 0;
};

/// Simulates one signal path per key: X_{i+1} = X_i + (b(X_i) + sigma(X_i) u_i) dt
/// + eps sigma(X_i) dW_i, with dW from `stream_normals(key, i, k)` times sqrt(dt).
/// Throws NonFiniteState with the offending step.
void simulate_signals(const ModelSpec& model, double eps, const TimeGrid& grid,
                      std::span<const std::uint64_t> keys, const BatchOptions& options);

struct SimulatedPair {
  Path signal;
  Path observation;
};

/// Signal X^eps and observation Y^eps(t) = int_0^t h(X) ds + eps B(t)
/// (left-endpoint sum). eps = 0 integrates the noiseless flow.
SimulatedPair simulate_pair(const ModelSpec& model, double eps, const TimeGrid& grid, std::uint64_t seed);

// --- Controlled flow -----------------------------------------------------------

/// RK4 on x' = b(x) + sigma(x) u(t), u constant per step.
Path integrate_flow(const ModelSpec& model, const ControlPath& control);

/// Flow plus per-step Jacobians x_{i+1} = Phi_i(x_i, u_i):
/// state_jac[i] = dPhi_i/dx (d x d), control_jac[i] = dPhi_i/du (d x k).
struct FlowLinearization {
  Path path;
  std::vector<Mat> state_jac;
  std::vector<Mat> control_jac;
};

FlowLinearization linearize_flow(const ModelSpec& model, const ControlPath& control);

/// Vector-Jacobian product of the flow: given dF/dx at every node
/// (n_nodes x d), returns dF/du_i for every step (n_steps x k).
RowMatrix flow_vjp(const FlowLinearization& lin, const RowMatrix& node_cotangent);

// --- CSV -------------------------------------------------------------------------

/// Header `t,<prefix>0,<prefix>1,...`, one row per node, 17 significant digits.
void write_csv(std::ostream& os, const Path& path, const std::string& prefix = "x");
std::string format_double(double v);

}  // namespace mortensen
