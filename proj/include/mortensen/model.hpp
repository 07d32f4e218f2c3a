#pragma once

// Filtering models: drift b, diffusion sigma and observation map h, plus
// the deterministic initial state and the horizon. A compiled-in catalog
// provides the models used by the experiments; `Catalog::register_entry`
// accepts user-defined maps.

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mortensen {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Pointwise maps. The Jacobians are optional; missing ones fall back to
/// central finite differences with step 1e-5.
struct ModelMaps {
  std::function<Vec(const Vec&)> drift;      // R^d -> R^d
  std::function<Mat(const Vec&)> diffusion;  // R^d -> R^{d x k}
  std::function<Vec(const Vec&)> observe;    // R^d -> R^m
  std::function<Mat(const Vec&)> drift_jacobian;                 // d x d
  std::function<Mat(const Vec&, const Vec&)> diffusion_jacobian;  // d/dx [sigma(x) u], d x d
  std::function<Mat(const Vec&)> observe_jacobian;               // m x d
};

/// Structure-of-arrays evaluation over n particles. Inputs and outputs are
/// component-major: x[c * n + p] is component c of particle p.
struct BatchMaps {
  std::function<void(const double* x, double* out, std::size_t n)> drift;  // out: d x n
  /// out = sigma(x) * v for per-particle v (k x n); out: d x n
  std::function<void(const double* x, const double* v, double* out, std::size_t n)> diffusion_apply;
  std::function<void(const double* x, double* out, std::size_t n)> observe;  // out: m x n
};

/// b(x) = a x, sigma = s, h(x) = c x in one dimension.
struct LinearGaussian {
  double a = 0.0;
  double s = 0.0;
  double c = 0.0;
};

struct ModelDefinition {
  std::string name;
  std::size_t dim_d = 1;
  std::size_t dim_k = 1;
  std::size_t dim_m = 1;
  Vec x0;
  double horizon = 1.0;
  ModelMaps maps;
  std::optional<BatchMaps> batch;  // generic loop over `maps` when absent
  double c_lip = 0.0;              // declared Lipschitz bound
  double c_sigma = 0.0;            // declared sup of ||sigma||_F
  /// Radius of the box around the origin on which c_lip is claimed
  /// (infinity for globally Lipschitz maps).
  double lipschitz_radius = std::numeric_limits<double>::infinity();
  std::optional<LinearGaussian> linear_gaussian;
  std::map<std::string, double> params;  // resolved catalog parameters
};

/// Immutable model. Copies share the underlying maps.
class ModelSpec {
 public:
  /// Throws ValidationError when the maps are missing or return values of
  /// the wrong shape or non-finite values at x0.
  explicit ModelSpec(ModelDefinition def);

  [[nodiscard]] const std::string& name() const noexcept { return def_->name; }
  [[nodiscard]] std::size_t dim_d() const noexcept { return def_->dim_d; }
  [[nodiscard]] std::size_t dim_k() const noexcept { return def_->dim_k; }
  [[nodiscard]] std::size_t dim_m() const noexcept { return def_->dim_m; }
  [[nodiscard]] const Vec& x0() const noexcept { return def_->x0; }
  [[nodiscard]] double horizon() const noexcept { return def_->horizon; }
  [[nodiscard]] double c_lip() const noexcept { return def_->c_lip; }
  [[nodiscard]] double c_sigma() const noexcept { return def_->c_sigma; }
  [[nodiscard]] double lipschitz_radius() const noexcept { return def_->lipschitz_radius; }
  [[nodiscard]] const std::optional<LinearGaussian>& linear_gaussian() const noexcept {
    return def_->linear_gaussian;
  }
  [[nodiscard]] const std::map<std::string, double>& params() const noexcept { return def_->params; }

  [[nodiscard]] Vec drift(const Vec& x) const { return def_->maps.drift(x); }
  [[nodiscard]] Mat diffusion(const Vec& x) const { return def_->maps.diffusion(x); }
  [[nodiscard]] Vec observe(const Vec& x) const { return def_->maps.observe(x); }

  [[nodiscard]] Mat drift_jacobian(const Vec& x) const;
  [[nodiscard]] Mat diffusion_jacobian(const Vec& x, const Vec& u) const;
  [[nodiscard]] Mat observe_jacobian(const Vec& x) const;

  [[nodiscard]] const BatchMaps& batch() const noexcept { return batch_; }

  /// Same model with a different initial state and/or horizon.
  [[nodiscard]] ModelSpec with_initial(const Vec& x0, double horizon) const;

 private:
  std::shared_ptr<const ModelDefinition> def_;
  BatchMaps batch_;
};

inline constexpr double kJacobianStep = 1e-5;

// --- Catalog ---------------------------------------------------------------

using ParamMap = std::map<std::string, double>;

struct ParamSpec {
  std::string name;
  double lo;
  double hi;
  double default_value;
  bool lo_open = false;  // lo excluded from the admissible range
};

struct CatalogEntry {
  std::string name;
  std::string description;
  std::vector<ParamSpec> schema;
  std::function<ModelSpec(const ParamMap&)> builder;  // receives resolved params
};

class Catalog {
 public:
  /// Process-wide catalog pre-populated with the built-in models.
  static Catalog& global();

  /// Adds or replaces an entry.
  void register_entry(CatalogEntry entry);

  [[nodiscard]] const CatalogEntry& find(std::string_view name) const;  // UnknownModel
  [[nodiscard]] bool contains(std::string_view name) const;
  [[nodiscard]] std::vector<std::string> names() const;

  /// Fills defaults, rejects unknown names and out-of-range values.
  [[nodiscard]] ParamMap resolve(std::string_view name, const ParamMap& params) const;

 private:
  std::map<std::string, CatalogEntry, std::less<>> entries_;
};

/// Builds a catalog model. Errors: UnknownModel, ParamOutOfRange.
ModelSpec build_model(std::string_view name, const ParamMap& params = {});

// --- Validation --------------------------------------------------------------

struct ValidationReport {
  double lipschitz_drift = 0.0;
  double lipschitz_diffusion = 0.0;
  double lipschitz_observe = 0.0;
  double max_diffusion_norm = 0.0;
  std::size_t n_samples = 0;
  double box_radius = 0.0;
  std::vector<std::string> violations;

  [[nodiscard]] bool ok() const noexcept { return violations.empty(); }
};

/// Samples n_samples points uniformly in [-box_radius, box_radius]^d and
/// estimates Lipschitz ratios of b, sigma, h over all sample pairs plus one
/// close neighbour per sample. Flags ratios above 1.01 * c_lip and sampled
/// ||sigma||_F above c_sigma.
ValidationReport validate_model(const ModelSpec& model, std::size_t n_samples, double box_radius,
                                std::uint64_t seed);

}  // namespace mortensen
