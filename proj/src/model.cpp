#include "mortensen/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mortensen/error.hpp"
#include "mortensen/rng.hpp"

namespace mortensen {
namespace {

bool all_finite(const Mat& m) { return m.allFinite(); }

BatchMaps generic_batch(std::shared_ptr<const ModelDefinition> def) {
  BatchMaps b;
  b.drift = [def](const double* x, double* out, std::size_t n) {
    const std::size_t d = def->dim_d;
    Vec xp(d);
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t c = 0; c < d; ++c) xp[c] = x[c * n + p];
      const Vec f = def->maps.drift(xp);
      for (std::size_t c = 0; c < d; ++c) out[c * n + p] = f[c];
    }
  };
  b.diffusion_apply = [def](const double* x, const double* v, double* out, std::size_t n) {
    const std::size_t d = def->dim_d, k = def->dim_k;
    Vec xp(d), vp(k);
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t c = 0; c < d; ++c) xp[c] = x[c * n + p];
      for (std::size_t c = 0; c < k; ++c) vp[c] = v[c * n + p];
      const Vec f = def->maps.diffusion(xp) * vp;
      for (std::size_t c = 0; c < d; ++c) out[c * n + p] = f[c];
    }
  };
  b.observe = [def](const double* x, double* out, std::size_t n) {
    const std::size_t d = def->dim_d, m = def->dim_m;
    Vec xp(d);
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t c = 0; c < d; ++c) xp[c] = x[c * n + p];
      const Vec f = def->maps.observe(xp);
      for (std::size_t c = 0; c < m; ++c) out[c * n + p] = f[c];
    }
  };
  return b;
}

template <class F>
Mat central_difference(const F& f, const Vec& x, std::size_t rows) {
  Mat jac(rows, x.size());
  Vec xp = x, xm = x;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    xp[j] = x[j] + kJacobianStep;
    xm[j] = x[j] - kJacobianStep;
    jac.col(j) = (f(xp) - f(xm)) / (2.0 * kJacobianStep);
    xp[j] = xm[j] = x[j];
  }
  return jac;
}

}  // namespace

ModelSpec::ModelSpec(ModelDefinition def) {
  if (!def.maps.drift || !def.maps.diffusion || !def.maps.observe)
    throw ValidationError("model '" + def.name + "': drift, diffusion and observe maps are required");
  if (def.dim_d == 0 || def.dim_k == 0 || def.dim_m == 0)
    throw ValidationError("model '" + def.name + "': dimensions must be positive");
  if (static_cast<std::size_t>(def.x0.size()) != def.dim_d || !def.x0.allFinite())
    throw ValidationError("model '" + def.name + "': x0 must be a finite vector of length d");
  if (!(def.horizon > 0.0) || !std::isfinite(def.horizon))
    throw ValidationError("model '" + def.name + "': horizon must be positive and finite");

  const Vec b = def.maps.drift(def.x0);
  const Mat s = def.maps.diffusion(def.x0);
  const Vec h = def.maps.observe(def.x0);
  if (static_cast<std::size_t>(b.size()) != def.dim_d || !b.allFinite())
    throw ValidationError("model '" + def.name + "': drift at x0 must be finite with d entries");
  if (static_cast<std::size_t>(s.rows()) != def.dim_d ||
      static_cast<std::size_t>(s.cols()) != def.dim_k || !all_finite(s))
    throw ValidationError("model '" + def.name + "': diffusion at x0 must be a finite d x k matrix");
  if (static_cast<std::size_t>(h.size()) != def.dim_m || !h.allFinite())
    throw ValidationError("model '" + def.name + "': observation at x0 must be finite with m entries");

  auto shared = std::make_shared<const ModelDefinition>(std::move(def));
  batch_ = shared->batch ? *shared->batch : generic_batch(shared);
  def_ = std::move(shared);
}

Mat ModelSpec::drift_jacobian(const Vec& x) const {
  if (def_->maps.drift_jacobian) return def_->maps.drift_jacobian(x);
  return central_difference([this](const Vec& y) { return drift(y); }, x, dim_d());
}

Mat ModelSpec::diffusion_jacobian(const Vec& x, const Vec& u) const {
  if (def_->maps.diffusion_jacobian) return def_->maps.diffusion_jacobian(x, u);
  return central_difference([this, &u](const Vec& y) -> Vec { return diffusion(y) * u; }, x, dim_d());
}

Mat ModelSpec::observe_jacobian(const Vec& x) const {
  if (def_->maps.observe_jacobian) return def_->maps.observe_jacobian(x);
  return central_difference([this](const Vec& y) { return observe(y); }, x, dim_m());
}

ModelSpec ModelSpec::with_initial(const Vec& x0, double horizon) const {
  ModelDefinition def = *def_;
  def.x0 = x0;
  def.horizon = horizon;
  def.params["x0"] = x0.size() == 1 ? x0[0] : def.params["x0"];
  def.params["T"] = horizon;
  return ModelSpec(std::move(def));
}

// --- Catalog ---------------------------------------------------------------

namespace {

ModelDefinition scalar_definition(std::string name, const ParamMap& p) {
  ModelDefinition def;
  def.name = std::move(name);
  def.dim_d = def.dim_k = def.dim_m = 1;
  def.x0 = Vec::Constant(1, p.at("x0"));
  def.horizon = p.at("T");
  def.params = p;
  return def;
}

ModelSpec build_linear1d(const ParamMap& p) {
  const double a = p.at("a"), s = p.at("s"), c = p.at("c");
  ModelDefinition def = scalar_definition("linear1d", p);
  def.maps.drift = [a](const Vec& x) -> Vec { return Vec::Constant(1, a * x[0]); };
  def.maps.diffusion = [s](const Vec&) -> Mat { return Mat::Constant(1, 1, s); };
  def.maps.observe = [c](const Vec& x) -> Vec { return Vec::Constant(1, c * x[0]); };
  def.maps.drift_jacobian = [a](const Vec&) -> Mat { return Mat::Constant(1, 1, a); };
  def.maps.diffusion_jacobian = [](const Vec&, const Vec&) -> Mat { return Mat::Zero(1, 1); };
  def.maps.observe_jacobian = [c](const Vec&) -> Mat { return Mat::Constant(1, 1, c); };
  BatchMaps batch;
  batch.drift = [a](const double* x, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a * x[i];
  };
  batch.diffusion_apply = [s](const double*, const double* v, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = s * v[i];
  };
  batch.observe = [c](const double* x, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = c * x[i];
  };
  def.batch = std::move(batch);
  def.c_lip = std::abs(a) + std::abs(c);
  def.c_sigma = std::abs(s);
  def.linear_gaussian = LinearGaussian{a, s, c};
  return ModelSpec(std::move(def));
}

ModelSpec build_ou_nlobs(const ParamMap& p) {
  const double a = p.at("a"), s = p.at("s"), c = p.at("c");
  ModelDefinition def = scalar_definition("ou_nlobs", p);
  def.maps.drift = [a](const Vec& x) -> Vec { return Vec::Constant(1, -a * x[0]); };
  def.maps.diffusion = [s](const Vec&) -> Mat { return Mat::Constant(1, 1, s); };
  def.maps.observe = [c](const Vec& x) -> Vec { return Vec::Constant(1, std::sin(c * x[0])); };
  def.maps.drift_jacobian = [a](const Vec&) -> Mat { return Mat::Constant(1, 1, -a); };
  def.maps.diffusion_jacobian = [](const Vec&, const Vec&) -> Mat { return Mat::Zero(1, 1); };
  def.maps.observe_jacobian = [c](const Vec& x) -> Mat {
    return Mat::Constant(1, 1, c * std::cos(c * x[0]));
  };
  BatchMaps batch;
  batch.drift = [a](const double* x, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = -a * x[i];
  };
  batch.diffusion_apply = [s](const double*, const double* v, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = s * v[i];
  };
  batch.observe = [c](const double* x, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = std::sin(c * x[i]);
  };
  def.batch = std::move(batch);
  def.c_lip = std::abs(a) + std::abs(c);
  def.c_sigma = std::abs(s);
  return ModelSpec(std::move(def));
}

// Drift x - x^3 is only locally Lipschitz; c_lip is claimed on |x| <= 3.
constexpr double kDoublewellRadius = 3.0;

ModelSpec build_doublewell(const ParamMap& p) {
  const double s = p.at("s");
  ModelDefinition def = scalar_definition("doublewell", p);
  def.maps.drift = [](const Vec& x) -> Vec { return Vec::Constant(1, x[0] - x[0] * x[0] * x[0]); };
  def.maps.diffusion = [s](const Vec&) -> Mat { return Mat::Constant(1, 1, s); };
  def.maps.observe = [](const Vec& x) -> Vec { return x; };
  def.maps.drift_jacobian = [](const Vec& x) -> Mat {
    return Mat::Constant(1, 1, 1.0 - 3.0 * x[0] * x[0]);
  };
  def.maps.diffusion_jacobian = [](const Vec&, const Vec&) -> Mat { return Mat::Zero(1, 1); };
  def.maps.observe_jacobian = [](const Vec&) -> Mat { return Mat::Identity(1, 1); };
  BatchMaps batch;
  batch.drift = [](const double* x, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - x[i] * x[i] * x[i];
  };
  batch.diffusion_apply = [s](const double*, const double* v, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = s * v[i];
  };
  batch.observe = [](const double* x, double* out, std::size_t n) {
    std::copy(x, x + n, out);
  };
  def.batch = std::move(batch);
  def.c_lip = (3.0 * kDoublewellRadius * kDoublewellRadius - 1.0) + 1.0;
  def.c_sigma = std::abs(s);
  def.lipschitz_radius = kDoublewellRadius;
  return ModelSpec(std::move(def));
}

std::vector<ParamSpec> common_schema() {
  return {{"x0", -100.0, 100.0, 1.0}, {"T", 0.0, 100.0, 1.0, true}};
}

Catalog make_builtin_catalog() {
  Catalog cat;
  auto schema = [](std::vector<ParamSpec> own) {
    for (auto& p : common_schema()) own.push_back(p);
    return own;
  };
  cat.register_entry({"linear1d", "b(x) = a x, sigma = s, h(x) = c x",
                      schema({{"a", -10.0, 10.0, -1.0}, {"s", 0.0, 10.0, 1.0}, {"c", -10.0, 10.0, 1.0}}),
                      build_linear1d});
  cat.register_entry({"ou_nlobs", "b(x) = -a x, sigma = s, h(x) = sin(c x)",
                      schema({{"a", -10.0, 10.0, 1.0}, {"s", 0.0, 10.0, 1.0}, {"c", -10.0, 10.0, 1.0}}),
                      build_ou_nlobs});
  auto dw = schema({{"s", 0.0, 10.0, 0.5}});
  for (auto& p : dw)
    if (p.name == "x0") p = {"x0", -kDoublewellRadius, kDoublewellRadius, -1.0};
  cat.register_entry({"doublewell", "b(x) = x - x^3, sigma = s, h(x) = x", std::move(dw), build_doublewell});
  return cat;
}

std::string format_range(const ParamSpec& p) {
  std::ostringstream os;
  os.precision(17);
  os << (p.lo_open ? "(" : "[") << p.lo << ", " << p.hi << "]";
  return os.str();
}

}  // namespace

Catalog& Catalog::global() {
  static Catalog catalog = make_builtin_catalog();
  return catalog;
}

void Catalog::register_entry(CatalogEntry entry) {
  const std::string key = entry.name;
  entries_.insert_or_assign(key, std::move(entry));
}

const CatalogEntry& Catalog::find(std::string_view name) const {
  const auto it = entries_.find(name);
  if (it == entries_.end()) throw UnknownModel(std::string(name));
  return it->second;
}

bool Catalog::contains(std::string_view name) const { return entries_.find(name) != entries_.end(); }

std::vector<std::string> Catalog::names() const {
  std::vector<std::string> out;
  for (const auto& [name, entry] : entries_) out.push_back(name);
  return out;
}

ParamMap Catalog::resolve(std::string_view name, const ParamMap& params) const {
  const CatalogEntry& entry = find(name);
  ParamMap resolved;
  for (const auto& spec : entry.schema) resolved[spec.name] = spec.default_value;
  for (const auto& [key, value] : params) {
    const auto spec = std::find_if(entry.schema.begin(), entry.schema.end(),
                                   [&](const ParamSpec& s) { return s.name == key; });
    if (spec == entry.schema.end())
      throw ParamOutOfRange(key, "is not a parameter of model '" + entry.name + "'");
    const bool below = spec->lo_open ? !(value > spec->lo) : !(value >= spec->lo);
    if (below || !(value <= spec->hi))
      throw ParamOutOfRange(key, "outside admissible range " + format_range(*spec));
    resolved[key] = value;
  }
  return resolved;
}

ModelSpec build_model(std::string_view name, const ParamMap& params) {
  const Catalog& cat = Catalog::global();
  const ParamMap resolved = cat.resolve(name, params);
  return cat.find(name).builder(resolved);
}

// --- Validation --------------------------------------------------------------

ValidationReport validate_model(const ModelSpec& model, std::size_t n_samples, double box_radius,
                                std::uint64_t seed) {
  if (n_samples < 2) throw ValidationError("validate_model needs at least 2 samples");
  if (!(box_radius > 0.0)) throw ValidationError("validate_model needs a positive box radius");

  const std::size_t d = model.dim_d();
  const rng::CounterStream stream(seed, 0x76616c6964ull);
  std::uint64_t counter = 0;
  auto uniform = [&] {
    const auto [u, v] = stream.uniform_pair(counter++);
    (void)v;
    return u;
  };

  std::vector<Vec> points(n_samples, Vec(d));
  for (auto& x : points)
    for (std::size_t c = 0; c < d; ++c) x[c] = box_radius * (2.0 * uniform() - 1.0);

  struct Sample {
    Vec b;
    Mat s;
    Vec h;
  };
  auto eval = [&](const Vec& x) { return Sample{model.drift(x), model.diffusion(x), model.observe(x)}; };

  ValidationReport report;
  report.n_samples = n_samples;
  report.box_radius = box_radius;

  std::vector<Sample> values;
  values.reserve(n_samples);
  for (const auto& x : points) {
    values.push_back(eval(x));
    report.max_diffusion_norm = std::max(report.max_diffusion_norm, values.back().s.norm());
  }

  auto update = [&](const Vec& x, const Sample& fx, const Vec& y, const Sample& fy) {
    const double dist = (x - y).norm();
    if (!(dist > 0.0)) return;
    report.lipschitz_drift = std::max(report.lipschitz_drift, (fx.b - fy.b).norm() / dist);
    report.lipschitz_diffusion = std::max(report.lipschitz_diffusion, (fx.s - fy.s).norm() / dist);
    report.lipschitz_observe = std::max(report.lipschitz_observe, (fx.h - fy.h).norm() / dist);
  };

  for (std::size_t i = 0; i < n_samples; ++i)
    for (std::size_t j = i + 1; j < n_samples; ++j) update(points[i], values[i], points[j], values[j]);

  const double delta = 1e-4 * box_radius;
  for (std::size_t i = 0; i < n_samples; ++i) {
    Vec dir(d);
    for (std::size_t c = 0; c < d; ++c) dir[c] = 2.0 * uniform() - 1.0;
    if (dir.norm() == 0.0) dir[0] = 1.0;
    const Vec y = points[i] + delta * dir.normalized();
    update(points[i], values[i], y, eval(y));
  }

  auto flag_lip = [&](const char* map, double est) {
    if (est > 1.01 * model.c_lip()) {
      std::ostringstream os;
      os.precision(6);
      os << "Lipschitz estimate of " << map << " (" << est << ") exceeds declared c_lip ("
         << model.c_lip() << ")";
      if (box_radius > model.lipschitz_radius())
        os << "; box radius exceeds the declared validity radius " << model.lipschitz_radius();
      report.violations.push_back(os.str());
    }
  };
  flag_lip("b", report.lipschitz_drift);
  flag_lip("sigma", report.lipschitz_diffusion);
  flag_lip("h", report.lipschitz_observe);
  if (report.max_diffusion_norm > model.c_sigma() * (1.0 + 1e-12)) {
    std::ostringstream os;
    os.precision(6);
    os << "sampled ||sigma|| (" << report.max_diffusion_norm << ") exceeds declared c_sigma ("
       << model.c_sigma() << ")";
    report.violations.push_back(os.str());
  }
  return report;
}

}  // namespace mortensen
