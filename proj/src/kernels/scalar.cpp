#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>

#include "exp_constants.hpp"
#include "mortensen/kernels.hpp"

namespace mortensen::simd {
namespace {

using namespace detail;

// 2^k for integral k in [-1022, 1023], built from the exponent field.
inline double pow2_exact(double k) {
  const std::uint64_t bits = std::bit_cast<std::uint64_t>((k + 1023.0) + kMantissaShift);
  return std::bit_cast<double>(bits << 52);
}

void em_step(double* x, const double* drift, const double* noise, double dt, double eps,
             std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = (x[i] + dt * drift[i]) + eps * noise[i];
}

void loglik_step(double* acc, const double* h, double dy, double dt, std::size_t n) {
  const double half_dt = 0.5 * dt;
  for (std::size_t i = 0; i < n; ++i) {
    const double hi = h[i];
    acc[i] = acc[i] + (hi * dy - (half_dt * hi) * hi);
  }
}

void axpy(double* y, double alpha, const double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

void exp_shifted(const double* x, double shift, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = exp_reference(x[i] - shift);
}

double block_sum(const double* x, std::size_t n) {
  double a[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) a[j] = a[j] + x[i + j];
  const double t0 = a[0] + a[4], t1 = a[1] + a[5], t2 = a[2] + a[6], t3 = a[3] + a[7];
  double r = (t0 + t2) + (t1 + t3);
  for (; i < n; ++i) r = r + x[i];
  return r;
}

double max_value(const double* x, std::size_t n) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) m = x[i] > m ? x[i] : m;
  return m;
}

void multiply(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

}  // namespace

double exp_reference(double x) {
  if (x > kExpMax) return std::numeric_limits<double>::infinity();
  if (x < kExpMin) return 0.0;
  if (std::isnan(x)) return x;
  const double fx = std::nearbyint(x * kLog2e);
  double r = x - fx * kLn2Hi;
  r = r - fx * kLn2Lo;
  const double rr = r * r;
  const double px = r * ((kExpP0 * rr + kExpP1) * rr + kExpP2);
  const double qx = ((kExpQ0 * rr + kExpQ1) * rr + kExpQ2) * rr + kExpQ3;
  double e = px / (qx - px);
  e = 1.0 + 2.0 * e;
  const double n1 = std::floor(fx * 0.5);
  const double n2 = fx - n1;
  return (e * pow2_exact(n1)) * pow2_exact(n2);
}

const KernelTable& scalar_kernels() {
  static const KernelTable table{Isa::scalar, "scalar", em_step,   loglik_step, axpy,
                                 exp_shifted, block_sum, max_value, multiply};
  return table;
}

}  // namespace mortensen::simd
