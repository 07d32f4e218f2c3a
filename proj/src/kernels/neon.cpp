// Two-lane float64 NEON variant. Uses separate vmulq/vaddq (never vfmaq) so
// each lane matches the scalar reference bit for bit.

#include "mortensen/kernels.hpp"

#if defined(MORTENSEN_HAVE_NEON)

#include <arm_neon.h>

#include <limits>

#include "exp_constants.hpp"

namespace mortensen::simd {
namespace {

using namespace detail;

inline float64x2_t pow2_exact(float64x2_t k) {
  const float64x2_t biased = vaddq_f64(vaddq_f64(k, vdupq_n_f64(1023.0)), vdupq_n_f64(kMantissaShift));
  return vreinterpretq_f64_u64(vshlq_n_u64(vreinterpretq_u64_f64(biased), 52));
}

inline float64x2_t exp2lanes(float64x2_t x) {
  const float64x2_t fx = vrndnq_f64(vmulq_f64(x, vdupq_n_f64(kLog2e)));
  float64x2_t r = vsubq_f64(x, vmulq_f64(fx, vdupq_n_f64(kLn2Hi)));
  r = vsubq_f64(r, vmulq_f64(fx, vdupq_n_f64(kLn2Lo)));
  const float64x2_t rr = vmulq_f64(r, r);
  float64x2_t p = vaddq_f64(vmulq_f64(vdupq_n_f64(kExpP0), rr), vdupq_n_f64(kExpP1));
  p = vaddq_f64(vmulq_f64(p, rr), vdupq_n_f64(kExpP2));
  const float64x2_t px = vmulq_f64(r, p);
  float64x2_t q = vaddq_f64(vmulq_f64(vdupq_n_f64(kExpQ0), rr), vdupq_n_f64(kExpQ1));
  q = vaddq_f64(vmulq_f64(q, rr), vdupq_n_f64(kExpQ2));
  q = vaddq_f64(vmulq_f64(q, rr), vdupq_n_f64(kExpQ3));
  float64x2_t e = vdivq_f64(px, vsubq_f64(q, px));
  e = vaddq_f64(vdupq_n_f64(1.0), vmulq_f64(vdupq_n_f64(2.0), e));
  const float64x2_t n1 = vrndmq_f64(vmulq_f64(fx, vdupq_n_f64(0.5)));
  const float64x2_t n2 = vsubq_f64(fx, n1);
  float64x2_t y = vmulq_f64(vmulq_f64(e, pow2_exact(n1)), pow2_exact(n2));
  const uint64x2_t too_big = vcgtq_f64(x, vdupq_n_f64(kExpMax));
  const uint64x2_t too_small = vcltq_f64(x, vdupq_n_f64(kExpMin));
  y = vbslq_f64(too_big, vdupq_n_f64(std::numeric_limits<double>::infinity()), y);
  y = vbslq_f64(too_small, vdupq_n_f64(0.0), y);
  return y;
}

void em_step(double* x, const double* drift, const double* noise, double dt, double eps,
             std::size_t n) {
  const float64x2_t vdt = vdupq_n_f64(dt);
  const float64x2_t veps = vdupq_n_f64(eps);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    float64x2_t v = vaddq_f64(vld1q_f64(x + i), vmulq_f64(vdt, vld1q_f64(drift + i)));
    v = vaddq_f64(v, vmulq_f64(veps, vld1q_f64(noise + i)));
    vst1q_f64(x + i, v);
  }
  scalar_kernels().em_step(x + i, drift + i, noise + i, dt, eps, n - i);
}

void loglik_step(double* acc, const double* h, double dy, double dt, std::size_t n) {
  const float64x2_t vdy = vdupq_n_f64(dy);
  const float64x2_t vhalf = vdupq_n_f64(0.5 * dt);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    const float64x2_t hv = vld1q_f64(h + i);
    const float64x2_t term = vsubq_f64(vmulq_f64(hv, vdy), vmulq_f64(vmulq_f64(vhalf, hv), hv));
    vst1q_f64(acc + i, vaddq_f64(vld1q_f64(acc + i), term));
  }
  scalar_kernels().loglik_step(acc + i, h + i, dy, dt, n - i);
}

void axpy(double* y, double alpha, const double* x, std::size_t n) {
  const float64x2_t va = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vaddq_f64(vld1q_f64(y + i), vmulq_f64(va, vld1q_f64(x + i))));
  scalar_kernels().axpy(y + i, alpha, x + i, n - i);
}

void exp_shifted(const double* x, double shift, double* out, std::size_t n) {
  const float64x2_t vs = vdupq_n_f64(shift);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, exp2lanes(vsubq_f64(vld1q_f64(x + i), vs)));
  scalar_kernels().exp_shifted(x + i, shift, out + i, n - i);
}

double block_sum(const double* x, std::size_t n) {
  float64x2_t a01 = vdupq_n_f64(0.0), a23 = a01, a45 = a01, a67 = a01;
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    a01 = vaddq_f64(a01, vld1q_f64(x + i));
    a23 = vaddq_f64(a23, vld1q_f64(x + i + 2));
    a45 = vaddq_f64(a45, vld1q_f64(x + i + 4));
    a67 = vaddq_f64(a67, vld1q_f64(x + i + 6));
  }
  const float64x2_t t01 = vaddq_f64(a01, a45);
  const float64x2_t t23 = vaddq_f64(a23, a67);
  const float64x2_t u = vaddq_f64(t01, t23);
  double r = vgetq_lane_f64(u, 0) + vgetq_lane_f64(u, 1);
  for (; i < n; ++i) r = r + x[i];
  return r;
}

double max_value(const double* x, std::size_t n) {
  return scalar_kernels().max_value(x, n);
}

void multiply(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  scalar_kernels().multiply(a + i, b + i, out + i, n - i);
}

}  // namespace

const KernelTable* neon_kernels() {
  static const KernelTable table{Isa::neon, "neon", em_step,   loglik_step, axpy,
                                 exp_shifted, block_sum, max_value, multiply};
  return &table;
}

}  // namespace mortensen::simd

#else

namespace mortensen::simd {
const KernelTable* neon_kernels() { return nullptr; }
}  // namespace mortensen::simd

#endif
