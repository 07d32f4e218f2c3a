// Compiled with -mavx2 only (no -mfma): each lane performs exactly the
// roundings of the scalar reference.

#include "mortensen/kernels.hpp"

#if defined(MORTENSEN_HAVE_AVX2)

#include <immintrin.h>

#include <limits>

#include "exp_constants.hpp"

namespace mortensen::simd {
namespace {

using namespace detail;

inline __m256d pow2_exact(__m256d k) {
  const __m256d biased =
      _mm256_add_pd(_mm256_add_pd(k, _mm256_set1_pd(1023.0)), _mm256_set1_pd(kMantissaShift));
  return _mm256_castsi256_pd(_mm256_slli_epi64(_mm256_castpd_si256(biased), 52));
}

inline __m256d exp4(__m256d x) {
  const __m256d fx =
      _mm256_round_pd(_mm256_mul_pd(x, _mm256_set1_pd(kLog2e)), _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  __m256d r = _mm256_sub_pd(x, _mm256_mul_pd(fx, _mm256_set1_pd(kLn2Hi)));
  r = _mm256_sub_pd(r, _mm256_mul_pd(fx, _mm256_set1_pd(kLn2Lo)));
  const __m256d rr = _mm256_mul_pd(r, r);
  __m256d p = _mm256_add_pd(_mm256_mul_pd(_mm256_set1_pd(kExpP0), rr), _mm256_set1_pd(kExpP1));
  p = _mm256_add_pd(_mm256_mul_pd(p, rr), _mm256_set1_pd(kExpP2));
  const __m256d px = _mm256_mul_pd(r, p);
  __m256d q = _mm256_add_pd(_mm256_mul_pd(_mm256_set1_pd(kExpQ0), rr), _mm256_set1_pd(kExpQ1));
  q = _mm256_add_pd(_mm256_mul_pd(q, rr), _mm256_set1_pd(kExpQ2));
  q = _mm256_add_pd(_mm256_mul_pd(q, rr), _mm256_set1_pd(kExpQ3));
  __m256d e = _mm256_div_pd(px, _mm256_sub_pd(q, px));
  e = _mm256_add_pd(_mm256_set1_pd(1.0), _mm256_mul_pd(_mm256_set1_pd(2.0), e));
  const __m256d n1 = _mm256_floor_pd(_mm256_mul_pd(fx, _mm256_set1_pd(0.5)));
  const __m256d n2 = _mm256_sub_pd(fx, n1);
  __m256d y = _mm256_mul_pd(_mm256_mul_pd(e, pow2_exact(n1)), pow2_exact(n2));

  const __m256d too_big = _mm256_cmp_pd(x, _mm256_set1_pd(kExpMax), _CMP_GT_OQ);
  const __m256d too_small = _mm256_cmp_pd(x, _mm256_set1_pd(kExpMin), _CMP_LT_OQ);
  y = _mm256_blendv_pd(y, _mm256_set1_pd(std::numeric_limits<double>::infinity()), too_big);
  y = _mm256_blendv_pd(y, _mm256_setzero_pd(), too_small);
  return y;
}

void em_step(double* x, const double* drift, const double* noise, double dt, double eps,
             std::size_t n) {
  const __m256d vdt = _mm256_set1_pd(dt);
  const __m256d veps = _mm256_set1_pd(eps);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d v = _mm256_add_pd(_mm256_loadu_pd(x + i), _mm256_mul_pd(vdt, _mm256_loadu_pd(drift + i)));
    v = _mm256_add_pd(v, _mm256_mul_pd(veps, _mm256_loadu_pd(noise + i)));
    _mm256_storeu_pd(x + i, v);
  }
  scalar_kernels().em_step(x + i, drift + i, noise + i, dt, eps, n - i);
}

void loglik_step(double* acc, const double* h, double dy, double dt, std::size_t n) {
  const __m256d vdy = _mm256_set1_pd(dy);
  const __m256d vhalf = _mm256_set1_pd(0.5 * dt);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d hv = _mm256_loadu_pd(h + i);
    const __m256d term =
        _mm256_sub_pd(_mm256_mul_pd(hv, vdy), _mm256_mul_pd(_mm256_mul_pd(vhalf, hv), hv));
    _mm256_storeu_pd(acc + i, _mm256_add_pd(_mm256_loadu_pd(acc + i), term));
  }
  scalar_kernels().loglik_step(acc + i, h + i, dy, dt, n - i);
}

void axpy(double* y, double alpha, const double* x, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), _mm256_mul_pd(va, _mm256_loadu_pd(x + i))));
  scalar_kernels().axpy(y + i, alpha, x + i, n - i);
}

void exp_shifted(const double* x, double shift, double* out, std::size_t n) {
  const __m256d vs = _mm256_set1_pd(shift);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, exp4(_mm256_sub_pd(_mm256_loadu_pd(x + i), vs)));
  scalar_kernels().exp_shifted(x + i, shift, out + i, n - i);
}

double block_sum(const double* x, std::size_t n) {
  __m256d lo = _mm256_setzero_pd();
  __m256d hi = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    lo = _mm256_add_pd(lo, _mm256_loadu_pd(x + i));
    hi = _mm256_add_pd(hi, _mm256_loadu_pd(x + i + 4));
  }
  const __m256d t = _mm256_add_pd(lo, hi);
  const __m128d u = _mm_add_pd(_mm256_castpd256_pd128(t), _mm256_extractf128_pd(t, 1));
  double r = _mm_cvtsd_f64(u) + _mm_cvtsd_f64(_mm_unpackhi_pd(u, u));
  for (; i < n; ++i) r = r + x[i];
  return r;
}

double max_value(const double* x, std::size_t n) {
  double m = -std::numeric_limits<double>::infinity();
  std::size_t i = 0;
  if (n >= 4) {
    __m256d vm = _mm256_set1_pd(m);
    for (; i + 4 <= n; i += 4) vm = _mm256_max_pd(_mm256_loadu_pd(x + i), vm);
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, vm);
    for (double v : lanes) m = v > m ? v : m;
  }
  for (; i < n; ++i) m = x[i] > m ? x[i] : m;
  return m;
}

void multiply(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  scalar_kernels().multiply(a + i, b + i, out + i, n - i);
}

}  // namespace

const KernelTable* avx2_kernels() {
  static const bool supported = __builtin_cpu_supports("avx2");
  static const KernelTable table{Isa::avx2, "avx2", em_step,   loglik_step, axpy,
                                 exp_shifted, block_sum, max_value, multiply};
  return supported ? &table : nullptr;
}

}  // namespace mortensen::simd

#else

namespace mortensen::simd {
const KernelTable* avx2_kernels() { return nullptr; }
}  // namespace mortensen::simd

#endif
