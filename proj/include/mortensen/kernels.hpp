#pragma once

// Data-parallel inner loops used by the ensemble filter: Euler-Maruyama
// updates, likelihood accumulation and log-domain reductions.
//
// Every kernel has a scalar reference implementation and vectorized variants
// (AVX2 on x86-64, NEON on aarch64) selected once at runtime. The variants
// evaluate the same floating-point operations in the same order, so for a
// given input they produce bit-identical output; the unit tests check this.
// Set MORTENSEN_SIMD=scalar to force the reference path.

#include <cstddef>
#include <span>
#include <string_view>

namespace mortensen::simd {

enum class Isa { scalar, avx2, neon };

struct KernelTable {
  Isa isa;
  const char* name;

  /// x[i] = (x[i] + dt * drift[i]) + eps * noise[i]
  void (*em_step)(double* x, const double* drift, const double* noise, double dt, double eps,
                  std::size_t n);

  /// acc[i] += h[i] * dy - (0.5 * dt * h[i]) * h[i]
  void (*loglik_step)(double* acc, const double* h, double dy, double dt, std::size_t n);

  /// y[i] = y[i] + alpha * x[i]
  void (*axpy)(double* y, double alpha, const double* x, std::size_t n);

  /// out[i] = exp(x[i] - shift); results below DBL_MIN flush to zero.
  void (*exp_shifted)(const double* x, double shift, double* out, std::size_t n);

  /// Sum with eight strided accumulators combined in a fixed tree, then a
  /// sequential tail. Base case of `pairwise_sum`.
  double (*block_sum)(const double* x, std::size_t n);

  double (*max_value)(const double* x, std::size_t n);

  /// out[i] = a[i] * b[i]
  void (*multiply)(const double* a, const double* b, double* out, std::size_t n);
};

const KernelTable& scalar_kernels();

/// nullptr when the variant was not compiled in or the CPU lacks the ISA.
const KernelTable* avx2_kernels();
const KernelTable* neon_kernels();

/// The table used by the library. Chosen on first call from CPU features
/// and the MORTENSEN_SIMD environment variable (scalar | avx2 | neon | auto).
const KernelTable& active_kernels();

std::string_view isa_name(Isa isa);

/// Pairwise summation over blocks of `kBlock` values.
inline constexpr std::size_t kBlock = 256;
double pairwise_sum(const KernelTable& k, std::span<const double> values);
double pairwise_sum(std::span<const double> values);

/// Sorts a copy of `values` before pairwise summation, so the result is
/// independent of element order.
double canonical_sum(std::span<const double> values);

/// log(sum(exp(values))) computed around the maximum; order independent.
/// Returns -inf for an empty span.
double log_sum_exp(std::span<const double> values);

/// Scalar reference exponential shared by every variant.
double exp_reference(double x);

}  // namespace mortensen::simd
