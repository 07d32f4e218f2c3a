#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>
#include <vector>

#include "mortensen/kernels.hpp"

namespace mortensen::simd {
namespace {

const KernelTable& select_kernels() {
  const char* env = std::getenv("MORTENSEN_SIMD");
  const std::string want = env ? env : "auto";
  if (want == "scalar") return scalar_kernels();
  if (want == "avx2" && avx2_kernels()) return *avx2_kernels();
  if (want == "neon" && neon_kernels()) return *neon_kernels();
  if (const auto* k = avx2_kernels()) return *k;
  if (const auto* k = neon_kernels()) return *k;
  return scalar_kernels();
}

double pairwise_rec(const KernelTable& k, const double* x, std::size_t n) {
  if (n <= kBlock) return k.block_sum(x, n);
  const std::size_t half = (n / 2) & ~std::size_t{7};
  return pairwise_rec(k, x, half) + pairwise_rec(k, x + half, n - half);
}

}  // namespace

const KernelTable& active_kernels() {
  static const KernelTable& table = select_kernels();
  return table;
}

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    case Isa::neon: return "neon";
  }
  return "unknown";
}

double pairwise_sum(const KernelTable& k, std::span<const double> values) {
  return pairwise_rec(k, values.data(), values.size());
}

double pairwise_sum(std::span<const double> values) {
  return pairwise_sum(active_kernels(), values);
}

double canonical_sum(std::span<const double> values) {
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  return pairwise_sum(sorted);
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) return -std::numeric_limits<double>::infinity();
  const auto& k = active_kernels();
  const double m = k.max_value(values.data(), values.size());
  if (!std::isfinite(m)) return m;
  std::vector<double> terms(values.size());
  k.exp_shifted(values.data(), m, terms.data(), terms.size());
  return m + std::log(canonical_sum(terms));
}

}  // namespace mortensen::simd
