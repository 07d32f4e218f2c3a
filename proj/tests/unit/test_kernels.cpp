#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "doctest.h"
#include "mortensen/kernels.hpp"

using namespace mortensen::simd;

namespace {

std::vector<double> random_values(std::size_t n, std::uint32_t seed, double lo, double hi) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(gen);
  return v;
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

std::vector<const KernelTable*> variants() {
  std::vector<const KernelTable*> out;
  if (avx2_kernels()) out.push_back(avx2_kernels());
  if (neon_kernels()) out.push_back(neon_kernels());
  return out;
}

}  // namespace

TEST_SUITE("kernels") {
  TEST_CASE("vector variants match the scalar reference bit for bit") {
    const KernelTable& ref = scalar_kernels();
    for (const KernelTable* k : variants()) {
      CAPTURE(k->name);
      // Odd lengths exercise the tails.
      for (std::size_t n : {1u, 3u, 4u, 7u, 8u, 31u, 256u, 1001u}) {
        CAPTURE(n);
        const auto x = random_values(n, 1, -3.0, 3.0);
        const auto d = random_values(n, 2, -5.0, 5.0);
        const auto z = random_values(n, 3, -2.0, 2.0);

        auto xa = x, xb = x;
        ref.em_step(xa.data(), d.data(), z.data(), 0.01, 0.3, n);
        k->em_step(xb.data(), d.data(), z.data(), 0.01, 0.3, n);
        CHECK(same_bits(xa, xb));

        std::vector<double> acc_a(n, 0.25), acc_b(n, 0.25);
        ref.loglik_step(acc_a.data(), x.data(), 0.0123, 0.01, n);
        k->loglik_step(acc_b.data(), x.data(), 0.0123, 0.01, n);
        CHECK(same_bits(acc_a, acc_b));

        auto ya = d, yb = d;
        ref.axpy(ya.data(), -0.7, x.data(), n);
        k->axpy(yb.data(), -0.7, x.data(), n);
        CHECK(same_bits(ya, yb));

        const auto e = random_values(n, 4, -800.0, 10.0);
        std::vector<double> ea(n), eb(n);
        ref.exp_shifted(e.data(), 5.0, ea.data(), n);
        k->exp_shifted(e.data(), 5.0, eb.data(), n);
        CHECK(same_bits(ea, eb));

        CHECK(std::bit_cast<std::uint64_t>(ref.block_sum(x.data(), n)) ==
              std::bit_cast<std::uint64_t>(k->block_sum(x.data(), n)));
        CHECK(ref.max_value(e.data(), n) == k->max_value(e.data(), n));

        std::vector<double> ma(n), mb(n);
        ref.multiply(x.data(), d.data(), ma.data(), n);
        k->multiply(x.data(), d.data(), mb.data(), n);
        CHECK(same_bits(ma, mb));

        CHECK(std::bit_cast<std::uint64_t>(pairwise_sum(ref, x)) ==
              std::bit_cast<std::uint64_t>(pairwise_sum(*k, x)));
      }
    }
  }

  TEST_CASE("exponential is accurate and flushes tiny results") {
    for (double x : {-700.0, -50.0, -1.0, -1e-9, 0.0, 1e-9, 0.5, 1.0, 20.0, 700.0}) {
      CAPTURE(x);
      CHECK(exp_reference(x) == doctest::Approx(std::exp(x)).epsilon(4e-16));
    }
    CHECK(exp_reference(-800.0) == 0.0);
    CHECK(exp_reference(-std::numeric_limits<double>::infinity()) == 0.0);
    const auto x = random_values(5000, 9, -40.0, 40.0);
    double worst = 0.0;
    for (double v : x) worst = std::max(worst, std::abs(exp_reference(v) / std::exp(v) - 1.0));
    CHECK(worst < 4e-16);
  }

  TEST_CASE("sums") {
    const auto x = random_values(10000, 5, 0.0, 1.0);
    long double exact = 0.0L;
    for (double v : x) exact += v;
    CHECK(pairwise_sum(x) == doctest::Approx(static_cast<double>(exact)).epsilon(1e-14));

    auto shuffled = x;
    std::shuffle(shuffled.begin(), shuffled.end(), std::mt19937_64(7));
    CHECK(std::bit_cast<std::uint64_t>(canonical_sum(x)) == std::bit_cast<std::uint64_t>(canonical_sum(shuffled)));
  }

  TEST_CASE("log_sum_exp") {
    CHECK(log_sum_exp(std::vector<double>{}) == -std::numeric_limits<double>::infinity());
    CHECK(log_sum_exp(std::vector<double>{3.0}) == 3.0);
    CHECK(log_sum_exp(std::vector<double>{0.0, 0.0}) == doctest::Approx(std::log(2.0)));
    // Values far outside the exp range stay finite in the log domain.
    CHECK(log_sum_exp(std::vector<double>{-5000.0, -5000.0}) == doctest::Approx(-5000.0 + std::log(2.0)));
    CHECK(log_sum_exp(std::vector<double>{5000.0, 0.0}) == doctest::Approx(5000.0));
  }

  TEST_CASE("active table is one of the compiled variants") {
    const KernelTable& k = active_kernels();
    CHECK((k.isa == Isa::scalar || k.isa == Isa::avx2 || k.isa == Isa::neon));
    CHECK(isa_name(k.isa) == std::string_view(k.name));
  }
}
