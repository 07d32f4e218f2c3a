#include "mortensen/rng.hpp"

#include <cmath>
#include <numbers>

namespace mortensen::rng {
namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

inline Philox4x32Counter philox_round(const Philox4x32Counter& c, const Philox4x32Key& k) {
  std::uint32_t hi0, lo0, hi1, lo1;
  mulhilo(kPhiloxM0, c[0], hi0, lo0);
  mulhilo(kPhiloxM1, c[2], hi1, lo1);
  return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
}

constexpr double kTwoPow53Inv = 1.0 / 9007199254740992.0;

}  // namespace

Philox4x32Counter philox4x32(Philox4x32Counter ctr, Philox4x32Key key) {
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kPhiloxW0;
      key[1] += kPhiloxW1;
    }
    ctr = philox_round(ctr, key);
  }
  return ctr;
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t derive_key(std::uint64_t seed, std::uint64_t stream) {
  return mix64(mix64(seed) ^ mix64(stream + 0x632BE59BD9B4E019ull));
}

std::pair<double, double> CounterStream::uniform_pair(std::uint64_t counter) const {
  const Philox4x32Counter out = philox4x32(
      {static_cast<std::uint32_t>(counter), static_cast<std::uint32_t>(counter >> 32), 0u, 0u},
      {static_cast<std::uint32_t>(key_), static_cast<std::uint32_t>(key_ >> 32)});
  const std::uint64_t a = (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
  const std::uint64_t b = (static_cast<std::uint64_t>(out[2]) << 32) | out[3];
  return {static_cast<double>(a >> 11) * kTwoPow53Inv, static_cast<double>(b >> 11) * kTwoPow53Inv};
}

std::pair<double, double> CounterStream::normal_pair(std::uint64_t counter) const {
  const auto [u, v] = uniform_pair(counter);
  const double r = std::sqrt(-2.0 * std::log(1.0 - u));
  const double theta = 2.0 * std::numbers::pi * v;
  return {r * std::cos(theta), r * std::sin(theta)};
}

void CounterStream::normals(std::uint64_t base_counter, double* out, std::size_t n) const {
  std::size_t i = 0;
  for (std::uint64_t c = base_counter; i + 2 <= n; ++c, i += 2) {
    const auto [z0, z1] = normal_pair(c);
    out[i] = z0;
    out[i + 1] = z1;
  }
  if (i < n) out[i] = normal_pair(base_counter + n / 2).first;
}

}  // namespace mortensen::rng
