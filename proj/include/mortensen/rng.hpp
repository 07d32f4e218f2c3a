#pragma once

// Counter-based random numbers. A stream is identified by a 64-bit key
// derived from (seed, stream index); draw i of a stream is a pure function
// of (key, i), so results never depend on how work is split across threads.

#include <array>
#include <cstdint>
#include <utility>

namespace mortensen::rng {

using Philox4x32Counter = std::array<std::uint32_t, 4>;
using Philox4x32Key = std::array<std::uint32_t, 2>;

/// Philox4x32 with 10 rounds.
Philox4x32Counter philox4x32(Philox4x32Counter ctr, Philox4x32Key key);

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

std::uint64_t derive_key(std::uint64_t seed, std::uint64_t stream);

class CounterStream {
 public:
  explicit CounterStream(std::uint64_t key) : key_(key) {}
  CounterStream(std::uint64_t seed, std::uint64_t stream) : key_(derive_key(seed, stream)) {}

  [[nodiscard]] std::uint64_t key() const noexcept { return key_; }

  /// Two independent uniforms in [0, 1) with 53-bit resolution.
  [[nodiscard]] std::pair<double, double> uniform_pair(std::uint64_t counter) const;

  /// Two independent standard normals (Box-Muller on `uniform_pair`).
  [[nodiscard]] std::pair<double, double> normal_pair(std::uint64_t counter) const;

  /// Fills `out[0..n)` with standard normals using counters base, base+1, ...
  /// (two normals per counter).
  void normals(std::uint64_t base_counter, double* out, std::size_t n) const;

 private:
  std::uint64_t key_;
};

}  // namespace mortensen::rng
