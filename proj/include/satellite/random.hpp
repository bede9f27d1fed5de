#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace satellite {

/// 64-bit Mersenne Twister; its output sequence is fixed by the standard, so
/// the helpers below give identical draws on every conforming platform.
using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

/// Uniform integer in [0, n). Lemire's multiply-shift; bias is below 2^-32
/// for any n that fits a sample index.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  const auto x = static_cast<unsigned __int128>(rng()) * n;
  return static_cast<std::size_t>(x >> 64);
}

/// Box-Muller standard normal.
inline double normal01(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace satellite
