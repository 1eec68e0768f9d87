#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "sfr/core_signal.hpp"
#include "sfr/random.hpp"

namespace sfr::testing {

inline ImpulseResponseGrid random_grid(int n, int m, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::vector<float> v(static_cast<std::size_t>(n) * static_cast<std::size_t>(m));
  for (float& x : v) x = static_cast<float>(scale * rng.normal());
  return ImpulseResponseGrid(std::move(v), n, m, 8000.0, 0.03, "random");
}

inline double rel_diff(double a, double b) {
  const double d = std::abs(a - b);
  const double s = std::max(std::abs(a), std::abs(b));
  return s == 0.0 ? d : d / s;
}

}  // namespace sfr::testing
