#include "tpv/rng.hpp"

#include <cmath>
#include <numbers>

namespace tpv {

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) noexcept {
  std::uint64_t h = mix64(base ^ 0x5851f42d4c957f2dULL);
  for (std::uint64_t part : path) {
    h = mix64(h ^ mix64(part + 0x2545f4914f6cdd1dULL));
  }
  return h;
}

std::uint64_t CounterRng::next_u64() noexcept {
  const std::uint64_t x = key_ + (counter_ + 1) * 0x9e3779b97f4a7c15ULL;
  ++counter_;
  return mix64(x);
}

double CounterRng::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double CounterRng::normal() noexcept {
  if (has_cached_) {
    has_cached_ = false;
    return cached_normal_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  cached_normal_ = r * std::sin(theta);
  has_cached_ = true;
  return r * std::cos(theta);
}

std::uint64_t CounterRng::index(std::uint64_t n) noexcept {
  // Rejection keeps the draw exactly uniform.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % n;
}

}  // namespace tpv
