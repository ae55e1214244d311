#include "bandmoe/rng.hpp"

#include <cmath>
#include <numbers>

namespace bandmoe {

CounterRng::CounterRng(std::uint64_t seed, std::uint64_t stream) : key_(mix(seed ^ mix(stream + kStreamSalt))) {}

std::uint64_t CounterRng::mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::uint64_t CounterRng::next_u64() {
  ++counter_;
  return mix(key_ + counter_ * kGamma);
}

double CounterRng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double CounterRng::normal() {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t CounterRng::below(std::uint64_t n) {
  if (n == 0) return 0;
  // Rejection keeps the result unbiased.
  const std::uint64_t limit = ~0ull - (~0ull % n);
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

Tensor CounterRng::normal_tensor(const Shape& shape, double stddev, bool requires_grad) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = stddev * normal();
  return Tensor::from(shape, std::move(v), requires_grad);
}

Tensor CounterRng::uniform_tensor(const Shape& shape, double lo, double hi, bool requires_grad) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = uniform(lo, hi);
  return Tensor::from(shape, std::move(v), requires_grad);
}

}  // namespace bandmoe
