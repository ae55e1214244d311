#pragma once

#include <cstdint>

#include "bandmoe/tensor.hpp"

namespace bandmoe {

// Counter-based generator: draw i of (seed, stream) is
//   splitmix64(key + (i + 1) * 0x9E3779B97F4A7C15),
//   key = splitmix64(seed ^ splitmix64(stream + 0xD1B54A32D192ED03)),
// where splitmix64(z) applies
//   z = (z ^ z >> 30) * 0xBF58476D1CE4E5B9,
//   z = (z ^ z >> 27) * 0x94D049BB133111EB,
//   z ^ z >> 31.
// Doubles use the top 53 bits; normals use Box-Muller with two draws each.
// Nothing depends on the standard library's distributions, so streams
// reproduce bit-for-bit across platforms and languages.
class CounterRng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;
  static constexpr std::uint64_t kStreamSalt = 0xD1B54A32D192ED03ull;

  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0);

  static std::uint64_t mix(std::uint64_t z);

  std::uint64_t next_u64();
  // [0, 1)
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

  Tensor normal_tensor(const Shape& shape, double stddev, bool requires_grad = false);
  Tensor uniform_tensor(const Shape& shape, double lo, double hi, bool requires_grad = false);

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace bandmoe
