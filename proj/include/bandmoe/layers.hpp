#pragma once

#include <string>
#include <vector>

#include "bandmoe/rng.hpp"
#include "bandmoe/tensor.hpp"
#include "bandmoe/tensor_io.hpp"

namespace bandmoe {

// Affine map y = x W + b applied to a [in] vector or to each row of [n, in].
struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]

  // W ~ N(0, stddev^2); the default stddev is 1/sqrt(in). Bias starts at `bias`.
  static Linear init(CounterRng& rng, std::size_t in, std::size_t out, double stddev = -1.0, double bias = 0.0);

  std::size_t in_features() const { return w.dim(0); }
  std::size_t out_features() const { return w.dim(1); }
  Tensor operator()(const Tensor& x) const;
  std::vector<Tensor> parameters() const { return {w, b}; }
  void collect(NamedTensors& out, const std::string& prefix) const;
  static Linear restore(const Bundle& bundle, const std::string& prefix);
};

// Re-enables gradient tracking on a tensor read from a container.
Tensor trainable(const Tensor& stored);

}  // namespace bandmoe
