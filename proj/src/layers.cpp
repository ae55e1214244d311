#include "bandmoe/layers.hpp"

#include <cmath>

#include "bandmoe/error.hpp"

namespace bandmoe {

Linear Linear::init(CounterRng& rng, std::size_t in, std::size_t out, double stddev, double bias) {
  if (in == 0 || out == 0) throw ConfigError("Linear: zero-width layer");
  if (stddev < 0.0) stddev = 1.0 / std::sqrt(double(in));
  return {rng.normal_tensor({in, out}, stddev, true), Tensor::full({out}, bias, true)};
}

Tensor Linear::operator()(const Tensor& x) const {
  if (x.rank() == 1) {
    if (x.dim(0) != in_features()) throw ShapeError("Linear input", x.shape(), w.shape());
    return reshape(matmul(reshape(x, {1, x.dim(0)}), w), {out_features()}) + b;
  }
  if (x.rank() != 2 || x.dim(1) != in_features()) throw ShapeError("Linear input", x.shape(), w.shape());
  return matmul(x, w) + b;
}

void Linear::collect(NamedTensors& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".w", w);
  out.emplace_back(prefix + ".b", b);
}

Linear Linear::restore(const Bundle& bundle, const std::string& prefix) {
  Linear l{trainable(bundle.at(prefix + ".w")), trainable(bundle.at(prefix + ".b"))};
  if (l.w.rank() != 2 || l.b.rank() != 1 || l.b.dim(0) != l.w.dim(1)) {
    throw InputError("Linear '" + prefix + "': inconsistent stored shapes");
  }
  return l;
}

Tensor trainable(const Tensor& stored) { return stored.detach().set_requires_grad(true); }

}  // namespace bandmoe
