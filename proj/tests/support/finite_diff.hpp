#pragma once

// Central finite-difference oracle used by the gradient tests. It only
// evaluates the forward function; it never looks at recorded backward rules.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "bandmoe/rng.hpp"
#include "bandmoe/tensor.hpp"

namespace bandmoe::testing {

inline std::vector<double> numeric_gradient(const std::function<Tensor()>& f, Tensor param, double h = 1e-5) {
  auto data = param.mutable_data();
  std::vector<double> g(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double saved = data[i];
    data[i] = saved + h;
    const double fp = f().item();
    data[i] = saved - h;
    const double fm = f().item();
    data[i] = saved;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||, floor)
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-10) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

// Worst relative error over `params` between backward() and central
// differences of `f`.
inline double gradient_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double h = 1e-5) {
  Gradients grads = backward(f());
  double worst = 0.0;
  for (const auto& p : params) {
    auto analytic = grads.of(p).to_vector();
    auto numeric = numeric_gradient(f, p, h);
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

// Directional check: compares g . v against (f(x + hv) - f(x - hv)) / 2h
// for a random unit direction v spanning all params.
inline double directional_check(const std::function<Tensor()>& f, std::vector<Tensor> params, CounterRng& rng,
                                double h = 1e-5) {
  Gradients grads = backward(f());
  std::vector<std::vector<double>> dirs;
  double norm = 0.0;
  for (const auto& p : params) {
    std::vector<double> d(p.numel());
    for (auto& x : d) {
      x = rng.normal();
      norm += x * x;
    }
    dirs.push_back(std::move(d));
  }
  norm = std::sqrt(norm);
  double analytic = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor grad = grads.of(params[k]);
    auto g = grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      dirs[k][i] /= norm;
      analytic += g[i] * dirs[k][i];
    }
  }
  auto shift = [&](double s) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto d = params[k].mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * dirs[k][i];
    }
  };
  shift(h);
  const double fp = f().item();
  shift(-2.0 * h);
  const double fm = f().item();
  shift(h);
  const double numeric = (fp - fm) / (2.0 * h);
  return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), 1e-10});
}

}  // namespace bandmoe::testing
