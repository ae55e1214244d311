#include "bandmoe/mtl_opt.hpp"

#include <algorithm>
#include <cmath>

#include "bandmoe/error.hpp"

namespace bandmoe {

void TaskWeightState::validate() const {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("DWA: gamma must lie in [0, 1)");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("DWA: temperature must be positive");
}

bool update_ema(TaskWeightState& state, int task, double loss) {
  if (!std::isfinite(loss)) return false;
  auto it = state.ema.find(task);
  if (it == state.ema.end()) {
    state.ema.emplace(task, loss);
  } else {
    it->second = state.gamma * it->second + (1.0 - state.gamma) * loss;
  }
  return true;
}

DescentRate descent_rate(const TaskWeightState& state, int task, double loss) {
  auto it = state.ema.find(task);
  if (it == state.ema.end()) throw ConfigError("DWA: no EMA recorded for task " + std::to_string(task));
  DescentRate r;
  r.guarded = it->second < kRateEpsilon;
  r.rate = loss / std::max(it->second, kRateEpsilon);
  return r;
}

std::vector<double> task_weights(std::span<const double> rates, double temperature) {
  if (rates.empty()) throw ConfigError("DWA: no tasks present");
  if (!(temperature > 0.0)) throw ConfigError("DWA: temperature must be positive");
  const double top = *std::max_element(rates.begin(), rates.end());
  std::vector<double> w(rates.size());
  double z = 0.0;
  for (std::size_t i = 0; i < rates.size(); ++i) z += (w[i] = std::exp((rates[i] - top) / temperature));
  const double m = double(rates.size());
  for (double& v : w) v = m * v / z;
  return w;
}

const std::map<int, double>& dwa_step(TaskWeightState& state, const std::map<int, double>& task_losses) {
  state.validate();
  if (task_losses.empty()) throw ConfigError("DWA: no tasks present");
  for (const auto& [task, loss] : task_losses) {
    if (!std::isfinite(loss)) throw InputError("DWA: non-finite loss for task " + std::to_string(task));
  }
  std::vector<double> rates;
  for (const auto& [task, loss] : task_losses) {
    (void)update_ema(state, task, loss);
    const DescentRate r = descent_rate(state, task, loss);
    state.guarded_rates += r.guarded;
    rates.push_back(r.rate);
  }
  const std::vector<double> w = task_weights(rates, state.temperature);
  state.rates.clear();
  state.weights.clear();
  std::size_t i = 0;
  for (const auto& [task, loss] : task_losses) {
    state.rates[task] = rates[i];
    state.weights[task] = w[i++];
  }
  ++state.step;
  return state.weights;
}

Tensor weighted_loss(std::span<const Tensor> sample_losses, std::span<const int> task_ids,
                     const std::map<int, double>& weights) {
  if (sample_losses.empty() || sample_losses.size() != task_ids.size()) {
    throw ShapeError("weighted_loss: losses vs task ids", {sample_losses.size()}, {task_ids.size()});
  }
  Tensor acc;
  for (std::size_t i = 0; i < sample_losses.size(); ++i) {
    auto it = weights.find(task_ids[i]);
    if (it == weights.end()) throw ConfigError("weighted_loss: no weight for task " + std::to_string(task_ids[i]));
    const Tensor term = scale(reshape(sample_losses[i], {1}), it->second);
    acc = acc.defined() ? acc + term : term;
  }
  return scale(acc, 1.0 / double(sample_losses.size()));
}

Tensor classification_loss(const Tensor& token, int label, const Tensor& w_cls) {
  if (w_cls.rank() != 2 || token.rank() != 1 || w_cls.dim(1) != token.dim(0)) {
    throw ShapeError("classification_loss", w_cls.shape(), token.shape());
  }
  if (label < 0 || std::size_t(label) >= w_cls.dim(0)) {
    throw InputError("classification_loss: label " + std::to_string(label) + " outside [0, " +
                     std::to_string(w_cls.dim(0)) + ")");
  }
  const Tensor logits = reshape(matmul(w_cls, reshape(token, {token.dim(0), 1})), {w_cls.dim(0)});
  return neg(select(log_softmax_lastdim(logits), std::size_t(label)));
}

LossBreakdown total_loss(const Tensor& dwa, const Tensor& balance, const Tensor& classification) {
  for (const Tensor* t : {&dwa, &balance, &classification}) {
    if (t->numel() != 1 || !std::isfinite(t->item())) throw DomainError("total_loss: parts must be finite scalars");
  }
  LossBreakdown b;
  b.dwa = reshape(dwa, {1});
  b.balance = reshape(balance, {1});
  b.classification = reshape(classification, {1});
  b.total = b.dwa + scale(stop_gradient(b.dwa), kBalanceCoefficient) * b.balance + b.classification;
  return b;
}

}  // namespace bandmoe
