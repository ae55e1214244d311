#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "bandmoe/tensor.hpp"

namespace bandmoe {

inline constexpr double kRateEpsilon = 1e-12;
inline constexpr double kBalanceCoefficient = 0.01;

// Per-task loss EMAs and the most recent DWA weights, keyed by task index.
struct TaskWeightState {
  double gamma = 0.7;        // EMA decay, in [0, 1)
  double temperature = 0.1;  // T_w > 0
  std::map<int, double> ema;
  std::map<int, double> rates;    // last step's r_m, present tasks only
  std::map<int, double> weights;  // last step's w_m, present tasks only
  std::uint64_t step = 0;
  std::uint64_t guarded_rates = 0;  // rates computed with the epsilon guard

  // Throws ConfigError for gamma outside [0,1) or a non-positive temperature.
  void validate() const;
};

// ema <- gamma * ema + (1 - gamma) * loss, or ema = loss on first sight.
// Returns false and leaves the state untouched for a non-finite loss.
[[nodiscard]] bool update_ema(TaskWeightState& state, int task, double loss);

struct DescentRate {
  double rate = 1.0;
  bool guarded = false;  // ema was below the epsilon guard
};

// r = loss / max(ema, 1e-12). Throws ConfigError if the task has no EMA.
DescentRate descent_rate(const TaskWeightState& state, int task, double loss);

// w = M * softmax(r / T_w) with max subtraction; sums to M.
std::vector<double> task_weights(std::span<const double> rates, double temperature);

// One DWA step over the tasks present in a minibatch: update each EMA, then
// compute rates and weights. Tasks are visited in ascending index order.
// Throws InputError (state unchanged) if any loss is non-finite.
const std::map<int, double>& dwa_step(TaskWeightState& state, const std::map<int, double>& task_losses);

// (1/N) sum_i w_{m_i} L_i; the weights are constants.
Tensor weighted_loss(std::span<const Tensor> sample_losses, std::span<const int> task_ids,
                     const std::map<int, double>& weights);

// Cross-entropy of W_cls z against `label`; W_cls is [classes, |z|].
Tensor classification_loss(const Tensor& token, int label, const Tensor& w_cls);

struct LossBreakdown {
  Tensor dwa;
  Tensor classification;
  Tensor balance;
  Tensor total;  // dwa + 0.01 * sg(dwa) * balance + classification
  std::vector<int> task_ids;
  std::vector<double> sample_losses;
};

LossBreakdown total_loss(const Tensor& dwa, const Tensor& balance, const Tensor& classification);

}  // namespace bandmoe
