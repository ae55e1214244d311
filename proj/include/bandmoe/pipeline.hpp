#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bandmoe/config.hpp"
#include "bandmoe/degrade.hpp"
#include "bandmoe/metrics.hpp"
#include "bandmoe/model.hpp"
#include "bandmoe/mtl_opt.hpp"

namespace bandmoe {

// Batches ------------------------------------------------------------------

struct BatchSample {
  DegradationSample sample;
  std::uint64_t seed = 0;
};

// Round-robin over the configured tasks, batch_per_task samples each:
// task order t0 t1 .. t0 t1 ..; seeds depend only on (config.seed, step).
std::vector<BatchSample> make_training_batch(const ExperimentConfig& config, std::uint64_t step,
                                             const PromptPools& pools);

// Held-out fixture seed for sample i of a task; disjoint stream from training.
std::uint64_t eval_seed(const ExperimentConfig& config, Task task, std::size_t i);

// Per-sample reconstruction loss L_i = log(1 + MSE / epsilon). Falls with
// PSNR at the same rate for every task, so no task dominates by scale.
Tensor reconstruction_loss(const Tensor& prediction, const Tensor& target, double epsilon);

struct BatchForward {
  std::vector<Tensor> sample_losses;
  std::vector<int> task_ids;
  std::vector<RoutingDecision> decisions[2];  // per stage, one per sample
  Tensor classification;                      // mean over samples
  Tensor balance;                             // mean of the two stages' losses
};

BatchForward forward_batch(const Model& model, const std::vector<BatchSample>& batch);

// Mean raw loss per task present in the batch.
std::map<int, double> task_losses(const BatchForward& fw);

// Differentiable objective with the balance factor given as a constant:
// weighted_loss + 0.01 * balance_scale * balance + classification. Its
// gradient equals that of total_loss when balance_scale is the DWA value.
Tensor objective_with_constant_scale(const BatchForward& fw, const std::map<int, double>& weights,
                                     double balance_scale);

// Training -----------------------------------------------------------------

struct TaskStepLog {
  int task = 0;
  double loss = 0.0;
  double ema = 0.0;
  double rate = 0.0;
  double weight = 0.0;
};

struct StepLog {
  std::uint64_t step = 0;  // 1-based
  double dwa = 0.0;
  double classification = 0.0;
  double balance = 0.0;
  double total = 0.0;
  double seconds = 0.0;
  std::vector<TaskStepLog> tasks;  // ascending task index
};

struct TrainReport {
  std::vector<StepLog> log;
  std::map<int, std::vector<double>> weight_trajectory;  // per task, one per step
  std::filesystem::path checkpoint;
  Model model;
  std::uint64_t backward_passes = 0;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // nothing written when empty
  PromptPools pools = default_prompt_pools();
  // Called after every step; for progress reporting.
  std::function<void(const StepLog&)> on_step;
};

// Plain gradient descent with one backward sweep per step. With out_dir:
// writes config.json, train_log.csv (step,task,loss,ema,rate,weight),
// loss_log.csv (step,dwa,classification,balance,total,seconds) and
// checkpoint/. A non-finite loss throws DomainError naming the step and
// sample seeds and, with out_dir, writes failure.json.
TrainReport train(const ExperimentConfig& config, const TrainOptions& options = {});

// One GD update from an explicit batch; returns the step's breakdown.
LossBreakdown train_step(Model& model, TaskWeightState& state, const std::vector<BatchSample>& batch);

// Evaluation ---------------------------------------------------------------

struct RoutingSummary {
  // Top-k expert sets per stage for each of the eleven fixed test prompts on
  // a shared image, in task order.
  std::vector<std::vector<std::size_t>> stage_sets[2];
  std::size_t distinct[2] = {0, 0};
};

struct EvalReport {
  std::vector<MetricsRecord> model;
  std::vector<MetricsRecord> identity;  // prediction = degraded input
  std::vector<std::string> skipped;     // requested tasks the checkpoint was not trained on
  RoutingSummary routing;
};

// The identity "model" used as the baseline control.
MetricsRecord evaluate_identity(const ExperimentConfig& config, Task task);

// Held-out fixtures with fixed prompts for each task. `tasks` defaults to
// the model's configured tasks. With out_dir: metrics.csv,
// identity_metrics.csv and routing.json.
EvalReport evaluate(const Model& model, const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                    const std::vector<std::string>& tasks = {});

RoutingSummary routing_summary(const Model& model);

}  // namespace bandmoe
