#include "bandmoe/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <set>

namespace bandmoe {

namespace {

constexpr std::uint64_t kTrainStream = 1ull << 40;
constexpr std::uint64_t kEvalStream = 2ull << 40;
constexpr std::uint64_t kRoutingImageSalt = 0x5eed0f1a9e5ull;

std::ofstream open_csv(const std::filesystem::path& path, const char* header) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  os << header << '\n';
  return os;
}

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::vector<BatchSample> make_training_batch(const ExperimentConfig& config, std::uint64_t step,
                                             const PromptPools& pools) {
  const auto tasks = config.task_list();
  CounterRng rng(config.seed, kTrainStream + step);
  const SampleShape shape{config.channels, config.patch_size, config.patch_size};
  std::vector<BatchSample> batch;
  for (std::size_t round = 0; round < config.batch_per_task; ++round) {
    for (Task t : tasks) {
      const std::uint64_t seed = rng.next_u64();
      batch.push_back({make_sample(t, seed, pools, shape), seed});
    }
  }
  return batch;
}

std::uint64_t eval_seed(const ExperimentConfig& config, Task task, std::size_t i) {
  CounterRng rng(config.seed, kEvalStream + std::uint64_t(task_index(task)));
  std::uint64_t s = 0;
  for (std::size_t j = 0; j <= i; ++j) s = rng.next_u64();
  return s;
}

Tensor reconstruction_loss(const Tensor& prediction, const Tensor& target, double epsilon) {
  if (prediction.shape() != target.shape()) {
    throw ShapeError("reconstruction_loss", prediction.shape(), target.shape());
  }
  if (!(epsilon > 0.0)) throw ConfigError("reconstruction_loss: epsilon must be positive");
  return log(add_scalar(scale(mean(square(prediction - target)), 1.0 / epsilon), 1.0));
}

BatchForward forward_batch(const Model& model, const std::vector<BatchSample>& batch) {
  if (batch.empty()) throw ConfigError("forward_batch: empty batch");
  BatchForward fw;
  std::vector<Tensor> cls;
  for (const auto& b : batch) {
    ModelOutput out = forward(model, b.sample.degraded, b.sample.prompt);
    const Tensor target = pad_channels(b.sample.clean, model.config.channels).tensor;
    fw.sample_losses.push_back(reconstruction_loss(out.prediction, target, model.config.loss_epsilon));
    fw.task_ids.push_back(task_index(b.sample.task));
    const Tensor token = scale(unit_norm(out.decisions[0].token), model.config.classifier_scale);
    cls.push_back(classification_loss(token, task_index(b.sample.task), model.w_cls));
    fw.decisions[0].push_back(std::move(out.decisions[0]));
    fw.decisions[1].push_back(std::move(out.decisions[1]));
  }
  fw.classification = scale(sum(concat(cls, 0)), 1.0 / double(cls.size()));
  fw.balance = scale(load_balance_loss(fw.decisions[0]) + load_balance_loss(fw.decisions[1]), 0.5);
  return fw;
}

std::map<int, double> task_losses(const BatchForward& fw) {
  std::map<int, double> total;
  std::map<int, std::size_t> count;
  for (std::size_t i = 0; i < fw.sample_losses.size(); ++i) {
    total[fw.task_ids[i]] += fw.sample_losses[i].item();
    ++count[fw.task_ids[i]];
  }
  for (auto& [task, v] : total) v /= double(count[task]);
  return total;
}

Tensor objective_with_constant_scale(const BatchForward& fw, const std::map<int, double>& weights,
                                     double balance_scale) {
  const Tensor dwa = weighted_loss(fw.sample_losses, fw.task_ids, weights);
  return dwa + scale(fw.balance, kBalanceCoefficient * balance_scale) + fw.classification;
}

LossBreakdown train_step(Model& model, TaskWeightState& state, const std::vector<BatchSample>& batch) {
  BatchForward fw = forward_batch(model, batch);
  const auto& weights = dwa_step(state, task_losses(fw));
  const Tensor dwa = weighted_loss(fw.sample_losses, fw.task_ids, weights);
  LossBreakdown out = total_loss(dwa, fw.balance, fw.classification);
  out.task_ids = fw.task_ids;
  for (const auto& l : fw.sample_losses) out.sample_losses.push_back(l.item());

  const Gradients grads = backward(out.total);
  const double lr = model.config.learning_rate;
  for (const Tensor& p : model.parameters()) {
    auto values = Tensor(p).mutable_data();
    const Tensor grad = grads.of(p);
    const auto g = grad.data();
    for (std::size_t i = 0; i < values.size(); ++i) values[i] -= lr * g[i];
  }
  return out;
}

TrainReport train(const ExperimentConfig& config, const TrainOptions& options) {
  config.validate();
  TrainReport report;
  report.model = Model::build(config);
  TaskWeightState state;
  state.gamma = config.gamma;
  state.temperature = config.t_w;
  state.validate();

  std::ofstream task_log, loss_log;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    save_config(*options.out_dir / "config.json", config);
    task_log = open_csv(*options.out_dir / "train_log.csv", "step,task,loss,ema,rate,weight");
    loss_log = open_csv(*options.out_dir / "loss_log.csv", "step,dwa,classification,balance,total,seconds");
  }

  const std::uint64_t backward_before = backward_pass_count();
  for (std::uint64_t step = 1; step <= config.steps; ++step) {
    const auto start = std::chrono::steady_clock::now();
    const auto batch = make_training_batch(config, step, options.pools);
    LossBreakdown b;
    try {
      b = train_step(report.model, state, batch);
    } catch (const Error& e) {
      nlohmann::json dump = {{"step", step}, {"error", e.what()}, {"samples", nlohmann::json::array()}};
      for (const auto& s : batch) {
        dump["samples"].push_back({{"task", task_info(s.sample.task).id}, {"seed", s.seed}, {"prompt", s.sample.prompt}});
      }
      if (options.out_dir) std::ofstream(*options.out_dir / "failure.json") << dump.dump(2) << '\n';
      throw DomainError("training diverged at step " + std::to_string(step) + ": " + dump.dump());
    }
    StepLog log;
    log.step = step;
    log.dwa = b.dwa.item();
    log.classification = b.classification.item();
    log.balance = b.balance.item();
    log.total = b.total.item();
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    for (const auto& [task, w] : state.weights) {
      const TaskStepLog t{task, 0.0, state.ema.at(task), state.rates.at(task), w};
      report.weight_trajectory[task].push_back(w);
      log.tasks.push_back(t);
    }
    const auto losses = [&] {
      std::map<int, double> total;
      std::map<int, std::size_t> count;
      for (std::size_t i = 0; i < b.task_ids.size(); ++i) {
        total[b.task_ids[i]] += b.sample_losses[i];
        ++count[b.task_ids[i]];
      }
      for (auto& [k, v] : total) v /= double(count[k]);
      return total;
    }();
    for (auto& t : log.tasks) t.loss = losses.at(t.task);

    if (options.out_dir) {
      for (const auto& t : log.tasks) {
        task_log << step << ',' << all_tasks()[t.task].id << ',' << fmt6(t.loss) << ',' << fmt6(t.ema) << ','
                 << fmt6(t.rate) << ',' << fmt6(t.weight) << '\n';
      }
      loss_log << step << ',' << fmt6(log.dwa) << ',' << fmt6(log.classification) << ',' << fmt6(log.balance)
               << ',' << fmt6(log.total) << ',' << fmt6(log.seconds) << '\n';
      task_log.flush();
      loss_log.flush();
    }
    if (options.on_step) options.on_step(log);
    report.log.push_back(std::move(log));
  }
  report.backward_passes = backward_pass_count() - backward_before;

  if (options.out_dir) {
    report.checkpoint = *options.out_dir / "checkpoint";
    save_model(report.checkpoint, report.model);
  }
  return report;
}

MetricsRecord evaluate_identity(const ExperimentConfig& config, Task task) {
  MetricsAccumulator acc(std::string(task_info(task).id));
  const SampleShape shape{config.channels, config.patch_size, config.patch_size};
  for (std::size_t i = 0; i < config.eval_samples; ++i) {
    const auto s = make_eval_sample(task, eval_seed(config, task, i), shape);
    acc.add(s.degraded, s.clean);
  }
  return acc.record();
}

RoutingSummary routing_summary(const Model& model) {
  const auto& c = model.config;
  const Tensor image = gen_clean_patch(c.seed ^ kRoutingImageSalt, c.channels, c.patch_size, c.patch_size);
  RoutingSummary r;
  std::set<std::vector<std::size_t>> distinct[2];
  for (const auto& info : all_tasks()) {
    const ModelOutput out = forward(model, image, std::string(info.test_prompt));
    for (int s = 0; s < 2; ++s) {
      auto set = out.decisions[s].experts;
      std::sort(set.begin(), set.end());
      distinct[s].insert(set);
      r.stage_sets[s].push_back(std::move(set));
    }
  }
  r.distinct[0] = distinct[0].size();
  r.distinct[1] = distinct[1].size();
  return r;
}

EvalReport evaluate(const Model& model, const std::optional<std::filesystem::path>& out_dir,
                    const std::vector<std::string>& tasks) {
  const auto& c = model.config;
  EvalReport report;
  std::vector<Task> selected;
  const auto trained = c.task_list();
  for (const auto& name : tasks.empty() ? c.tasks : tasks) {
    const Task t = parse_task(name);
    if (std::find(trained.begin(), trained.end(), t) == trained.end()) {
      std::cerr << "warning: task '" << name << "' is not in the checkpoint configuration; skipped\n";
      report.skipped.push_back(name);
      continue;
    }
    selected.push_back(t);
  }
  const SampleShape shape{c.channels, c.patch_size, c.patch_size};
  for (Task t : selected) {
    MetricsAccumulator acc(std::string(task_info(t).id));
    for (std::size_t i = 0; i < c.eval_samples; ++i) {
      const auto s = make_eval_sample(t, eval_seed(c, t, i), shape);
      const Tensor pred = forward(model, s.degraded, s.prompt).prediction;
      acc.add(pred, pad_channels(s.clean, c.channels).tensor);
    }
    report.model.push_back(acc.record());
    report.identity.push_back(evaluate_identity(c, t));
  }
  report.routing = routing_summary(model);

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    write_metrics_csv(*out_dir / "metrics.csv", report.model);
    write_metrics_csv(*out_dir / "identity_metrics.csv", report.identity);
    nlohmann::json j;
    for (int s = 0; s < 2; ++s) {
      nlohmann::json stage = {{"distinct_sets", report.routing.distinct[s]}, {"prompts", nlohmann::json::object()}};
      for (std::size_t i = 0; i < kTaskCount; ++i) {
        stage["prompts"][std::string(all_tasks()[i].id)] = report.routing.stage_sets[s][i];
      }
      j["stage" + std::to_string(s + 1)] = stage;
    }
    std::ofstream(*out_dir / "routing.json") << j.dump(2) << '\n';
  }
  return report;
}

}  // namespace bandmoe
