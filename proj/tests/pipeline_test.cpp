#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "bandmoe/error.hpp"
#include "bandmoe/pipeline.hpp"
#include "bandmoe/verify.hpp"
#include "support/finite_diff.hpp"

using namespace bandmoe;
using bandmoe::testing::gradient_check;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("bandmoe_pipeline_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

ExperimentConfig quick(std::size_t steps) {
  auto c = ExperimentConfig::desk();
  c.steps = steps;
  c.batch_per_task = 1;
  c.patch_size = 8;
  c.eval_samples = 2;
  return c;
}

}  // namespace

// Configuration --------------------------------------------------------------

TEST(Config, DeskDefaultsAreValid) {
  const auto c = ExperimentConfig::desk();
  EXPECT_TRUE(c.violations().empty());
  EXPECT_EQ(c.experts, 2u);
  EXPECT_EQ(c.top_k, 1u);
  EXPECT_DOUBLE_EQ(c.t_w, 0.1);
  EXPECT_DOUBLE_EQ(c.gamma, 0.7);
  EXPECT_EQ(c.tasks, (std::vector<std::string>{"denoise", "brightness", "destripe"}));
  EXPECT_TRUE(ExperimentConfig::full_scale().violations().empty());
}

TEST(Config, ValidationListsEveryViolation) {
  auto c = ExperimentConfig::desk();
  c.top_k = 3;
  c.tau = 0.0;
  c.gamma = 1.0;
  c.loss_epsilon = -1.0;
  c.tasks = {"denoise", "denoise", "cloud", "nonsense"};
  const auto v = c.violations();
  EXPECT_EQ(v.size(), 7u);
  EXPECT_NE(std::find(v.begin(), v.end(), "task 'cloud' has no synthetic generator"), v.end());
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, JsonRoundTripAndStrictKeys) {
  auto c = ExperimentConfig::desk();
  c.seed = 99;
  c.tasks = {"deblur", "histeq"};
  const nlohmann::json j = c;
  EXPECT_EQ(nlohmann::json(j.get<ExperimentConfig>()), j);

  EXPECT_THROW(nlohmann::json({{"sed", 1}}).get<ExperimentConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json({{"steps", -5}}).get<ExperimentConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json({{"steps", "many"}}).get<ExperimentConfig>(), ConfigError);
  EXPECT_EQ(nlohmann::json({{"steps", 3}}).get<ExperimentConfig>().experts, 2u);
}

TEST(Config, LoadReportsMissingAndMalformedFiles) {
  const auto dir = scratch("config");
  std::filesystem::create_directories(dir);
  EXPECT_THROW(load_config(dir / "absent.json"), ConfigError);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
  std::ofstream(dir / "invalid.json") << R"({"top_k": 5})";
  EXPECT_THROW(load_config(dir / "invalid.json"), ConfigError);
  std::filesystem::remove_all(dir);
}

// Batches and losses --------------------------------------------------------

TEST(Batch, RoundRobinAndDeterministic) {
  auto c = ExperimentConfig::desk();
  c.batch_per_task = 2;
  const auto a = make_training_batch(c, 5, default_prompt_pools());
  const auto b = make_training_batch(c, 5, default_prompt_pools());
  ASSERT_EQ(a.size(), 6u);
  const auto tasks = c.task_list();
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].sample.task, tasks[i % tasks.size()]);
    EXPECT_EQ(a[i].seed, b[i].seed);
    EXPECT_EQ(a[i].sample.prompt, b[i].sample.prompt);
  }
  const auto next = make_training_batch(c, 6, default_prompt_pools());
  EXPECT_NE(a[0].seed, next[0].seed);
}

TEST(Batch, EvaluationSeedsAreDisjointFromTraining) {
  const auto c = ExperimentConfig::desk();
  std::set<std::uint64_t> train_seeds;
  for (std::uint64_t step = 1; step <= 50; ++step) {
    for (const auto& s : make_training_batch(c, step, default_prompt_pools())) train_seeds.insert(s.seed);
  }
  for (Task t : c.task_list()) {
    for (std::size_t i = 0; i < c.eval_samples; ++i) EXPECT_FALSE(train_seeds.count(eval_seed(c, t, i)));
  }
}

TEST(ReconstructionLoss, MatchesLogMseClosedForm) {
  const Tensor p = Tensor::from({1, 2, 2}, {0.1, 0.2, 0.3, 0.4});
  const Tensor t = Tensor::from({1, 2, 2}, {0.1, 0.0, 0.3, 0.0});
  // MSE = (0.04 + 0.16) / 4 = 0.05; log(1 + 0.05 / 0.002) = log 26.
  EXPECT_NEAR(reconstruction_loss(p, t, 2e-3).item(), std::log(26.0), 1e-12);
  EXPECT_EQ(reconstruction_loss(t, t, 2e-3).item(), 0.0);
  EXPECT_THROW(reconstruction_loss(p, t, 0.0), ConfigError);
  EXPECT_THROW(reconstruction_loss(p, Tensor::zeros({2, 2}), 1e-3), ShapeError);
}

TEST(ReconstructionLoss, GradientMatchesFiniteDifferences) {
  CounterRng rng(3);
  const Tensor p = rng.normal_tensor({2, 3, 3}, 0.2, true);
  const Tensor t = rng.normal_tensor({2, 3, 3}, 0.2);
  EXPECT_LT(gradient_check([&] { return reconstruction_loss(p, t, 2e-3); }, {p}), 1e-6);
}

TEST(ReconstructionLoss, FallsWithPsnrAtTheSameRateForEveryScale) {
  // Far above epsilon, halving the error lowers the loss by log 4 regardless
  // of the absolute error level.
  const Tensor zero = Tensor::zeros({1, 4, 4});
  auto loss_at = [&](double e) { return reconstruction_loss(Tensor::full({1, 4, 4}, e), zero, 1e-9).item(); };
  EXPECT_NEAR(loss_at(0.2) - loss_at(0.1), std::log(4.0), 1e-6);
  EXPECT_NEAR(loss_at(0.02) - loss_at(0.01), std::log(4.0), 1e-5);
}

// Training -------------------------------------------------------------------

TEST(Train, ZeroStepsLeavesInitialModelAndEmptyLogs) {
  const auto c = quick(0);
  const auto dir = scratch("zero_steps");
  TrainOptions o;
  o.out_dir = dir;
  const auto r = train(c, o);
  EXPECT_TRUE(r.log.empty());
  EXPECT_EQ(r.backward_passes, 0u);
  EXPECT_EQ(load_model(r.checkpoint).checksum(), Model::build(c).checksum());
  EXPECT_EQ(slurp(dir / "train_log.csv"), "step,task,loss,ema,rate,weight\n");
  EXPECT_EQ(slurp(dir / "loss_log.csv"), "step,dwa,classification,balance,total,seconds\n");
  EXPECT_EQ(load_config(dir / "config.json").seed, c.seed);
  std::filesystem::remove_all(dir);
}

TEST(Train, SingleTaskWeightIsExactlyOne) {
  auto c = quick(3);
  c.tasks = {"deblur"};
  const auto r = train(c);
  ASSERT_EQ(r.weight_trajectory.size(), 1u);
  for (double w : r.weight_trajectory.begin()->second) EXPECT_EQ(w, 1.0);
}

TEST(Train, OneBackwardPassPerStepAndParametersMove) {
  const auto c = quick(2);
  const auto r = train(c);
  EXPECT_EQ(r.backward_passes, 2u);
  EXPECT_EQ(r.log.size(), 2u);
  EXPECT_NE(r.model.checksum(), Model::build(c).checksum());
  for (const auto& l : r.log) {
    EXPECT_TRUE(std::isfinite(l.total));
    EXPECT_EQ(l.tasks.size(), 3u);
    double wsum = 0.0;
    for (const auto& t : l.tasks) wsum += t.weight;
    EXPECT_NEAR(wsum, 3.0, 1e-9);
  }
}

TEST(Train, RerunsWriteIdenticalLogs) {
  const auto c = quick(2);
  const auto a = scratch("rerun_a"), b = scratch("rerun_b");
  TrainOptions oa, ob;
  oa.out_dir = a;
  ob.out_dir = b;
  const auto ra = train(c, oa);
  const auto rb = train(c, ob);
  EXPECT_EQ(ra.model.checksum(), rb.model.checksum());
  EXPECT_EQ(slurp(a / "train_log.csv"), slurp(b / "train_log.csv"));
  evaluate(ra.model, a / "eval");
  evaluate(rb.model, b / "eval");
  EXPECT_EQ(slurp(a / "eval" / "metrics.csv"), slurp(b / "eval" / "metrics.csv"));
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
}

TEST(Train, TrainStepMatchesObjectiveGradientDescent) {
  // One explicit step equals p - lr * grad of the objective with the DWA
  // weights of that step held fixed.
  const auto c = quick(1);
  Model stepped = Model::build(c);
  const Model reference = Model::build(c);
  const auto batch = make_training_batch(c, 1, default_prompt_pools());
  TaskWeightState state;
  state.gamma = c.gamma;
  state.temperature = c.t_w;
  const LossBreakdown b = train_step(stepped, state, batch);
  const BatchForward fw = forward_batch(reference, batch);
  const double balance_scale = b.dwa.item();
  const Gradients g = backward(objective_with_constant_scale(fw, state.weights, balance_scale));
  const auto before = reference.parameters();
  const auto after = stepped.parameters();
  double worst = 0.0;
  for (std::size_t k = 0; k < before.size(); ++k) {
    const Tensor grad = g.of(before[k]);
    for (std::size_t i = 0; i < grad.numel(); ++i) {
      const double expected = before[k].data()[i] - c.learning_rate * grad.data()[i];
      worst = std::max(worst, std::fabs(after[k].data()[i] - expected));
    }
  }
  EXPECT_LT(worst, 1e-12);
}

// Evaluation -----------------------------------------------------------------

TEST(Evaluate, IdentityModelMatchesIdentityBaseline) {
  const auto c = quick(0);
  Model m = Model::build(c);
  for (double& v : m.head_kernel.mutable_data()) v = 0.0;
  const auto r = evaluate(m);
  ASSERT_EQ(r.model.size(), 3u);
  for (std::size_t i = 0; i < r.model.size(); ++i) {
    EXPECT_EQ(r.model[i].psnr, r.identity[i].psnr);
    EXPECT_EQ(r.model[i].ergas, r.identity[i].ergas);
  }
}

TEST(Evaluate, SkipsTasksOutsideTheCheckpointAndWritesArtifacts) {
  const auto c = quick(0);
  const auto dir = scratch("eval");
  const auto r = evaluate(Model::build(c), dir, {"denoise", "deblur"});
  EXPECT_EQ(r.model.size(), 1u);
  EXPECT_EQ(r.skipped, (std::vector<std::string>{"deblur"}));
  EXPECT_TRUE(std::filesystem::exists(dir / "metrics.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "identity_metrics.csv"));
  const auto routing = nlohmann::json::parse(slurp(dir / "routing.json"));
  EXPECT_EQ(routing.at("stage1").at("prompts").size(), kTaskCount);
  EXPECT_THROW(evaluate(Model::build(c), std::nullopt, {"nonsense"}), ConfigError);
  std::filesystem::remove_all(dir);
}

// Verification report -------------------------------------------------------

TEST(Verify, AllSuitesPassAndSerialize) {
  const auto reports = run_verify("all");
  ASSERT_EQ(reports.size(), verify_suite_names().size());
  const auto j = to_json(reports);
  EXPECT_TRUE(j.at("passed").get<bool>()) << j.dump(2);
  for (const auto& s : j.at("suites")) {
    EXPECT_FALSE(s.at("assertions").empty());
    for (const auto& a : s.at("assertions")) {
      EXPECT_TRUE(a.contains("name") && a.contains("value") && a.contains("bound") && a.contains("comparison"));
    }
  }
}

TEST(Verify, UnknownSuiteIsAConfigError) { EXPECT_THROW(run_verify("nope"), ConfigError); }

TEST(Verify, FailedAssertionFailsTheSuite) {
  SuiteReport r{"probe", {}, 0.0};
  r.check("small", 1e-3, Comparison::kLess, 1e-2);
  EXPECT_TRUE(r.passed());
  r.check("exact", 0.5, Comparison::kEqual, 0.25);
  EXPECT_FALSE(r.passed());
  EXPECT_FALSE(to_json({r}).at("passed").get<bool>());
}
