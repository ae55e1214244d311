#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "bandmoe/degrade.hpp"
#include "bandmoe/error.hpp"
#include "bandmoe/pipeline.hpp"
#include "bandmoe/verify.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

using namespace bandmoe;

int cmd_train(const std::string& config_path, const std::filesystem::path& out, bool quiet) {
  const ExperimentConfig config = load_config(config_path);
  TrainOptions options;
  options.out_dir = out;
  if (!quiet) {
    options.on_step = [&](const StepLog& log) {
      if (log.step % 50 == 0 || log.step == config.steps) {
        std::fprintf(stderr, "step %4llu  total %.5f  dwa %.5f  cls %.4f  balance %.4f\n",
                     static_cast<unsigned long long>(log.step), log.total, log.dwa, log.classification, log.balance);
      }
    };
  }
  const TrainReport report = train(config, options);
  std::cout << "checkpoint: " << report.checkpoint.string() << '\n';
  return kExitOk;
}

int cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& out,
             const std::vector<std::string>& tasks) {
  const Model model = load_model(checkpoint);
  const EvalReport report = evaluate(model, out, tasks);
  for (std::size_t i = 0; i < report.model.size(); ++i) {
    const auto& m = report.model[i];
    std::printf("%-11s psnr %8.4f (identity %8.4f)  ssim %.4f  sam %.4f  ergas %.4f\n", m.task.c_str(), m.psnr,
                report.identity[i].psnr, m.ssim, m.sam, m.ergas);
  }
  return kExitOk;
}

int cmd_verify(const std::string& suite, const std::string& json_path) {
  const auto reports = run_verify(suite);
  const nlohmann::json j = to_json(reports);
  if (json_path.empty() || json_path == "-") {
    std::cout << j.dump(2) << '\n';
  } else {
    std::ofstream(json_path) << j.dump(2) << '\n';
  }
  for (const auto& r : reports) {
    std::fprintf(stderr, "%-10s %s (%zu assertions, %.2fs)\n", r.suite.c_str(), r.passed() ? "pass" : "FAIL",
                 r.assertions.size(), r.seconds);
  }
  return j.at("passed").get<bool>() ? kExitOk : kExitFailure;
}

int cmd_fixtures(const std::string& task_name, std::uint64_t seed, const std::filesystem::path& out,
                 std::size_t channels, std::size_t size) {
  const Task task = parse_task(task_name);
  const DegradationSample sample = make_eval_sample(task, seed, SampleShape{channels, size, size});
  save_sample(out, sample);
  std::cout << "wrote " << out.string() << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-routed mixture-of-experts restoration toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint, suite = "all", json_path, task;
  std::vector<std::string> eval_tasks;
  std::uint64_t seed = 0;
  std::size_t channels = 4, size = 16;
  bool quiet = false;

  auto* train_cmd = app.add_subcommand("train", "Train the miniature model from a JSON configuration");
  train_cmd->add_option("--config", config_path, "ExperimentConfig JSON")->required();
  train_cmd->add_option("--out", out_dir, "Run directory")->required();
  train_cmd->add_flag("--quiet", quiet, "No per-step progress");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on held-out fixtures");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--out", out_dir, "Output directory")->required();
  eval_cmd->add_option("--tasks", eval_tasks, "Task ids (default: the checkpoint's tasks)");

  auto* verify_cmd = app.add_subcommand("verify", "Run invariant suites and emit a JSON report");
  verify_cmd->add_option("--suite", suite, "Suite name or 'all'");
  verify_cmd->add_option("--json", json_path, "Report path ('-' for stdout)");

  auto* fixtures_cmd = app.add_subcommand("fixtures", "Write one held-out degradation fixture");
  fixtures_cmd->add_option("--task", task, "Task id")->required();
  fixtures_cmd->add_option("--seed", seed, "Fixture seed")->required();
  fixtures_cmd->add_option("--out", out_dir, "Output directory")->required();
  fixtures_cmd->add_option("--channels", channels, "Channel count");
  fixtures_cmd->add_option("--size", size, "Patch side");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train_cmd) return cmd_train(config_path, out_dir, quiet);
    if (*eval_cmd) return cmd_eval(checkpoint, out_dir, eval_tasks);
    if (*verify_cmd) return cmd_verify(suite, json_path);
    if (*fixtures_cmd) return cmd_fixtures(task, seed, out_dir, channels, size);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}
