#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "bandmoe/tasks.hpp"

namespace bandmoe {

// Experiment configuration. JSON keys are the field names.
struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::size_t patch_size = 16;
  std::size_t channels = 4;  // unified channel count C
  std::size_t slots = 8;
  std::size_t sinkhorn_iters = 8;
  double tau = 0.1;
  std::size_t experts = 2;
  std::size_t top_k = 1;
  std::size_t rank = 2;
  std::size_t d = 32;            // backbone width
  std::size_t d_e = 32;          // channel embedding width
  std::size_t d_p = 32;          // matching projection width
  std::size_t embed_hidden = 32;
  std::size_t route_width = 64;  // route token is 3 * route_width
  double gamma = 0.7;
  double t_w = 0.1;
  double learning_rate = 0.03;
  std::size_t steps = 500;
  std::size_t batch_per_task = 8;
  // Per-sample reconstruction loss is log(1 + MSE / loss_epsilon).
  double loss_epsilon = 2e-3;
  // The task classifier sees the stage-1 route token scaled to this norm.
  double classifier_scale = 6.0;
  // Multiplier on the route-token gain path; 0 disables it.
  double gain_scale = 0.25;
  std::size_t eval_samples = 16;
  std::vector<std::string> tasks = {"denoise", "brightness", "destripe"};
  std::string output_dir = "runs/desk";

  // Desk-scale defaults.
  static ExperimentConfig desk();
  // Stored full-size values (C=20, S=32, E=8, k=2); used for shape checks.
  static ExperimentConfig full_scale();

  // Every violated constraint, empty when the configuration is valid.
  std::vector<std::string> violations() const;
  // Throws ConfigError listing all violations.
  void validate() const;

  std::vector<Task> task_list() const;  // parsed, in configured order
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
// Missing keys keep their defaults; unknown keys and ill-typed values are
// ConfigErrors.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const ExperimentConfig& config);

}  // namespace bandmoe
