#include "bandmoe/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "bandmoe/error.hpp"

namespace bandmoe {

ExperimentConfig ExperimentConfig::desk() { return {}; }

ExperimentConfig ExperimentConfig::full_scale() {
  ExperimentConfig c;
  c.patch_size = 128;
  c.channels = 20;
  c.slots = 32;
  c.experts = 8;
  c.top_k = 2;
  c.d_e = 32;
  c.d_p = 32;
  c.output_dir = "runs/full";
  return c;
}

std::vector<std::string> ExperimentConfig::violations() const {
  std::vector<std::string> v;
  auto positive = [&](const char* name, std::size_t value) {
    if (value == 0) v.push_back(std::string(name) + " must be positive");
  };
  positive("patch_size", patch_size);
  positive("channels", channels);
  positive("slots", slots);
  positive("sinkhorn_iters", sinkhorn_iters);
  positive("experts", experts);
  positive("top_k", top_k);
  positive("rank", rank);
  positive("d", d);
  positive("d_e", d_e);
  positive("d_p", d_p);
  positive("embed_hidden", embed_hidden);
  positive("route_width", route_width);
  positive("batch_per_task", batch_per_task);
  positive("eval_samples", eval_samples);
  if (patch_size % 2 != 0) v.push_back("patch_size must be even (one downsampling stage)");
  if (patch_size < 8) v.push_back("patch_size must be at least 8");
  if (top_k > experts) v.push_back("top_k must not exceed experts");
  if (!(tau > 0.0) || !std::isfinite(tau)) v.push_back("tau must be positive");
  if (!(gamma >= 0.0 && gamma < 1.0)) v.push_back("gamma must lie in [0, 1)");
  if (!(t_w > 0.0) || !std::isfinite(t_w)) v.push_back("t_w must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) v.push_back("learning_rate must be positive");
  if (!(loss_epsilon > 0.0) || !std::isfinite(loss_epsilon)) v.push_back("loss_epsilon must be positive");
  if (!(classifier_scale > 0.0) || !std::isfinite(classifier_scale)) {
    v.push_back("classifier_scale must be positive");
  }
  if (!(gain_scale >= 0.0) || !std::isfinite(gain_scale)) v.push_back("gain_scale must be non-negative");
  if (tasks.empty()) v.push_back("tasks must list at least one synthetic task");
  std::set<Task> seen;
  for (const auto& name : tasks) {
    try {
      const Task t = parse_task(name);
      if (!task_info(t).synthetic) v.push_back("task '" + name + "' has no synthetic generator");
      if (!seen.insert(t).second) v.push_back("task '" + name + "' listed twice");
    } catch (const ConfigError&) {
      v.push_back("unknown task '" + name + "'");
    }
  }
  return v;
}

void ExperimentConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid configuration:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ConfigError(msg);
}

std::vector<Task> ExperimentConfig::task_list() const {
  std::vector<Task> out;
  for (const auto& name : tasks) out.push_back(parse_task(name));
  return out;
}

#define BANDMOE_CONFIG_FIELDS(X)                                                                            \
  X(seed) X(patch_size) X(channels) X(slots) X(sinkhorn_iters) X(tau) X(experts) X(top_k) X(rank) X(d)      \
  X(d_e) X(d_p) X(embed_hidden) X(route_width) X(gamma) X(t_w) X(learning_rate) X(steps) X(batch_per_task) \
  X(loss_epsilon) X(classifier_scale) X(gain_scale) X(eval_samples) X(tasks) X(output_dir)

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json::object();
#define X(name) j[#name] = c.name;
  BANDMOE_CONFIG_FIELDS(X)
#undef X
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  static const std::set<std::string> known = {
#define X(name) #name,
      BANDMOE_CONFIG_FIELDS(X)
#undef X
  };
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown configuration key '" + key + "'");
    if (value.is_number_integer() && value.get<long long>() < 0) {
      throw ConfigError("configuration key '" + key + "' must not be negative");
    }
  }
  try {
#define X(name) \
  if (j.contains(#name)) j.at(#name).get_to(c.name);
    BANDMOE_CONFIG_FIELDS(X)
#undef X
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("ill-typed configuration value: ") + e.what());
  }
}

#undef BANDMOE_CONFIG_FIELDS

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open configuration " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("configuration " + path.string() + " is not valid JSON: " + e.what());
  }
  ExperimentConfig c = j.get<ExperimentConfig>();
  c.validate();
  return c;
}

void save_config(const std::filesystem::path& path, const ExperimentConfig& config) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  os << nlohmann::json(config).dump(2) << '\n';
}

}  // namespace bandmoe
