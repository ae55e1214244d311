#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace bandmoe {

// The eleven restoration categories. The classification head predicts the
// category index; only the six synthetic families can be generated locally.
enum class Task : int {
  kCloudRemoval = 0,
  kSuperResolution,
  kPansharpening,
  kDehazing,
  kDenoise,
  kDeblur,
  kDestripe,
  kHistEq,
  kLinStretch,
  kBrightness,
  kSpatiotemporalFusion,
};

inline constexpr std::size_t kTaskCount = 11;

struct TaskInfo {
  Task task;
  std::string_view id;
  std::string_view short_name;
  bool synthetic;
  std::string_view test_prompt;
};

const std::array<TaskInfo, kTaskCount>& all_tasks();
const TaskInfo& task_info(Task task);
// Accepts the id ("denoise") or the short name ("DN"); throws ConfigError.
Task parse_task(std::string_view name);
inline int task_index(Task t) { return static_cast<int>(t); }

using PromptPools = std::map<std::string, std::vector<std::string>>;

// Built-in paraphrase pools for the synthetic families, keyed by task id.
const PromptPools& default_prompt_pools();
// {"task_id": ["prompt", ...]}; throws InputError on malformed files.
PromptPools load_prompt_pools(const std::filesystem::path& path);
void save_prompt_pools(const std::filesystem::path& path, const PromptPools& pools);

}  // namespace bandmoe
