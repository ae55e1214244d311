#include "bandmoe/tasks.hpp"

#include <fstream>
#include <json.hpp>

#include "bandmoe/error.hpp"

namespace bandmoe {

const std::array<TaskInfo, kTaskCount>& all_tasks() {
  static const std::array<TaskInfo, kTaskCount> tasks = {{
      {Task::kCloudRemoval, "cloud", "CR", false, "Clear the clouds from this satellite image to reveal the ground."},
      {Task::kSuperResolution, "superres", "SR", false, "Increase the image's resolution for a more detailed view."},
      {Task::kPansharpening, "pansharpen", "PS", false,
       "Combine panchromatic and multispectral images to produce a higher-resolution color image."},
      {Task::kDehazing, "dehaze", "HR", false, "Dehaze this image to reveal the underlying surface features."},
      {Task::kDenoise, "denoise", "DN", true, "Enhance the image clarity by reducing the noise level."},
      {Task::kDeblur, "deblur", "DB", true, "Deblur the image to recover fine structure and detail."},
      {Task::kDestripe, "destripe", "DS", true, "Remove the banding effect to improve image appearance."},
      {Task::kHistEq, "histeq", "EQ", true,
       "Bring out details in shadows and highlights by equalizing the image's histogram."},
      {Task::kLinStretch, "linstretch", "LS", true, "Balance the image by adjusting levels linearly."},
      {Task::kBrightness, "brightness", "BE", true, "The image is a bit dim; increase brightness slightly."},
      {Task::kSpatiotemporalFusion, "stf", "STF", false,
       "Predict a high-resolution image at the target date using spatiotemporal fusion."},
  }};
  return tasks;
}

const TaskInfo& task_info(Task task) { return all_tasks().at(static_cast<std::size_t>(task)); }

Task parse_task(std::string_view name) {
  for (const auto& t : all_tasks()) {
    if (t.id == name || t.short_name == name) return t.task;
  }
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

const PromptPools& default_prompt_pools() {
  static const PromptPools pools = {
      {"denoise",
       {"Remove the noise from this image.", "Suppress the grainy speckles and keep the edges.",
        "Clean up the sensor noise in this scene.", "Denoise the picture while preserving texture.",
        "Get rid of the random pixel noise."}},
      {"deblur",
       {"Sharpen this blurry image.", "Undo the motion blur in the scene.",
        "Recover crisp details from the out-of-focus capture.", "Remove the blur and restore edges."}},
      {"destripe",
       {"Remove the stripe artifacts from this image.", "Eliminate the periodic banding pattern.",
        "Clean the striping noise across the columns.", "Get rid of the stripes in the scan."}},
      {"histeq",
       {"Undo the histogram equalization applied to this image.",
        "Restore the natural tone curve after equalization.", "Reverse the contrast equalization."}},
      {"linstretch",
       {"Undo the linear contrast stretch.", "Restore the original levels before the percentile stretch.",
        "Reverse the stretched intensity range."}},
      {"brightness",
       {"Fix the exposure of this image.", "Correct the overall brightness.",
        "The scene is too dark or too bright; restore normal illumination.", "Adjust the global gain back to normal."}},
  };
  return pools;
}

PromptPools load_prompt_pools(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("prompt pools: cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
    PromptPools pools = j.get<PromptPools>();
    for (const auto& [task, prompts] : pools) {
      parse_task(task);
      if (prompts.empty()) throw InputError("prompt pools: task '" + task + "' has no prompts");
    }
    return pools;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("prompt pools: ") + e.what());
  }
}

void save_prompt_pools(const std::filesystem::path& path, const PromptPools& pools) {
  std::ofstream os(path);
  os << nlohmann::json(pools).dump(2) << '\n';
  if (!os) throw InputError("prompt pools: cannot write " + path.string());
}

}  // namespace bandmoe
