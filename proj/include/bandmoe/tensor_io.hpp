#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "bandmoe/tensor.hpp"

namespace bandmoe {

// Container layout: one line of UTF-8 JSON {"shape": [...], "dtype": "f64"}
// terminated by '\n', then numel little-endian IEEE-754 doubles.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// A directory holding one container per tensor plus manifest.json with
// {"tensors": [{"name", "file", "shape"}], ...extra}. Names may contain '.'
// and '/', which map to '_' in file names.
void save_bundle(const std::filesystem::path& dir, const NamedTensors& tensors, const std::string& extra_json = "{}");

struct Bundle {
  NamedTensors tensors;
  std::string extra_json;  // manifest minus the "tensors" key

  const Tensor& at(const std::string& name) const;
};

Bundle load_bundle(const std::filesystem::path& dir);

}  // namespace bandmoe
