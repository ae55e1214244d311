#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace bandmoe {

enum class Comparison { kLess, kGreaterEqual, kEqual };

struct Assertion {
  std::string name;
  double value = 0.0;
  double bound = 0.0;
  Comparison comparison = Comparison::kLess;
  bool passed = false;
};

struct SuiteReport {
  std::string suite;
  std::vector<Assertion> assertions;
  double seconds = 0.0;

  bool passed() const;
  // value < bound, value >= bound, or value == bound exactly.
  void check(std::string name, double value, Comparison comparison, double bound);
};

// sinkhorn, moe-fusion, mora, dwa, metrics, model.
const std::vector<std::string>& verify_suite_names();

// Throws ConfigError for an unknown suite name.
SuiteReport run_verify_suite(const std::string& name);

// "all" expands to every suite in verify_suite_names() order.
std::vector<SuiteReport> run_verify(const std::string& name);

nlohmann::json to_json(const std::vector<SuiteReport>& reports);

}  // namespace bandmoe
