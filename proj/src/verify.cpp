#include "bandmoe/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>

#include "bandmoe/band_align.hpp"
#include "bandmoe/error.hpp"
#include "bandmoe/metrics.hpp"
#include "bandmoe/moe_ops.hpp"
#include "bandmoe/mtl_opt.hpp"
#include "bandmoe/pipeline.hpp"
#include "bandmoe/rng.hpp"

namespace bandmoe {

namespace {

// Fixed seed so every report is reproducible.
constexpr std::uint64_t kVerifySeed = 0x7e51f1ed;

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("verify: compared tensors differ", a.shape(), b.shape());
  double m = 0.0;
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::fabs(x[i] - y[i]));
  return m;
}

RoutingDecision random_decision(CounterRng& rng, std::size_t experts, std::size_t k) {
  std::vector<double> logits(experts);
  for (double& v : logits) v = rng.normal();
  return decide_from_logits(Tensor::from({experts}, logits), k);
}

void sinkhorn_suite(SuiteReport& r) {
  CounterRng rng(kVerifySeed, 1);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t s = 1 + rng.below(16), c = 1 + rng.below(16);
    const double tau = rng.uniform(0.05, 1.0);
    const TransportPlan p = sinkhorn_log(rng.normal_tensor({s, c}, 1.0), tau);
    worst = std::max(worst, p.marginal_residual);
  }
  r.check("converged marginal residual, 20 random problems", worst, Comparison::kLess, 1e-6);

  // Full-scale profile: logits from the matching head of a freshly built
  // S=32, C=20 model on a random image.
  CounterRng big(kVerifySeed, 2);
  const Model full = Model::build(ExperimentConfig::full_scale());
  const Tensor image = big.uniform_tensor({20, 16, 16}, 0.0, 1.0);
  const Tensor logits = matching_logits(full.slots, embed_channels(image, full.embedder));
  const double t8 = sinkhorn_log(logits, 0.1, SinkhornOptions::fixed(8)).marginal_residual;
  const double t1 = sinkhorn_log(logits, 0.1, SinkhornOptions::fixed(1)).marginal_residual;
  r.check("S=32 C=20 residual after 8 iterations", t8, Comparison::kLess, 1e-2);
  r.check("residual(T=8) - residual(T=1)", t8 - t1, Comparison::kLess, 0.0);

  const TransportPlan sq = sinkhorn_log(big.normal_tensor({8, 8}, 1.0), 0.3);
  auto p = sq.plan.data();
  double dev = 0.0;
  for (std::size_t i = 0; i < 8; ++i) {
    double row = 0.0, col = 0.0;
    for (std::size_t j = 0; j < 8; ++j) {
      row += 8.0 * p[i * 8 + j];
      col += 8.0 * p[j * 8 + i];
    }
    dev = std::max({dev, std::fabs(row - 1.0), std::fabs(col - 1.0)});
  }
  r.check("S=C=8: S*P doubly stochastic", dev, Comparison::kLess, 1e-6);
}

void moe_fusion_suite(SuiteReport& r) {
  CounterRng rng(kVerifySeed, 3);
  double conv_err = 0.0, moce_err = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t experts = 2 + rng.below(4), k = 1 + rng.below(experts);
    const ConvExpertSet conv = ConvExpertSet::init(rng, experts, 6, 3, 3);
    const ChannelExpertSet chan = ChannelExpertSet::init(rng, experts, 6);
    const RoutingDecision d = random_decision(rng, experts, k);
    const Tensor x = rng.normal_tensor({3, 8, 8}, 1.0);
    const Tensor f = rng.normal_tensor({6, 8, 8}, 1.0);
    auto alpha = d.weights.data();

    Tensor conv_ref = Tensor::zeros({6, 8, 8});
    Tensor gate = Tensor::zeros({6});
    for (std::size_t i = 0; i < d.k(); ++i) {
      const std::size_t e = d.experts[i];
      conv_ref = conv_ref + scale(conv2d(x, conv.kernels[e], conv.biases[e]), alpha[i]);
      gate = gate + scale(channel_attention(f, chan, e), alpha[i]);
    }
    const Tensor moce_ref = f * reshape(gate, {6, 1, 1});
    conv_err = std::max(conv_err, max_abs_diff(conv_moe_forward(x, d, conv), conv_ref));
    moce_err = std::max(moce_err, max_abs_diff(moce_forward(f, d, chan), moce_ref));
  }
  r.check("fused convolution vs per-expert sum", conv_err, Comparison::kLess, 1e-10);
  r.check("fused channel gate vs per-expert sum", moce_err, Comparison::kLess, 1e-12);
}

void mora_suite(SuiteReport& r) {
  CounterRng rng(kVerifySeed, 4);
  const MoraParams base = MoraParams::init(rng, 4, 8, 2);
  const RoutingDecision d = random_decision(rng, 4, 2);
  const Tensor tokens = rng.normal_tensor({12, 8}, 1.0);
  const MoraParams zero = base.with_adapter_scale(0.0);
  r.check("zero adapters: fused vs per-expert output",
          max_abs_diff(mora_fused_attention(tokens, d, zero), per_expert_attention_oracle(tokens, d, zero)),
          Comparison::kLess, 1e-12);

  // Non-trivial adapters: B factors drawn at the scale of A.
  MoraParams p = base;
  for (auto* group : {&p.b_q, &p.b_k}) {
    for (Tensor& b : *group) b = rng.normal_tensor(b.shape(), 0.5);
  }
  const std::vector<double> eps = {1e-4, 3e-4, 1e-3, 3e-3, 1e-2};
  const auto reports = mora_error_scaling(tokens, d, p, eps);
  std::vector<double> maps;
  for (const auto& rep : reports) maps.push_back(rep.map_max_abs);
  r.check("attention-map mixing error log-log slope", log_log_slope(eps, maps), Comparison::kGreaterEqual, 1.5);
}

void dwa_suite(SuiteReport& r) {
  CounterRng rng(kVerifySeed, 5);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = 1 + rng.below(8);
    std::vector<double> rates(m);
    for (double& v : rates) v = rng.uniform(0.0, 3.0);
    const auto w = task_weights(rates, 0.1);
    double sum = 0.0;
    for (double v : w) sum += v;
    worst = std::max(worst, std::fabs(sum - double(m)));
  }
  r.check("weights sum to M, 1000 random rate vectors", worst, Comparison::kLess, 1e-9);

  TaskWeightState state;
  double spread = 0.0;
  for (int step = 0; step < 5; ++step) {
    for (const auto& [task, w] : dwa_step(state, {{4, 0.3}, {6, 0.3}, {9, 0.3}})) {
      spread = std::max(spread, std::fabs(w - 1.0));
    }
  }
  r.check("equal losses give unit weights", spread, Comparison::kEqual, 0.0);

  const auto w2 = task_weights(std::vector<double>{1.0, 1.1}, 0.1);
  r.check("M=2 case, first weight", std::fabs(w2[0] - 0.5379), Comparison::kLess, 1e-4);
  r.check("M=2 case, second weight", std::fabs(w2[1] - 1.4621), Comparison::kLess, 1e-4);

  static const std::vector<std::string> kSix = {"denoise", "deblur", "destripe", "histeq", "linstretch", "brightness"};
  for (std::size_t m : {1u, 3u, 6u}) {
    ExperimentConfig c = ExperimentConfig::desk();
    c.patch_size = 8;
    c.steps = 2;
    c.batch_per_task = 1;
    c.tasks.assign(kSix.begin(), kSix.begin() + m);
    const TrainReport t = train(c);
    r.check("backward passes per step, M=" + std::to_string(m), double(t.backward_passes) / double(c.steps),
            Comparison::kEqual, 1.0);
  }
}

void metrics_suite(SuiteReport& r) {
  const Tensor ref = Tensor::full({3, 8, 8}, 0.5);
  r.check("PSNR of a 0.1 offset on unit range", std::fabs(psnr(add_scalar(ref, 0.1), ref) - 20.0), Comparison::kLess,
          1e-9);
  r.check("PSNR of identical images", psnr(ref, ref), Comparison::kEqual, kPsnrSentinel);

  CounterRng rng(kVerifySeed, 6);
  const Tensor a = rng.uniform_tensor({4, 6, 6}, 0.1, 1.0);
  const Tensor b = rng.uniform_tensor({4, 6, 6}, 0.1, 1.0);
  r.check("SAM invariance to per-image scaling", std::fabs(sam(scale(a, 3.7), b) - sam(a, b)), Comparison::kLess,
          1e-12);

  const Tensor band = Tensor::full({1, 4, 4}, 1.0);
  r.check("ERGAS single band with RMSE = 0.1 mean", std::fabs(ergas(add_scalar(band, 0.1), band) - 10.0),
          Comparison::kLess, 1e-9);
}

void model_suite(SuiteReport& r) {
  ExperimentConfig c = ExperimentConfig::desk();
  const Model a = Model::build(c);
  const Model b = Model::build(c);
  r.check("same seed, same checksum", a.checksum() == b.checksum() ? 0.0 : 1.0, Comparison::kEqual, 0.0);

  std::map<std::size_t, double> counts;
  for (std::size_t e : {2u, 4u, 8u}) {
    ExperimentConfig ce = c;
    ce.experts = e;
    counts[e] = double(Model::build(ce).parameter_count());
  }
  r.check("parameter count linear in E", std::fabs((counts[8] - counts[4]) - 2.0 * (counts[4] - counts[2])),
          Comparison::kEqual, 0.0);

  CounterRng rng(kVerifySeed, 7);
  const Tensor x = rng.uniform_tensor({c.channels, 32, 32}, 0.0, 1.0);
  const ModelOutput out = forward(a, x, task_info(Task::kDenoise).test_prompt.data());
  const bool shape_ok = out.prediction.shape() == Shape{c.channels, 32, 32};
  r.check("forward on Cx32x32 returns Cx32x32", shape_ok ? 0.0 : 1.0, Comparison::kEqual, 0.0);
}

const std::map<std::string, std::function<void(SuiteReport&)>>& suites() {
  static const std::map<std::string, std::function<void(SuiteReport&)>> m = {
      {"sinkhorn", sinkhorn_suite}, {"moe-fusion", moe_fusion_suite}, {"mora", mora_suite},
      {"dwa", dwa_suite},           {"metrics", metrics_suite},       {"model", model_suite}};
  return m;
}

const char* comparison_name(Comparison c) {
  switch (c) {
    case Comparison::kLess:
      return "<";
    case Comparison::kGreaterEqual:
      return ">=";
    case Comparison::kEqual:
      return "==";
  }
  return "?";
}

}  // namespace

bool SuiteReport::passed() const {
  return std::all_of(assertions.begin(), assertions.end(), [](const Assertion& a) { return a.passed; });
}

void SuiteReport::check(std::string name, double value, Comparison comparison, double bound) {
  bool ok = false;
  switch (comparison) {
    case Comparison::kLess:
      ok = value < bound;
      break;
    case Comparison::kGreaterEqual:
      ok = value >= bound;
      break;
    case Comparison::kEqual:
      ok = value == bound;
      break;
  }
  assertions.push_back({std::move(name), value, bound, comparison, ok});
}

const std::vector<std::string>& verify_suite_names() {
  static const std::vector<std::string> names = {"sinkhorn", "moe-fusion", "mora", "dwa", "metrics", "model"};
  return names;
}

SuiteReport run_verify_suite(const std::string& name) {
  const auto it = suites().find(name);
  if (it == suites().end()) throw ConfigError("unknown verify suite '" + name + "'");
  SuiteReport r;
  r.suite = name;
  const auto start = std::chrono::steady_clock::now();
  it->second(r);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

std::vector<SuiteReport> run_verify(const std::string& name) {
  std::vector<SuiteReport> out;
  if (name == "all") {
    for (const auto& n : verify_suite_names()) out.push_back(run_verify_suite(n));
  } else {
    out.push_back(run_verify_suite(name));
  }
  return out;
}

nlohmann::json to_json(const std::vector<SuiteReport>& reports) {
  nlohmann::json suites_json = nlohmann::json::array();
  bool all = true;
  for (const auto& r : reports) {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& a : r.assertions) {
      items.push_back({{"name", a.name},
                       {"value", a.value},
                       {"comparison", comparison_name(a.comparison)},
                       {"bound", a.bound},
                       {"passed", a.passed}});
    }
    suites_json.push_back({{"suite", r.suite}, {"passed", r.passed()}, {"seconds", r.seconds}, {"assertions", items}});
    all = all && r.passed();
  }
  return {{"passed", all}, {"suites", suites_json}};
}

}  // namespace bandmoe
