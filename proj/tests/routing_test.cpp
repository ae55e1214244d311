#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "bandmoe/error.hpp"
#include "bandmoe/routing.hpp"
#include "bandmoe/tasks.hpp"
#include "support/finite_diff.hpp"

using namespace bandmoe;
using bandmoe::testing::gradient_check;

namespace {

double cosine(const Tensor& a, const Tensor& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

RoutingDecision manual_decision(std::vector<std::size_t> experts, std::vector<double> alpha, std::vector<double> probs) {
  RoutingDecision d;
  d.experts = std::move(experts);
  d.weights = Tensor::from({alpha.size()}, alpha);
  d.logits = Tensor::zeros({probs.size()});
  d.probabilities = Tensor::from({probs.size()}, probs);
  return d;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("bandmoe_routing_" + name);
}

}  // namespace

TEST(Tasks, ElevenCategoriesInClassifierOrder) {
  const auto& tasks = all_tasks();
  ASSERT_EQ(tasks.size(), 11u);
  for (std::size_t i = 0; i < tasks.size(); ++i) EXPECT_EQ(task_index(tasks[i].task), int(i));
  EXPECT_EQ(tasks[0].short_name, "CR");
  EXPECT_EQ(tasks[10].short_name, "STF");
  int synthetic = 0;
  for (const auto& t : tasks) synthetic += t.synthetic;
  EXPECT_EQ(synthetic, 6);
}

TEST(Tasks, ParseAcceptsIdOrShortName) {
  EXPECT_EQ(parse_task("denoise"), Task::kDenoise);
  EXPECT_EQ(parse_task("DS"), Task::kDestripe);
  EXPECT_THROW(parse_task("defog"), ConfigError);
}

TEST(PromptPools, RoundTripAndValidation) {
  const auto path = temp_path("pools.json");
  save_prompt_pools(path, default_prompt_pools());
  EXPECT_EQ(load_prompt_pools(path), default_prompt_pools());

  {
    std::ofstream(path) << "{\"denoise\": [\"a\"], \"nope\": [\"b\"]}";
  }
  EXPECT_THROW(load_prompt_pools(path), ConfigError);
  {
    std::ofstream(path) << "{\"denoise\": []}";
  }
  EXPECT_THROW(load_prompt_pools(path), InputError);
  {
    std::ofstream(path) << "{\"denoise\": [1, 2]";
  }
  EXPECT_THROW(load_prompt_pools(path), InputError);
  EXPECT_THROW(load_prompt_pools(temp_path("missing.json")), InputError);
  std::filesystem::remove(path);
}

TEST(PromptPools, CoverEverySyntheticTask) {
  for (const auto& t : all_tasks()) {
    if (t.synthetic) EXPECT_TRUE(default_prompt_pools().count(std::string(t.id))) << t.id;
  }
}

TEST(EncodePrompt, Fnv1aReferenceValues) {
  EXPECT_EQ(fnv1a64(""), 0xCBF29CE484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xAF63DC4C8601EC8CULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171F73967E8ULL);
}

TEST(EncodePrompt, DeterministicAndUnitNorm) {
  const Tensor a = encode_prompt("Remove the blur");
  const Tensor b = encode_prompt("Remove the blur");
  ASSERT_EQ(a.shape(), (Shape{kTextDim}));
  EXPECT_EQ(a.to_vector(), b.to_vector());
  double norm = 0;
  for (double v : a.data()) norm += v * v;
  EXPECT_NEAR(norm, 1.0, 1e-12);
}

TEST(EncodePrompt, TokenizerIgnoresSpacingCaseAndPunctuation) {
  EXPECT_EQ(encode_prompt("remove the blur").to_vector(), encode_prompt("  remove   the\tblur ").to_vector());
  EXPECT_EQ(encode_prompt("remove the blur").to_vector(), encode_prompt("Remove, THE blur!").to_vector());
  EXPECT_EQ(tokenize_prompt("image's x2-res"), (std::vector<std::string>{"image", "s", "x2", "res"}));
}

TEST(EncodePrompt, EmptyPromptIsInputError) {
  EXPECT_THROW(encode_prompt(""), InputError);
  EXPECT_THROW(encode_prompt(" ,;! "), InputError);
}

TEST(EncodePrompt, FixedTestPromptsArePairwiseDistinct) {
  std::vector<Tensor> codes;
  for (const auto& t : all_tasks()) codes.push_back(encode_prompt(t.test_prompt));
  double min_distance = 2.0;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    for (std::size_t j = i + 1; j < codes.size(); ++j) {
      EXPECT_NE(codes[i].to_vector(), codes[j].to_vector()) << i << "," << j;
      min_distance = std::min(min_distance, 1.0 - cosine(codes[i], codes[j]));
    }
  }
  RecordProperty("min_pairwise_cosine_distance", std::to_string(min_distance));
  EXPECT_GT(min_distance, 0.0);
}

TEST(EncodeImage, ZeroImageGivesZeroCode) {
  CounterRng rng(3);
  const ImageEncoder enc = ImageEncoder::init(rng, 4);
  const Tensor e = encode_image(Tensor::zeros({4, 5, 5}), enc);
  ASSERT_EQ(e.shape(), (Shape{kImageDim}));
  for (double v : e.data()) EXPECT_EQ(v, 0.0);
}

TEST(EncodeImage, StatisticsScaleWithBrightness) {
  CounterRng rng(4);
  const Tensor x = rng.uniform_tensor({3, 6, 6}, 0.1, 0.9);
  const Tensor s1 = image_statistics(x);
  const Tensor s2 = image_statistics(scale(x, 1.5));
  for (std::size_t i = 0; i < s1.numel(); ++i) EXPECT_NEAR(s2[i], 1.5 * s1[i], 1e-12);
  // Channel-major layout: channel 0 mean is the first entry.
  double mean0 = 0;
  for (std::size_t i = 0; i < 36; ++i) mean0 += x[i];
  EXPECT_NEAR(s1[0], mean0 / 36.0, 1e-12);
  const ImageEncoder enc = ImageEncoder::init(rng, 3);
  const Tensor e1 = encode_image(x, enc), e2 = encode_image(scale(x, 1.5), enc);
  for (std::size_t i = 0; i < e1.numel(); ++i) EXPECT_NEAR(e2[i], 1.5 * e1[i], 1e-12);
}

TEST(EncodeImage, DistinctDegradationsGiveDistinctCodes) {
  CounterRng rng(5);
  const Tensor clean = rng.uniform_tensor({2, 8, 8}, 0.0, 1.0);
  const Tensor noisy = clean + rng.normal_tensor({2, 8, 8}, 0.05);
  std::vector<double> blurred(clean.numel());
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t h = 0; h < 8; ++h) {
      for (std::size_t w = 0; w < 8; ++w) {
        double acc = 0;
        int n = 0;
        for (std::size_t hh = (h ? h - 1 : 0); hh <= std::min<std::size_t>(h + 1, 7); ++hh) {
          for (std::size_t ww = (w ? w - 1 : 0); ww <= std::min<std::size_t>(w + 1, 7); ++ww, ++n) {
            acc += clean[(c * 8 + hh) * 8 + ww];
          }
        }
        blurred[(c * 8 + h) * 8 + w] = acc / n;
      }
    }
  }
  const ImageEncoder enc = ImageEncoder::init(rng, 2);
  const Tensor a = encode_image(noisy, enc), b = encode_image(Tensor::from({2, 8, 8}, blurred), enc);
  double diff = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::fabs(a[i] - b[i]));
  EXPECT_GT(diff, 1e-3);
}

TEST(EncodeImage, ChannelMismatchIsShapeError) {
  CounterRng rng(6);
  EXPECT_THROW(encode_image(Tensor::zeros({3, 4, 4}), ImageEncoder::init(rng, 4)), ShapeError);
}

TEST(RouteToken, ZeroInputsAndZeroBiasGiveZeroToken) {
  CounterRng rng(7);
  const RouteProjections p = RouteProjections::init(rng, 8, 16);
  const RouteToken t = build_route_token(Tensor::zeros({kTextDim}), Tensor::zeros({kImageDim}),
                                         Tensor::zeros({8, 4, 4}), p);
  ASSERT_EQ(t.z.numel(), 48u);
  for (double v : t.z.data()) EXPECT_EQ(v, 0.0);
}

TEST(RouteToken, LengthIsThreeTimesWidth) {
  CounterRng rng(8);
  const RouteProjections p = RouteProjections::init(rng, 32, 64);
  const RouteToken t = build_route_token(encode_prompt("remove the blur"), rng.normal_tensor({kImageDim}, 1.0),
                                         rng.normal_tensor({32, 4, 4}, 1.0), p);
  EXPECT_EQ(t.width, 64u);
  EXPECT_EQ(t.z.shape(), (Shape{192}));
}

TEST(RouteToken, DimensionMismatchIsShapeError) {
  CounterRng rng(9);
  const RouteProjections p = RouteProjections::init(rng, 8, 16);
  EXPECT_THROW(build_route_token(Tensor::zeros({32}), Tensor::zeros({kImageDim}), Tensor::zeros({8, 4, 4}), p),
               ShapeError);
  EXPECT_THROW(build_route_token(Tensor::zeros({kTextDim}), Tensor::zeros({kImageDim}), Tensor::zeros({7, 4, 4}), p),
               ShapeError);
}

TEST(RouteToken, GradientMatchesFiniteDifferences) {
  CounterRng rng(10);
  const RouteProjections p = RouteProjections::init(rng, 6, 5, 8, 7);
  const Tensor ep = rng.normal_tensor({8}, 1.0, true);
  const Tensor ex = rng.normal_tensor({7}, 1.0, true);
  const Tensor feat = rng.normal_tensor({6, 3, 3}, 1.0, true);
  const Tensor probe = rng.normal_tensor({15}, 1.0);
  auto f = [&] { return sum(build_route_token(ep, ex, feat, p).z * probe); };
  std::vector<Tensor> params = p.parameters();
  params.insert(params.end(), {ep, ex, feat});
  EXPECT_LT(gradient_check(f, params), 1e-5);
}

TEST(Gate, FullKIsDenseSoftmax) {
  const Tensor logits = Tensor::from({4}, {0.3, -1.0, 2.0, 0.5});
  const RoutingDecision d = decide_from_logits(logits, 4);
  const auto dense = d.dense_weights();
  double z = 0;
  for (double v : logits.data()) z += std::exp(v);
  for (std::size_t e = 0; e < 4; ++e) EXPECT_NEAR(dense[e], std::exp(logits[e]) / z, 1e-15);
}

TEST(Gate, TopTwoOfPeakedLogits) {
  const RoutingDecision d = decide_from_logits(Tensor::from({8}, {5, 1, 1, 1, 1, 1, 1, 1}), 2);
  EXPECT_EQ(d.experts, (std::vector<std::size_t>{0, 1}));
  const double expected = 1.0 / (1.0 + std::exp(-4.0));
  EXPECT_NEAR(d.weights[0], expected, 1e-15);
  EXPECT_NEAR(d.weights[1], 1.0 - expected, 1e-15);
  EXPECT_NEAR(d.weights[0], 0.982, 5e-4);
}

TEST(Gate, TiesGoToLowerIndex) {
  EXPECT_EQ(top_k_indices(std::vector<double>{1, 3, 3, 3}, 2), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(top_k_indices(std::vector<double>{0, 0, 0}, 1), (std::vector<std::size_t>{0}));
}

TEST(Gate, KOutsideRangeIsConfigError) {
  CounterRng rng(11);
  const GateParams g = GateParams::init(rng, 4, 3);
  const RouteToken t{rng.normal_tensor({12}, 1.0), 4};
  EXPECT_THROW(gate_topk(t, g, 4), ConfigError);
  EXPECT_THROW(gate_topk(t, g, 0), ConfigError);
  EXPECT_THROW(gate_topk(RouteToken{Tensor::zeros({11}), 4}, g, 1), ShapeError);
}

TEST(Gate, PropertyWeightsSumToOneWithKDistinctExperts) {
  CounterRng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t e = 1 + rng.below(8);
    const std::size_t k = 1 + rng.below(e);
    const std::size_t d = 2 + rng.below(6);
    const GateParams g = GateParams::init(rng, d, e);
    const RoutingDecision dec = gate_topk(RouteToken{rng.normal_tensor({3 * d}, 1.0), d}, g, k);
    ASSERT_EQ(dec.k(), k);
    EXPECT_EQ(std::set<std::size_t>(dec.experts.begin(), dec.experts.end()).size(), k);
    double total = 0;
    int nonzero = 0;
    for (double a : dec.dense_weights()) {
      EXPECT_GE(a, 0.0);
      total += a;
      nonzero += a > 0.0;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
    EXPECT_EQ(nonzero, int(k));
    for (std::size_t i : dec.experts) EXPECT_LT(i, e);
    // Selected logits dominate the unselected ones.
    const double floor = dec.logits[dec.experts.back()];
    for (std::size_t j = 0; j < e; ++j) {
      if (std::find(dec.experts.begin(), dec.experts.end(), j) == dec.experts.end()) EXPECT_LE(dec.logits[j], floor);
    }
  }
}

TEST(Gate, Deterministic) {
  CounterRng a(13), b(13);
  const GateParams ga = GateParams::init(a, 4, 6), gb = GateParams::init(b, 4, 6);
  const Tensor z = a.normal_tensor({12}, 1.0);
  const RoutingDecision da = gate_topk({z, 4}, ga, 2), db = gate_topk({z, 4}, gb, 2);
  EXPECT_EQ(da.experts, db.experts);
  EXPECT_EQ(da.weights.to_vector(), db.weights.to_vector());
}

TEST(Gate, GradientReachesGateParameters) {
  CounterRng rng(14);
  const GateParams g = GateParams::init(rng, 3, 5);
  const Tensor z = rng.normal_tensor({9}, 1.0, true);
  const Tensor probe = rng.normal_tensor({2}, 1.0);
  const std::vector<std::size_t> fixed = gate_topk({z, 3}, g, 2).experts;
  auto f = [&] {
    const RoutingDecision d = gate_topk({z, 3}, g, 2);
    EXPECT_EQ(d.experts, fixed);
    return sum(d.weights * probe) + scale(sum(square(d.probabilities)), 0.5);
  };
  std::vector<Tensor> params = g.parameters();
  params.push_back(z);
  EXPECT_LT(gradient_check(f, params), 1e-5);
}

TEST(LoadBalance, UniformRoutingGivesOne) {
  const std::vector<double> uniform(8, 1.0 / 8.0);
  std::vector<RoutingDecision> ds;
  for (std::size_t j = 0; j < 4; ++j) ds.push_back(manual_decision({2 * j, 2 * j + 1}, {0.5, 0.5}, uniform));
  EXPECT_NEAR(load_balance_loss(ds).item(), 1.0, 1e-15);
}

TEST(LoadBalance, CollapsedRoutingGivesEOverK) {
  std::vector<double> onehot(8, 0.0);
  onehot[0] = 1.0;
  std::vector<RoutingDecision> ds(3, manual_decision({0, 1}, {1.0, 0.0}, onehot));
  EXPECT_NEAR(load_balance_loss(ds).item(), 4.0, 1e-15);
  std::vector<RoutingDecision> single(2, manual_decision({0}, {1.0}, onehot));
  EXPECT_NEAR(load_balance_loss(single).item(), 8.0, 1e-15);
}

TEST(LoadBalance, MatchesNaiveLoopOracle) {
  CounterRng rng(15);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t e = 2 + rng.below(7), k = 1 + rng.below(e), n = 1 + rng.below(6);
    std::vector<RoutingDecision> ds;
    for (std::size_t i = 0; i < n; ++i) ds.push_back(decide_from_logits(rng.normal_tensor({e}, 2.0), k));
    double oracle = 0.0;
    for (std::size_t x = 0; x < e; ++x) {
      double f = 0, p = 0;
      for (const auto& d : ds) {
        for (std::size_t s : d.experts) f += (s == x);
        p += d.probabilities[x];
      }
      oracle += (f / n) * (p / n);
    }
    oracle *= double(e) / double(k);
    EXPECT_NEAR(load_balance_loss(ds).item(), oracle, 1e-12);
  }
}

TEST(LoadBalance, GradientFlowsThroughProbabilitiesOnly) {
  const Tensor logits = Tensor::from({3}, {0.2, -0.4, 0.9}).set_requires_grad(true);
  auto f = [&] {
    std::vector<RoutingDecision> ds{decide_from_logits(logits, 1)};
    return load_balance_loss(ds);
  };
  EXPECT_LT(gradient_check(f, {logits}), 1e-6);
}

TEST(LoadBalance, EmptyBatchIsConfigError) {
  EXPECT_THROW(load_balance_loss(std::span<const RoutingDecision>{}), ConfigError);
}

TEST(RoutingParams, CollectRestoreRoundTrip) {
  CounterRng rng(16);
  const GateParams g = GateParams::init(rng, 4, 3);
  const RouteProjections p = RouteProjections::init(rng, 5, 4);
  NamedTensors t;
  g.collect(t, "gate");
  p.collect(t, "route");
  const auto dir = temp_path("params");
  save_bundle(dir, t);
  const Bundle b = load_bundle(dir);
  const GateParams g2 = GateParams::restore(b, "gate");
  const RouteProjections p2 = RouteProjections::restore(b, "route");
  const RouteToken tok{rng.normal_tensor({12}, 1.0), 4};
  EXPECT_EQ(gate_topk(tok, g, 2).weights.to_vector(), gate_topk(tok, g2, 2).weights.to_vector());
  EXPECT_EQ(p.feature.w.to_vector(), p2.feature.w.to_vector());
  EXPECT_TRUE(g2.head.w.requires_grad());
  std::filesystem::remove_all(dir);
}
