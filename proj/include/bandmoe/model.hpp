#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bandmoe/band_align.hpp"
#include "bandmoe/config.hpp"
#include "bandmoe/moe_ops.hpp"
#include "bandmoe/routing.hpp"
#include "bandmoe/tensor_io.hpp"

namespace bandmoe {

// One routed stage: a top-k decision from the stage input, then
// ConvMoE -> ReLU -> MoCE -> MoRA residual over the spatial tokens.
struct StageParams {
  RouteProjections route;
  GateParams gate;
  ConvExpertSet conv;
  ChannelExpertSet channel;
  MoraParams mora;

  static StageParams init(CounterRng& rng, const ExperimentConfig& config, std::size_t in_channels);
  std::vector<Tensor> parameters() const;
  void collect(NamedTensors& out, const std::string& prefix) const;
  static StageParams restore(const Bundle& bundle, const std::string& prefix, std::size_t experts);
};

struct StageOutput {
  Tensor features;  // [d, h, w]
  RoutingDecision decision;
};

StageOutput stage_forward(const Tensor& input, const Tensor& e_p, const Tensor& e_x, const StageParams& stage,
                          std::size_t top_k);

// Miniature two-stage encoder/decoder:
//   pad -> band alignment -> stage 1 on [slots; padded input] -> avg_pool2
//   -> stage 2 -> upsample2 + skip -> 3x3 head to C channels -> + padded input.
// The head is mean-preserving: it sees features centered per channel and has
// no bias, so the image mean moves only through the multiplicative gain path.
// A zero-initialized 3x3 skip convolution on the mean-centered input lets
// the output depend on the raw neighbourhood from the first step.
struct Model {
  ExperimentConfig config;
  ChannelEmbedder embedder;
  SlotBank slots;
  ImageEncoder image_encoder;  // frozen
  std::array<StageParams, 2> stages;
  Tensor head_kernel;  // [C, d, 3, 3]
  Tensor skip_kernel;  // [C, C, 3, 3], zero at init
  Tensor gain_w;       // [C, 3 * route_width], zero at init
  Tensor gain_b;       // [C], zero at init
  Tensor w_cls;        // [11, 3 * route_width]

  // Deterministic in config.seed. Throws ConfigError on an invalid config.
  static Model build(const ExperimentConfig& config);

  // Trainable tensors, named and in a fixed order.
  NamedTensors named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  // FNV-1a over the little-endian bytes of every trainable value, in order.
  std::uint64_t checksum() const;
};

// v / sqrt(|v|^2 + 1e-12).
Tensor unit_norm(const Tensor& v);

struct ModelOutput {
  Tensor prediction;  // [C, H, W]
  TransportPlan plan;
  std::array<RoutingDecision, 2> decisions;
};

// `x` is [C0, H, W] with C0 <= C; the prediction always has C channels.
ModelOutput forward(const Model& model, const Tensor& x, const std::string& prompt);

// Checkpoint directory: manifest.json carrying the config plus one tensor
// container per parameter (the frozen image encoder included).
void save_model(const std::filesystem::path& dir, const Model& model);
Model load_model(const std::filesystem::path& dir);

}  // namespace bandmoe
