#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bandmoe/layers.hpp"
#include "bandmoe/routing.hpp"
#include "bandmoe/tensor.hpp"

namespace bandmoe {

// Convolutional experts -----------------------------------------------------

struct ConvExpertSet {
  std::vector<Tensor> kernels;  // E x [Cout, Cin, k, k]
  std::vector<Tensor> biases;   // E x [Cout]

  static ConvExpertSet init(CounterRng& rng, std::size_t experts, std::size_t c_out, std::size_t c_in,
                            std::size_t kernel_size);
  std::size_t experts() const { return kernels.size(); }
  std::size_t out_channels() const { return kernels.front().dim(0); }
  std::size_t in_channels() const { return kernels.front().dim(1); }
  // Throws ShapeError unless every expert has the shapes of expert 0.
  void validate() const;
  std::vector<Tensor> parameters() const;
  void collect(NamedTensors& out, const std::string& prefix) const;
  static ConvExpertSet restore(const Bundle& bundle, const std::string& prefix, std::size_t experts);
};

struct FusedConv {
  Tensor kernel;  // sum_e alpha_e W_e
  Tensor bias;    // sum_e alpha_e b_e
};

FusedConv fuse_conv_experts(const RoutingDecision& decision, const ConvExpertSet& experts);

// One convolution with the fused kernel and bias.
Tensor conv_moe_forward(const Tensor& features, const RoutingDecision& decision, const ConvExpertSet& experts);

// Channel experts -----------------------------------------------------------

// Expert e maps gap(F) through a C -> C linear layer and a sigmoid to beta_e.
struct ChannelExpertSet {
  std::vector<Linear> gates;

  // Bias starts at `bias` so that beta_e begins near sigmoid(bias).
  static ChannelExpertSet init(CounterRng& rng, std::size_t experts, std::size_t channels, double bias = 2.0);
  std::size_t experts() const { return gates.size(); }
  std::size_t channels() const { return gates.front().in_features(); }
  std::vector<Tensor> parameters() const;
  void collect(NamedTensors& out, const std::string& prefix) const;
  static ChannelExpertSet restore(const Bundle& bundle, const std::string& prefix, std::size_t experts);
};

// beta_e in (0,1)^C for feature map [C,H,W].
Tensor channel_attention(const Tensor& features, const ChannelExpertSet& experts, std::size_t e);

// (sum_e alpha_e beta_e) * F with one broadcast product.
Tensor moce_forward(const Tensor& features, const RoutingDecision& decision, const ChannelExpertSet& experts);

// Low-rank attention experts ------------------------------------------------

struct MoraParams {
  Tensor w_q;                // [d, d_k]
  Tensor w_k;                // [d, d_k]
  std::vector<Tensor> w_v;   // E x [d, d_v]
  std::vector<Tensor> a_q;   // E x [d, r]
  std::vector<Tensor> b_q;   // E x [d_k, r]
  std::vector<Tensor> a_k;   // E x [d, r]
  std::vector<Tensor> b_k;   // E x [d_k, r]

  // A ~ N(0, 0.02^2), B = 0, so every adapter increment starts at zero.
  // d_k = d_v = d.
  static MoraParams init(CounterRng& rng, std::size_t experts, std::size_t d, std::size_t rank);
  std::size_t experts() const { return w_v.size(); }
  std::size_t model_dim() const { return w_q.dim(0); }
  std::size_t key_dim() const { return w_q.dim(1); }
  std::size_t value_dim() const { return w_v.front().dim(1); }
  std::size_t rank() const { return a_q.front().dim(1); }
  void validate() const;
  // Copy with every A and B factor multiplied by `s` (increments scale by s^2).
  MoraParams with_adapter_scale(double s) const;
  std::vector<Tensor> parameters() const;
  void collect(NamedTensors& out, const std::string& prefix) const;
  static MoraParams restore(const Bundle& bundle, const std::string& prefix, std::size_t experts);
};

// softmax((Q0 + dQ)(K0 + dK)^T / sqrt(d_k)) V with V, dQ, dK mixed by alpha
// before the single attention pass. F is [N, d].
Tensor mora_fused_attention(const Tensor& tokens, const RoutingDecision& decision, const MoraParams& params);

// sum_e alpha_e softmax((Q0 + dQ_e)(K0 + dK_e)^T / sqrt(d_k)) V_e, one
// attention pass per selected expert.
Tensor per_expert_attention_oracle(const Tensor& tokens, const RoutingDecision& decision, const MoraParams& params);

// Attention probability maps [N, N]: the fused map, and the alpha-mixture of
// per-expert maps.
Tensor mora_fused_attention_map(const Tensor& tokens, const RoutingDecision& decision, const MoraParams& params);
Tensor per_expert_attention_map(const Tensor& tokens, const RoutingDecision& decision, const MoraParams& params);

// Number of N x N softmax passes executed on this thread.
std::uint64_t attention_pass_count();

struct MoraErrorReport {
  double epsilon = 0.0;
  double adapter_scale = 0.0;  // sqrt(epsilon), applied to every A and B
  double max_abs = 0.0;        // fused vs exact outputs
  double mean_abs = 0.0;
  double map_max_abs = 0.0;    // fused vs mixed attention maps
  double map_mean_abs = 0.0;
};

// Scales every adapter factor by sqrt(eps) and compares fused against exact.
std::vector<MoraErrorReport> mora_error_scaling(const Tensor& tokens, const RoutingDecision& decision,
                                                const MoraParams& params, std::span<const double> epsilons);

// Least-squares slope of log(y) against log(x).
double log_log_slope(std::span<const double> x, std::span<const double> y);

// Expert-set containers -----------------------------------------------------

void save_conv_experts(const std::filesystem::path& dir, const ConvExpertSet& set);
ConvExpertSet load_conv_experts(const std::filesystem::path& dir);
void save_channel_experts(const std::filesystem::path& dir, const ChannelExpertSet& set);
ChannelExpertSet load_channel_experts(const std::filesystem::path& dir);
void save_mora_params(const std::filesystem::path& dir, const MoraParams& params);
MoraParams load_mora_params(const std::filesystem::path& dir);

}  // namespace bandmoe
