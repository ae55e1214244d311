#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "bandmoe/rng.hpp"
#include "bandmoe/tensor.hpp"

namespace bandmoe {

// Channel padding ----------------------------------------------------------

struct PaddedChannels {
  Tensor tensor;            // [C,H,W]
  std::vector<bool> valid;  // true for channels copied from the source
};

// Pads [C0,H,W] to C channels by cyclic repetition of the source channels:
// channel c of the result is channel (c mod C0) of the input.
PaddedChannels pad_channels(const Tensor& x, std::size_t channels);

// Channel embedding --------------------------------------------------------

inline constexpr std::size_t kChannelStatCount = 6;

// [C,H,W] -> [C,6] with columns mean, std, min, max, mean |dx/dh|, mean |dx/dw|.
Tensor channel_statistics(const Tensor& x);

// Shared two-layer perceptron applied to every channel's statistics row.
struct ChannelEmbedder {
  Tensor w1;  // [6, hidden]
  Tensor b1;  // [hidden]
  Tensor w2;  // [hidden, d_e]
  Tensor b2;  // [d_e]

  static ChannelEmbedder init(CounterRng& rng, std::size_t hidden, std::size_t embed_dim);
  std::size_t embed_dim() const { return w2.dim(1); }
  std::vector<Tensor> parameters() const { return {w1, b1, w2, b2}; }
};

struct ChannelEmbeddings {
  Tensor rows;  // [C, d_e]
  std::size_t channels() const { return rows.dim(0); }
};

ChannelEmbeddings embed_channels(const Tensor& x, const ChannelEmbedder& embedder);

// Slot bank and matching logits -------------------------------------------

struct SlotBank {
  Tensor prototypes;  // [S, d_e]
  Tensor w_slot;      // [d_e, d_p]
  Tensor w_channel;   // [d_e, d_p]
  double tau = 0.1;

  // Prototypes ~ N(0, 1/d_e); projections ~ N(0, 1/d_e).
  static SlotBank init(CounterRng& rng, std::size_t slots, std::size_t embed_dim, std::size_t proj_dim, double tau);

  std::size_t slots() const { return prototypes.dim(0); }
  std::size_t embed_dim() const { return prototypes.dim(1); }
  std::size_t proj_dim() const { return w_slot.dim(1); }
  std::vector<Tensor> parameters() const { return {prototypes, w_slot, w_channel}; }
  // Throws ConfigError on a non-positive tau or non-finite parameters.
  void validate() const;
};

void save_slot_bank(const std::filesystem::path& dir, const SlotBank& bank);
SlotBank load_slot_bank(const std::filesystem::path& dir);

// L = (S W_S)(E W_E)^T / sqrt(d_p), shape [S, C].
Tensor matching_logits(const SlotBank& bank, const ChannelEmbeddings& embeddings);

// Log-domain Sinkhorn ------------------------------------------------------

struct SinkhornOptions {
  // Near-degenerate kernels (small tau, square, wide logit range) converge
  // sublinearly, so the verification cap is generous.
  std::size_t max_iters = 100000;
  // Stop once both marginal violations fall below this. Zero or negative
  // runs exactly max_iters iterations.
  double tolerance = 1e-9;
  // Floor applied to each log-sum, the log-domain form of the epsilon guard.
  double log_floor = -60.0;

  static SinkhornOptions fixed(std::size_t iters) { return {iters, 0.0, -60.0}; }
};

struct TransportPlan {
  Tensor plan;  // P [S, C], differentiable w.r.t. the logits
  Tensor u;     // [S]
  Tensor v;     // [C]
  std::size_t iterations_run = 0;
  double row_residual = 0.0;  // max |P 1 - a|
  double col_residual = 0.0;  // max |P^T 1 - b|
  double marginal_residual = 0.0;

  std::size_t slots() const { return plan.dim(0); }
  std::size_t channels() const { return plan.dim(1); }
};

// Entropic transport between slot marginal `a` and channel marginal `b` on
// the Gibbs kernel exp(L / tau), iterated in log space from v = 1.
TransportPlan sinkhorn_log(const Tensor& logits, double tau, std::span<const double> a, std::span<const double> b,
                           const SinkhornOptions& options = {});

// Uniform marginals a = 1/S, b = 1/C.
TransportPlan sinkhorn_log(const Tensor& logits, double tau, const SinkhornOptions& options = {});

// Z = scale * P x with x reshaped to [C, H*W]; scale is S when `rescale`.
Tensor route_channels(const TransportPlan& plan, const Tensor& x, bool rescale = true);

// Shannon entropy -sum P log P of the plan values (0 log 0 = 0).
double plan_entropy(const Tensor& plan);

// Max-norm marginal violations of raw plan values.
struct MarginalResiduals {
  double rows = 0.0;
  double cols = 0.0;
};
MarginalResiduals marginal_residuals(std::span<const double> plan, std::size_t slots, std::size_t channels,
                                     std::span<const double> a, std::span<const double> b);

}  // namespace bandmoe
