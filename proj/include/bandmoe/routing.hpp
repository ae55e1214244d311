#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bandmoe/layers.hpp"
#include "bandmoe/rng.hpp"
#include "bandmoe/tensor.hpp"

namespace bandmoe {

inline constexpr std::size_t kTextDim = 64;
inline constexpr std::size_t kImageDim = 64;

// Prompt encoder ------------------------------------------------------------

// FNV-1a, 64-bit.
std::uint64_t fnv1a64(std::string_view bytes);

// Lowercased maximal runs of ASCII alphanumerics.
std::vector<std::string> tokenize_prompt(std::string_view prompt);

// Hashed bag of words: token t increments bucket fnv1a64(t) mod dim, and the
// counts are L2-normalized. Throws InputError on a prompt with no tokens.
Tensor encode_prompt(std::string_view prompt, std::size_t dim = kTextDim);

// Image encoder -------------------------------------------------------------

// [C,H,W] -> [4C]: per-channel mean, std, min, max, channel-major.
Tensor image_statistics(const Tensor& x);

// Frozen linear projection of image_statistics to d_image.
struct ImageEncoder {
  Tensor projection;  // [4C, d_image], never trained

  static ImageEncoder init(CounterRng& rng, std::size_t channels, std::size_t dim = kImageDim);
  std::size_t channels() const { return projection.dim(0) / 4; }
  std::size_t dim() const { return projection.dim(1); }
};

Tensor encode_image(const Tensor& x, const ImageEncoder& encoder);

// Route token ---------------------------------------------------------------

struct RouteProjections {
  Linear text;     // d_text -> d
  Linear image;    // d_image -> d
  Linear context;  // C_l -> C_l, applied to the pooled feature map
  Linear feature;  // C_l -> d

  static RouteProjections init(CounterRng& rng, std::size_t feature_channels, std::size_t width,
                               std::size_t text_dim = kTextDim, std::size_t image_dim = kImageDim);
  std::size_t width() const { return text.out_features(); }
  std::vector<Tensor> parameters() const;
  void collect(NamedTensors& out, const std::string& prefix) const;
  static RouteProjections restore(const Bundle& bundle, const std::string& prefix);
};

struct RouteToken {
  Tensor z;  // [3d] = [z_p; z_x; z_f]
  std::size_t width = 0;
};

// f = context(gap(F_l)); z = [text(e_p); image(e_x); feature(f)].
RouteToken build_route_token(const Tensor& e_p, const Tensor& e_x, const Tensor& features,
                             const RouteProjections& projections);

// Top-k gate ----------------------------------------------------------------

struct GateParams {
  Linear hidden;  // 3d -> d
  Linear fuse;    // d -> d, output h
  Linear head;    // d -> E gate logits

  static GateParams init(CounterRng& rng, std::size_t width, std::size_t experts);
  std::size_t experts() const { return head.out_features(); }
  std::vector<Tensor> parameters() const;
  void collect(NamedTensors& out, const std::string& prefix) const;
  static GateParams restore(const Bundle& bundle, const std::string& prefix);
};

struct RoutingDecision {
  Tensor token;                      // z, [3d]
  std::vector<std::size_t> experts;  // K, ordered by decreasing logit
  Tensor weights;                    // alpha over K, [k], sums to 1
  Tensor logits;                     // raw gate logits, [E]
  Tensor probabilities;              // dense softmax of the logits, [E]

  std::size_t k() const { return experts.size(); }
  std::size_t expert_count() const { return logits.dim(0); }
  // Alpha_e as a shape-{1} tensor for the i-th selected expert.
  Tensor weight(std::size_t i) const { return select(weights, i); }
  // Dense alpha over all E experts (zeros outside K), raw values.
  std::vector<double> dense_weights() const;
};

// Indices of the k largest values; ties go to the lower index.
std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k);

// Builds a decision from explicit logits (h -> head already applied).
RoutingDecision decide_from_logits(const Tensor& logits, std::size_t k, const Tensor& token = Tensor());

// logits = head(fuse(relu(hidden(z)))); softmax over the top-k logits only.
RoutingDecision gate_topk(const RouteToken& token, const GateParams& gate, std::size_t k);

// (E / k) * sum_e f_e p_e with f_e the fraction of decisions selecting e
// and p_e the mean dense gate probability. Uniform routing gives 1.
Tensor load_balance_loss(std::span<const RoutingDecision> decisions);

}  // namespace bandmoe
