#include "bandmoe/routing.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "bandmoe/error.hpp"

namespace bandmoe {

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::vector<std::string> tokenize_prompt(std::string_view prompt) {
  std::vector<std::string> tokens;
  std::string current;
  for (unsigned char c : prompt) {
    if (std::isalnum(c) && c < 0x80) {
      current.push_back(char(std::tolower(c)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

Tensor encode_prompt(std::string_view prompt, std::size_t dim) {
  if (dim == 0) throw ConfigError("encode_prompt: zero dimension");
  const auto tokens = tokenize_prompt(prompt);
  if (tokens.empty()) throw InputError("encode_prompt: prompt has no tokens");
  std::vector<double> counts(dim, 0.0);
  for (const auto& t : tokens) counts[fnv1a64(t) % dim] += 1.0;
  const double norm = std::sqrt(std::inner_product(counts.begin(), counts.end(), counts.begin(), 0.0));
  for (double& c : counts) c /= norm;
  return Tensor::from({dim}, counts);
}

Tensor image_statistics(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("image_statistics: [C,H,W] input required", x.shape(), {});
  const std::size_t c = x.dim(0);
  const Tensor rows = reshape(x, {c, x.dim(1) * x.dim(2)});
  const Tensor mu = mean_lastdim(rows);
  const Tensor sd = sqrt(mean_lastdim(square(rows - reshape(mu, {c, 1}))));
  const Tensor stats = concat({reshape(mu, {c, 1}), reshape(sd, {c, 1}), reshape(min_lastdim(rows), {c, 1}),
                               reshape(max_lastdim(rows), {c, 1})},
                              1);
  return reshape(stats, {4 * c});
}

ImageEncoder ImageEncoder::init(CounterRng& rng, std::size_t channels, std::size_t dim) {
  if (channels == 0 || dim == 0) throw ConfigError("ImageEncoder: zero-width projection");
  return {rng.normal_tensor({4 * channels, dim}, 1.0 / std::sqrt(double(4 * channels)))};
}

Tensor encode_image(const Tensor& x, const ImageEncoder& encoder) {
  const Tensor stats = image_statistics(x);
  if (stats.dim(0) != encoder.projection.dim(0)) {
    throw ShapeError("encode_image: channel count", x.shape(), encoder.projection.shape());
  }
  return reshape(matmul(reshape(stats, {1, stats.dim(0)}), encoder.projection), {encoder.dim()});
}

RouteProjections RouteProjections::init(CounterRng& rng, std::size_t feature_channels, std::size_t width,
                                        std::size_t text_dim, std::size_t image_dim) {
  return {Linear::init(rng, text_dim, width), Linear::init(rng, image_dim, width),
          Linear::init(rng, feature_channels, feature_channels), Linear::init(rng, feature_channels, width)};
}

std::vector<Tensor> RouteProjections::parameters() const {
  return {text.w, text.b, image.w, image.b, context.w, context.b, feature.w, feature.b};
}

void RouteProjections::collect(NamedTensors& out, const std::string& prefix) const {
  text.collect(out, prefix + ".text");
  image.collect(out, prefix + ".image");
  context.collect(out, prefix + ".context");
  feature.collect(out, prefix + ".feature");
}

RouteProjections RouteProjections::restore(const Bundle& bundle, const std::string& prefix) {
  return {Linear::restore(bundle, prefix + ".text"), Linear::restore(bundle, prefix + ".image"),
          Linear::restore(bundle, prefix + ".context"), Linear::restore(bundle, prefix + ".feature")};
}

RouteToken build_route_token(const Tensor& e_p, const Tensor& e_x, const Tensor& features,
                             const RouteProjections& p) {
  const std::size_t d = p.width();
  if (p.image.out_features() != d || p.feature.out_features() != d) {
    throw ShapeError("build_route_token: projection widths", p.image.w.shape(), p.feature.w.shape());
  }
  if (features.rank() != 3 || features.dim(0) != p.context.in_features()) {
    throw ShapeError("build_route_token: feature map", features.shape(), p.context.w.shape());
  }
  const Tensor f = p.context(global_avg_pool(features));
  return {concat({p.text(e_p), p.image(e_x), p.feature(f)}, 0), d};
}

GateParams GateParams::init(CounterRng& rng, std::size_t width, std::size_t experts) {
  if (experts == 0) throw ConfigError("GateParams: zero experts");
  return {Linear::init(rng, 3 * width, width), Linear::init(rng, width, width), Linear::init(rng, width, experts)};
}

std::vector<Tensor> GateParams::parameters() const {
  return {hidden.w, hidden.b, fuse.w, fuse.b, head.w, head.b};
}

void GateParams::collect(NamedTensors& out, const std::string& prefix) const {
  hidden.collect(out, prefix + ".hidden");
  fuse.collect(out, prefix + ".fuse");
  head.collect(out, prefix + ".head");
}

GateParams GateParams::restore(const Bundle& bundle, const std::string& prefix) {
  return {Linear::restore(bundle, prefix + ".hidden"), Linear::restore(bundle, prefix + ".fuse"),
          Linear::restore(bundle, prefix + ".head")};
}

std::vector<double> RoutingDecision::dense_weights() const {
  std::vector<double> dense(expert_count(), 0.0);
  auto w = weights.data();
  for (std::size_t i = 0; i < experts.size(); ++i) dense[experts[i]] = w[i];
  return dense;
}

std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k) {
  if (k == 0 || k > values.size()) {
    throw ConfigError("top-k: k=" + std::to_string(k) + " outside [1, " + std::to_string(values.size()) + "]");
  }
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  idx.resize(k);
  return idx;
}

RoutingDecision decide_from_logits(const Tensor& logits, std::size_t k, const Tensor& token) {
  if (logits.rank() != 1) throw ShapeError("gate logits must be rank 1", logits.shape(), {});
  for (double v : logits.data()) {
    if (!std::isfinite(v)) throw InputError("gate: non-finite logit");
  }
  RoutingDecision d;
  d.token = token;
  d.experts = top_k_indices(logits.data(), k);
  d.logits = logits;
  d.weights = softmax_lastdim(gather(logits, d.experts));
  d.probabilities = softmax_lastdim(logits);
  return d;
}

RoutingDecision gate_topk(const RouteToken& token, const GateParams& gate, std::size_t k) {
  if (token.z.rank() != 1 || token.z.dim(0) != 3 * token.width) {
    throw ShapeError("gate_topk: route token must have length 3d", token.z.shape(), {3 * token.width});
  }
  if (k == 0 || k > gate.experts()) {
    throw ConfigError("gate_topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(gate.experts()) + "]");
  }
  const Tensor h = gate.fuse(relu(gate.hidden(token.z)));
  return decide_from_logits(gate.head(h), k, token.z);
}

Tensor load_balance_loss(std::span<const RoutingDecision> decisions) {
  if (decisions.empty()) throw ConfigError("load_balance_loss: no decisions");
  const std::size_t e = decisions.front().expert_count();
  const std::size_t k = decisions.front().k();
  std::vector<double> f(e, 0.0);
  Tensor p_sum = Tensor::zeros({e});
  for (const auto& d : decisions) {
    if (d.expert_count() != e || d.k() != k) throw ShapeError("load_balance_loss: mixed routing shapes", {e, k},
                                                              {d.expert_count(), d.k()});
    for (std::size_t i : d.experts) f[i] += 1.0;
    p_sum = p_sum + d.probabilities;
  }
  const double n = double(decisions.size());
  for (double& v : f) v /= n;
  const Tensor frac = Tensor::from({e}, f);
  return scale(sum(frac * p_sum), double(e) / (double(k) * n));
}

}  // namespace bandmoe
