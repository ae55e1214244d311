#include "bandmoe/moe_ops.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>
#include <json.hpp>

#include "bandmoe/error.hpp"

namespace bandmoe {

namespace {

thread_local std::uint64_t g_attention_passes = 0;

void check_decision(const RoutingDecision& d, std::size_t experts, const char* where) {
  if (d.weights.rank() != 1 || d.weights.dim(0) != d.experts.size()) {
    throw ShapeError(std::string(where) + ": routing weights", d.weights.shape(), {d.experts.size()});
  }
  for (std::size_t e : d.experts) {
    if (e >= experts) {
      throw ConfigError(std::string(where) + ": expert " + std::to_string(e) + " outside a set of " +
                        std::to_string(experts));
    }
  }
}

// sum_i alpha_i * parts[K_i]
Tensor mix(const RoutingDecision& d, const std::vector<Tensor>& parts) {
  Tensor acc;
  for (std::size_t i = 0; i < d.k(); ++i) {
    const Tensor term = parts[d.experts[i]] * d.weight(i);
    acc = acc.defined() ? acc + term : term;
  }
  return acc;
}

Tensor attention_probabilities(const Tensor& q, const Tensor& k) {
  ++g_attention_passes;
  return softmax_lastdim(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(double(q.dim(1)))));
}

void check_tokens(const Tensor& f, const MoraParams& p, const RoutingDecision& d,
                  const char* where) {
  if (f.rank() != 2 || f.dim(0) == 0 || f.dim(1) != p.model_dim()) {
    throw ShapeError(std::string(where) + ": tokens must be [N, d]", f.shape(), p.w_q.shape());
  }
  check_decision(d, p.experts(), where);
}

// F A B^T
Tensor low_rank(const Tensor& f, const Tensor& a, const Tensor& b) { return matmul(matmul(f, a), transpose(b)); }

struct FusedTerms {
  Tensor q, k, v;
};

FusedTerms fused_terms(const Tensor& f, const RoutingDecision& d, const MoraParams& p) {
  std::vector<Tensor> dq(p.experts()), dk(p.experts());
  for (std::size_t e : d.experts) {
    dq[e] = low_rank(f, p.a_q[e], p.b_q[e]);
    dk[e] = low_rank(f, p.a_k[e], p.b_k[e]);
  }
  return {matmul(f, p.w_q) + mix(d, dq), matmul(f, p.w_k) + mix(d, dk), matmul(f, mix(d, p.w_v))};
}

nlohmann::json set_manifest(const char* kind, std::size_t experts) {
  return {{"kind", kind}, {"experts", experts}};
}

std::size_t manifest_experts(const Bundle& b, const char* kind) {
  const auto j = nlohmann::json::parse(b.extra_json);
  if (j.value("kind", std::string()) != kind) throw InputError(std::string("expert set is not of kind ") + kind);
  return j.at("experts").get<std::size_t>();
}

}  // namespace

// ---------------------------------------------------------------------------

ConvExpertSet ConvExpertSet::init(CounterRng& rng, std::size_t experts, std::size_t c_out, std::size_t c_in,
                                  std::size_t kernel_size) {
  if (experts == 0) throw ConfigError("ConvExpertSet: zero experts");
  ConvExpertSet s;
  const double sd = 1.0 / std::sqrt(double(c_in * kernel_size * kernel_size));
  for (std::size_t e = 0; e < experts; ++e) {
    s.kernels.push_back(rng.normal_tensor({c_out, c_in, kernel_size, kernel_size}, sd, true));
    s.biases.push_back(Tensor::zeros({c_out}, true));
  }
  return s;
}

void ConvExpertSet::validate() const {
  if (kernels.empty() || kernels.size() != biases.size()) {
    throw ShapeError("ConvExpertSet: kernel/bias counts", {kernels.size()}, {biases.size()});
  }
  for (std::size_t e = 0; e < kernels.size(); ++e) {
    if (kernels[e].shape() != kernels[0].shape()) throw ShapeError("ConvExpertSet kernels", kernels[0].shape(), kernels[e].shape());
    if (biases[e].shape() != Shape{kernels[0].dim(0)}) throw ShapeError("ConvExpertSet biases", {kernels[0].dim(0)}, biases[e].shape());
  }
}

std::vector<Tensor> ConvExpertSet::parameters() const {
  std::vector<Tensor> out(kernels);
  out.insert(out.end(), biases.begin(), biases.end());
  return out;
}

void ConvExpertSet::collect(NamedTensors& out, const std::string& prefix) const {
  for (std::size_t e = 0; e < experts(); ++e) {
    out.emplace_back(prefix + ".kernel" + std::to_string(e), kernels[e]);
    out.emplace_back(prefix + ".bias" + std::to_string(e), biases[e]);
  }
}

ConvExpertSet ConvExpertSet::restore(const Bundle& bundle, const std::string& prefix, std::size_t experts) {
  ConvExpertSet s;
  for (std::size_t e = 0; e < experts; ++e) {
    s.kernels.push_back(trainable(bundle.at(prefix + ".kernel" + std::to_string(e))));
    s.biases.push_back(trainable(bundle.at(prefix + ".bias" + std::to_string(e))));
  }
  s.validate();
  return s;
}

FusedConv fuse_conv_experts(const RoutingDecision& decision, const ConvExpertSet& experts) {
  check_decision(decision, experts.experts(), "fuse_conv_experts");
  return {mix(decision, experts.kernels), mix(decision, experts.biases)};
}

Tensor conv_moe_forward(const Tensor& features, const RoutingDecision& decision, const ConvExpertSet& experts) {
  if (features.rank() != 3 || features.dim(0) != experts.in_channels()) {
    throw ShapeError("conv_moe_forward", features.shape(), experts.kernels.front().shape());
  }
  const FusedConv fused = fuse_conv_experts(decision, experts);
  return conv2d(features, fused.kernel, fused.bias);
}

// ---------------------------------------------------------------------------

ChannelExpertSet ChannelExpertSet::init(CounterRng& rng, std::size_t experts, std::size_t channels, double bias) {
  if (experts == 0) throw ConfigError("ChannelExpertSet: zero experts");
  ChannelExpertSet s;
  for (std::size_t e = 0; e < experts; ++e) s.gates.push_back(Linear::init(rng, channels, channels, -1.0, bias));
  return s;
}

std::vector<Tensor> ChannelExpertSet::parameters() const {
  std::vector<Tensor> out;
  for (const auto& g : gates) {
    out.push_back(g.w);
    out.push_back(g.b);
  }
  return out;
}

void ChannelExpertSet::collect(NamedTensors& out, const std::string& prefix) const {
  for (std::size_t e = 0; e < experts(); ++e) gates[e].collect(out, prefix + ".gate" + std::to_string(e));
}

ChannelExpertSet ChannelExpertSet::restore(const Bundle& bundle, const std::string& prefix, std::size_t experts) {
  ChannelExpertSet s;
  for (std::size_t e = 0; e < experts; ++e) s.gates.push_back(Linear::restore(bundle, prefix + ".gate" + std::to_string(e)));
  return s;
}

Tensor channel_attention(const Tensor& features, const ChannelExpertSet& experts, std::size_t e) {
  if (features.rank() != 3 || features.dim(0) != experts.channels()) {
    throw ShapeError("channel_attention", features.shape(), experts.gates.front().w.shape());
  }
  return sigmoid(experts.gates.at(e)(global_avg_pool(features)));
}

Tensor moce_forward(const Tensor& features, const RoutingDecision& decision, const ChannelExpertSet& experts) {
  check_decision(decision, experts.experts(), "moce_forward");
  std::vector<Tensor> betas(experts.experts());
  for (std::size_t e : decision.experts) betas[e] = channel_attention(features, experts, e);
  const Tensor beta = mix(decision, betas);
  return reshape(beta, {features.dim(0), 1, 1}) * features;
}

// ---------------------------------------------------------------------------

MoraParams MoraParams::init(CounterRng& rng, std::size_t experts, std::size_t d, std::size_t rank) {
  if (experts == 0) throw ConfigError("MoraParams: zero experts");
  if (rank == 0) throw ConfigError("MoraParams: rank must be at least 1");
  MoraParams p;
  const double sd = 1.0 / std::sqrt(double(d));
  p.w_q = rng.normal_tensor({d, d}, sd, true);
  p.w_k = rng.normal_tensor({d, d}, sd, true);
  for (std::size_t e = 0; e < experts; ++e) {
    p.w_v.push_back(rng.normal_tensor({d, d}, sd, true));
    p.a_q.push_back(rng.normal_tensor({d, rank}, 0.02, true));
    p.b_q.push_back(Tensor::zeros({d, rank}, true));
    p.a_k.push_back(rng.normal_tensor({d, rank}, 0.02, true));
    p.b_k.push_back(Tensor::zeros({d, rank}, true));
  }
  return p;
}

void MoraParams::validate() const {
  const std::size_t e = w_v.size();
  if (e == 0 || a_q.size() != e || b_q.size() != e || a_k.size() != e || b_k.size() != e) {
    throw ShapeError("MoraParams: per-expert tensor counts", {e}, {a_q.size(), b_q.size(), a_k.size(), b_k.size()});
  }
  if (w_k.shape() != w_q.shape()) throw ShapeError("MoraParams: W_K", w_q.shape(), w_k.shape());
  const std::size_t d = model_dim(), dk = key_dim(), r = rank();
  if (r == 0) throw ConfigError("MoraParams: rank must be at least 1");
  for (std::size_t i = 0; i < e; ++i) {
    if (w_v[i].rank() != 2 || w_v[i].dim(0) != d || w_v[i].shape() != w_v[0].shape()) throw ShapeError("MoraParams: W_V", {d, value_dim()}, w_v[i].shape());
    for (const Tensor* a : {&a_q[i], &a_k[i]}) {
      if (a->shape() != Shape{d, r}) throw ShapeError("MoraParams: A factor", {d, r}, a->shape());
    }
    for (const Tensor* b : {&b_q[i], &b_k[i]}) {
      if (b->shape() != Shape{dk, r}) throw ShapeError("MoraParams: B factor", {dk, r}, b->shape());
    }
  }
}

MoraParams MoraParams::with_adapter_scale(double s) const {
  MoraParams p = *this;
  for (auto* group : {&p.a_q, &p.b_q, &p.a_k, &p.b_k}) {
    for (Tensor& t : *group) t = scale(t.detach(), s);
  }
  return p;
}

std::vector<Tensor> MoraParams::parameters() const {
  std::vector<Tensor> out{w_q, w_k};
  for (const auto* group : {&w_v, &a_q, &b_q, &a_k, &b_k}) out.insert(out.end(), group->begin(), group->end());
  return out;
}

void MoraParams::collect(NamedTensors& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".w_q", w_q);
  out.emplace_back(prefix + ".w_k", w_k);
  for (std::size_t e = 0; e < experts(); ++e) {
    const std::string s = std::to_string(e);
    out.emplace_back(prefix + ".w_v" + s, w_v[e]);
    out.emplace_back(prefix + ".a_q" + s, a_q[e]);
    out.emplace_back(prefix + ".b_q" + s, b_q[e]);
    out.emplace_back(prefix + ".a_k" + s, a_k[e]);
    out.emplace_back(prefix + ".b_k" + s, b_k[e]);
  }
}

MoraParams MoraParams::restore(const Bundle& bundle, const std::string& prefix, std::size_t experts) {
  MoraParams p;
  p.w_q = trainable(bundle.at(prefix + ".w_q"));
  p.w_k = trainable(bundle.at(prefix + ".w_k"));
  for (std::size_t e = 0; e < experts; ++e) {
    const std::string s = std::to_string(e);
    p.w_v.push_back(trainable(bundle.at(prefix + ".w_v" + s)));
    p.a_q.push_back(trainable(bundle.at(prefix + ".a_q" + s)));
    p.b_q.push_back(trainable(bundle.at(prefix + ".b_q" + s)));
    p.a_k.push_back(trainable(bundle.at(prefix + ".a_k" + s)));
    p.b_k.push_back(trainable(bundle.at(prefix + ".b_k" + s)));
  }
  p.validate();
  return p;
}

Tensor mora_fused_attention_map(const Tensor& tokens, const RoutingDecision& decision, const MoraParams& params) {
  check_tokens(tokens, params, decision, "mora_fused_attention");
  const FusedTerms t = fused_terms(tokens, decision, params);
  return attention_probabilities(t.q, t.k);
}

Tensor mora_fused_attention(const Tensor& tokens, const RoutingDecision& decision, const MoraParams& params) {
  check_tokens(tokens, params, decision, "mora_fused_attention");
  const FusedTerms t = fused_terms(tokens, decision, params);
  return matmul(attention_probabilities(t.q, t.k), t.v);
}

namespace {

template <typename PerExpert>
Tensor per_expert_mixture(const Tensor& f, const RoutingDecision& d, const MoraParams& p, PerExpert&& term) {
  const Tensor q0 = matmul(f, p.w_q);
  const Tensor k0 = matmul(f, p.w_k);
  Tensor acc;
  for (std::size_t i = 0; i < d.k(); ++i) {
    const std::size_t e = d.experts[i];
    const Tensor probs =
        attention_probabilities(q0 + low_rank(f, p.a_q[e], p.b_q[e]), k0 + low_rank(f, p.a_k[e], p.b_k[e]));
    const Tensor t = term(probs, e) * d.weight(i);
    acc = acc.defined() ? acc + t : t;
  }
  return acc;
}

}  // namespace

Tensor per_expert_attention_oracle(const Tensor& tokens, const RoutingDecision& decision, const MoraParams& params) {
  check_tokens(tokens, params, decision, "per_expert_attention_oracle");
  return per_expert_mixture(tokens, decision, params,
                            [&](const Tensor& probs, std::size_t e) { return matmul(probs, matmul(tokens, params.w_v[e])); });
}

Tensor per_expert_attention_map(const Tensor& tokens, const RoutingDecision& decision, const MoraParams& params) {
  check_tokens(tokens, params, decision, "per_expert_attention_map");
  return per_expert_mixture(tokens, decision, params, [](const Tensor& probs, std::size_t) { return probs; });
}

std::uint64_t attention_pass_count() { return g_attention_passes; }

namespace {

std::pair<double, double> max_mean_abs(const Tensor& a, const Tensor& b) {
  auto x = a.data();
  auto y = b.data();
  double mx = 0.0, total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = std::fabs(x[i] - y[i]);
    mx = std::max(mx, d);
    total += d;
  }
  return {mx, total / double(x.size())};
}

}  // namespace

std::vector<MoraErrorReport> mora_error_scaling(const Tensor& tokens, const RoutingDecision& decision,
                                                const MoraParams& params, std::span<const double> epsilons) {
  std::vector<MoraErrorReport> reports;
  const Tensor f = tokens.detach();
  for (double eps : epsilons) {
    if (!(eps >= 0.0) || !std::isfinite(eps)) throw ConfigError("mora_error_scaling: epsilon must be finite and >= 0");
    MoraErrorReport r;
    r.epsilon = eps;
    r.adapter_scale = std::sqrt(eps);
    const MoraParams scaled = params.with_adapter_scale(r.adapter_scale);
    std::tie(r.max_abs, r.mean_abs) =
        max_mean_abs(mora_fused_attention(f, decision, scaled), per_expert_attention_oracle(f, decision, scaled));
    std::tie(r.map_max_abs, r.map_mean_abs) = max_mean_abs(mora_fused_attention_map(f, decision, scaled),
                                                           per_expert_attention_map(f, decision, scaled));
    reports.push_back(r);
  }
  return reports;
}

double log_log_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("log_log_slope: need two or more paired points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = double(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw DomainError("log_log_slope: values must be positive");
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double denom = n * sxx - sx * sx;
  if (denom == 0.0) throw DomainError("log_log_slope: x values are identical");
  return (n * sxy - sx * sy) / denom;
}

// ---------------------------------------------------------------------------

void save_conv_experts(const std::filesystem::path& dir, const ConvExpertSet& set) {
  NamedTensors t;
  set.collect(t, "conv");
  save_bundle(dir, t, set_manifest("conv", set.experts()).dump());
}

ConvExpertSet load_conv_experts(const std::filesystem::path& dir) {
  const Bundle b = load_bundle(dir);
  return ConvExpertSet::restore(b, "conv", manifest_experts(b, "conv"));
}

void save_channel_experts(const std::filesystem::path& dir, const ChannelExpertSet& set) {
  NamedTensors t;
  set.collect(t, "channel");
  save_bundle(dir, t, set_manifest("channel", set.experts()).dump());
}

ChannelExpertSet load_channel_experts(const std::filesystem::path& dir) {
  const Bundle b = load_bundle(dir);
  return ChannelExpertSet::restore(b, "channel", manifest_experts(b, "channel"));
}

void save_mora_params(const std::filesystem::path& dir, const MoraParams& params) {
  NamedTensors t;
  params.collect(t, "mora");
  save_bundle(dir, t, set_manifest("mora", params.experts()).dump());
}

MoraParams load_mora_params(const std::filesystem::path& dir) {
  const Bundle b = load_bundle(dir);
  return MoraParams::restore(b, "mora", manifest_experts(b, "mora"));
}

}  // namespace bandmoe
