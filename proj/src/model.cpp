#include "bandmoe/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <json.hpp>

namespace bandmoe {

namespace {

constexpr std::size_t kKernelSize = 3;
// Head weights start small so the initial prediction stays near the input.
constexpr double kHeadInitGain = 0.1;
// Stream ids keep each parameter group's draws independent of the others.
enum Stream : std::uint64_t { kEmbed = 1, kSlots, kImage, kStage1, kStage2, kHead, kCls };

Tensor tokens_of(const Tensor& f) { return transpose(reshape(f, {f.dim(0), f.dim(1) * f.dim(2)})); }

Tensor center_channels(const Tensor& f) { return f - reshape(global_avg_pool(f), {f.dim(0), 1, 1}); }

Tensor map_of(const Tensor& tokens, std::size_t h, std::size_t w) {
  return reshape(transpose(tokens), {tokens.dim(1), h, w});
}

}  // namespace

StageParams StageParams::init(CounterRng& rng, const ExperimentConfig& c, std::size_t in_channels) {
  StageParams s;
  s.route = RouteProjections::init(rng, in_channels, c.route_width);
  s.gate = GateParams::init(rng, c.route_width, c.experts);
  s.conv = ConvExpertSet::init(rng, c.experts, c.d, in_channels, kKernelSize);
  s.channel = ChannelExpertSet::init(rng, c.experts, c.d);
  s.mora = MoraParams::init(rng, c.experts, c.d, c.rank);
  return s;
}

std::vector<Tensor> StageParams::parameters() const {
  std::vector<Tensor> out;
  for (const auto& group : {route.parameters(), gate.parameters(), conv.parameters(), channel.parameters(),
                            mora.parameters()}) {
    out.insert(out.end(), group.begin(), group.end());
  }
  return out;
}

void StageParams::collect(NamedTensors& out, const std::string& prefix) const {
  route.collect(out, prefix + ".route");
  gate.collect(out, prefix + ".gate");
  conv.collect(out, prefix + ".conv");
  channel.collect(out, prefix + ".channel");
  mora.collect(out, prefix + ".mora");
}

StageParams StageParams::restore(const Bundle& b, const std::string& prefix, std::size_t experts) {
  return {RouteProjections::restore(b, prefix + ".route"), GateParams::restore(b, prefix + ".gate"),
          ConvExpertSet::restore(b, prefix + ".conv", experts),
          ChannelExpertSet::restore(b, prefix + ".channel", experts),
          MoraParams::restore(b, prefix + ".mora", experts)};
}

StageOutput stage_forward(const Tensor& input, const Tensor& e_p, const Tensor& e_x, const StageParams& stage,
                          std::size_t top_k) {
  StageOutput out;
  out.decision = gate_topk(build_route_token(e_p, e_x, input, stage.route), stage.gate, top_k);
  Tensor f = relu(conv_moe_forward(input, out.decision, stage.conv));
  f = moce_forward(f, out.decision, stage.channel);
  const Tensor attended = mora_fused_attention(tokens_of(f), out.decision, stage.mora);
  out.features = f + map_of(attended, f.dim(1), f.dim(2));
  return out;
}

Model Model::build(const ExperimentConfig& config) {
  config.validate();
  Model m;
  m.config = config;
  const auto rng = [&](Stream s) { return CounterRng(config.seed, s); };
  {
    auto r = rng(kEmbed);
    m.embedder = ChannelEmbedder::init(r, config.embed_hidden, config.d_e);
  }
  {
    auto r = rng(kSlots);
    m.slots = SlotBank::init(r, config.slots, config.d_e, config.d_p, config.tau);
  }
  {
    auto r = rng(kImage);
    m.image_encoder = ImageEncoder::init(r, config.channels);
  }
  {
    auto r = rng(kStage1);
    m.stages[0] = StageParams::init(r, config, config.slots + config.channels);
  }
  {
    auto r = rng(kStage2);
    m.stages[1] = StageParams::init(r, config, config.d);
  }
  {
    auto r = rng(kHead);
    const double sd = kHeadInitGain / std::sqrt(double(config.d * kKernelSize * kKernelSize));
    m.head_kernel = r.normal_tensor({config.channels, config.d, kKernelSize, kKernelSize}, sd, true);
    m.skip_kernel = Tensor::zeros({config.channels, config.channels, kKernelSize, kKernelSize}, true);
    m.gain_w = Tensor::zeros({config.channels, 3 * config.route_width}, true);
    m.gain_b = Tensor::zeros({config.channels}, true);
  }
  {
    auto r = rng(kCls);
    const std::size_t width = 3 * config.route_width;
    m.w_cls = r.normal_tensor({kTaskCount, width}, 1.0 / std::sqrt(double(width)), true);
  }
  return m;
}

NamedTensors Model::named_parameters() const {
  NamedTensors out = {{"embed.w1", embedder.w1},
                      {"embed.b1", embedder.b1},
                      {"embed.w2", embedder.w2},
                      {"embed.b2", embedder.b2},
                      {"slots.prototypes", slots.prototypes},
                      {"slots.w_slot", slots.w_slot},
                      {"slots.w_channel", slots.w_channel}};
  stages[0].collect(out, "stage1");
  stages[1].collect(out, "stage2");
  out.emplace_back("head.kernel", head_kernel);
  out.emplace_back("skip.kernel", skip_kernel);
  out.emplace_back("gain.w", gain_w);
  out.emplace_back("gain.b", gain_b);
  out.emplace_back("cls.w", w_cls);
  return out;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

std::uint64_t Model::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : named_parameters()) {
    for (double v : t.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xffu;
        h *= 0x100000001b3ull;
      }
    }
  }
  return h;
}

Tensor unit_norm(const Tensor& v) { return v / sqrt(add_scalar(sum(square(v)), 1e-12)); }

ModelOutput forward(const Model& model, const Tensor& x, const std::string& prompt) {
  const auto& c = model.config;
  if (x.rank() != 3 || x.dim(1) != x.dim(2) || x.dim(1) % 2 != 0) {
    throw ShapeError("forward: square [C0,H,W] input with even side required", x.shape(), {});
  }
  ModelOutput out;
  const Tensor padded = pad_channels(x, c.channels).tensor;
  const Tensor logits = matching_logits(model.slots, embed_channels(padded, model.embedder));
  out.plan = sinkhorn_log(logits, model.slots.tau, SinkhornOptions::fixed(c.sinkhorn_iters));
  const Tensor aligned = route_channels(out.plan, padded);

  const Tensor e_p = encode_prompt(prompt);
  const Tensor e_x = encode_image(padded, model.image_encoder);
  StageOutput s1 = stage_forward(concat({aligned, padded}, 0), e_p, e_x, model.stages[0], c.top_k);
  StageOutput s2 = stage_forward(avg_pool2(s1.features), e_p, e_x, model.stages[1], c.top_k);
  const Tensor merged = center_channels(upsample2(s2.features) + s1.features);

  const Tensor no_bias = Tensor::zeros({c.channels});
  Tensor prediction = padded + conv2d(merged, model.head_kernel, no_bias) +
                      conv2d(center_channels(padded), model.skip_kernel, no_bias);
  if (c.gain_scale > 0.0) {
    const Tensor z = unit_norm(s1.decision.token);
    const Tensor gain = matmul(model.gain_w, reshape(z, {z.dim(0), 1})) + reshape(model.gain_b, {c.channels, 1});
    prediction = prediction + padded * scale(reshape(gain, {c.channels, 1, 1}), c.gain_scale);
  }
  out.prediction = prediction;
  out.decisions = {std::move(s1.decision), std::move(s2.decision)};
  return out;
}

void save_model(const std::filesystem::path& dir, const Model& model) {
  NamedTensors tensors = model.named_parameters();
  tensors.emplace_back("image.projection", model.image_encoder.projection);
  const nlohmann::json extra = {{"kind", "model"}, {"config", model.config}, {"checksum", model.checksum()}};
  save_bundle(dir, tensors, extra.dump());
}

Model load_model(const std::filesystem::path& dir) {
  const Bundle b = load_bundle(dir);
  const auto extra = nlohmann::json::parse(b.extra_json);
  if (extra.value("kind", "") != "model") throw InputError(dir.string() + " is not a model checkpoint");
  ExperimentConfig config = extra.at("config").get<ExperimentConfig>();
  config.validate();
  Model m;
  m.config = config;
  m.embedder = {trainable(b.at("embed.w1")), trainable(b.at("embed.b1")), trainable(b.at("embed.w2")),
                trainable(b.at("embed.b2"))};
  m.slots.prototypes = trainable(b.at("slots.prototypes"));
  m.slots.w_slot = trainable(b.at("slots.w_slot"));
  m.slots.w_channel = trainable(b.at("slots.w_channel"));
  m.slots.tau = config.tau;
  m.slots.validate();
  m.image_encoder.projection = b.at("image.projection").detach();
  m.stages[0] = StageParams::restore(b, "stage1", config.experts);
  m.stages[1] = StageParams::restore(b, "stage2", config.experts);
  m.head_kernel = trainable(b.at("head.kernel"));
  m.skip_kernel = trainable(b.at("skip.kernel"));
  m.gain_w = trainable(b.at("gain.w"));
  m.gain_b = trainable(b.at("gain.b"));
  m.w_cls = trainable(b.at("cls.w"));
  if (m.checksum() != extra.at("checksum").get<std::uint64_t>()) {
    throw InputError(dir.string() + ": parameter checksum mismatch");
  }
  return m;
}

}  // namespace bandmoe
