#include "bandmoe/band_align.hpp"

#include <cmath>
#include <json.hpp>

#include "bandmoe/tensor_io.hpp"

namespace bandmoe {

PaddedChannels pad_channels(const Tensor& x, std::size_t channels) {
  if (x.rank() != 3) throw ShapeError("pad_channels: [C,H,W] input required", x.shape(), {});
  const std::size_t c0 = x.dim(0);
  if (c0 > channels) {
    throw ConfigError("pad_channels: input has " + std::to_string(c0) + " channels, more than the unified " +
                      std::to_string(channels));
  }
  PaddedChannels out;
  out.valid.assign(channels, false);
  for (std::size_t c = 0; c < c0; ++c) out.valid[c] = true;
  if (c0 == channels) {
    out.tensor = x;
    return out;
  }
  std::vector<Tensor> parts;
  for (std::size_t c = 0; c < channels; ++c) parts.push_back(narrow(x, 0, c % c0, 1));
  out.tensor = concat(parts, 0);
  return out;
}

Tensor channel_statistics(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("channel_statistics: [C,H,W] input required", x.shape(), {});
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const Tensor rows = reshape(x, {c, h * w});
  const Tensor mu = mean_lastdim(rows);
  const Tensor centered = rows - reshape(mu, {c, 1});
  const Tensor sd = sqrt(mean_lastdim(square(centered)));
  const Tensor lo = min_lastdim(rows);
  const Tensor hi = max_lastdim(rows);

  auto mean_abs_diff = [&](std::size_t axis, std::size_t len) {
    if (len < 2) return Tensor::zeros({c});
    const Tensor d = narrow(x, axis, 1, len - 1) - narrow(x, axis, 0, len - 1);
    return mean_lastdim(reshape(abs(d), {c, d.numel() / c}));
  };
  const Tensor gh = mean_abs_diff(1, h);
  const Tensor gw = mean_abs_diff(2, w);

  std::vector<Tensor> cols;
  for (const Tensor* t : {&mu, &sd, &lo, &hi, &gh, &gw}) cols.push_back(reshape(*t, {c, 1}));
  return concat(cols, 1);
}

ChannelEmbedder ChannelEmbedder::init(CounterRng& rng, std::size_t hidden, std::size_t embed_dim) {
  ChannelEmbedder e;
  e.w1 = rng.normal_tensor({kChannelStatCount, hidden}, 1.0 / std::sqrt(double(kChannelStatCount)), true);
  e.b1 = Tensor::zeros({hidden}, true);
  e.w2 = rng.normal_tensor({hidden, embed_dim}, 1.0 / std::sqrt(double(hidden)), true);
  e.b2 = Tensor::zeros({embed_dim}, true);
  return e;
}

ChannelEmbeddings embed_channels(const Tensor& x, const ChannelEmbedder& f) {
  const Tensor stats = channel_statistics(x);
  const Tensor hidden = relu(matmul(stats, f.w1) + f.b1);
  return {matmul(hidden, f.w2) + f.b2};
}

SlotBank SlotBank::init(CounterRng& rng, std::size_t slots, std::size_t embed_dim, std::size_t proj_dim, double tau) {
  SlotBank bank;
  const double sd = 1.0 / std::sqrt(double(embed_dim));
  bank.prototypes = rng.normal_tensor({slots, embed_dim}, sd, true);
  bank.w_slot = rng.normal_tensor({embed_dim, proj_dim}, sd, true);
  bank.w_channel = rng.normal_tensor({embed_dim, proj_dim}, sd, true);
  bank.tau = tau;
  bank.validate();
  return bank;
}

void SlotBank::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("slot bank: tau must be positive, got " + std::to_string(tau));
  for (const Tensor* t : {&prototypes, &w_slot, &w_channel}) {
    for (double v : t->data()) {
      if (!std::isfinite(v)) throw ConfigError("slot bank: non-finite parameter");
    }
  }
  if (w_slot.dim(0) != embed_dim() || w_channel.dim(0) != embed_dim() || w_channel.dim(1) != proj_dim()) {
    throw ShapeError("slot bank projections", w_slot.shape(), w_channel.shape());
  }
}

void save_slot_bank(const std::filesystem::path& dir, const SlotBank& bank) {
  nlohmann::json extra = {
      {"slots", bank.slots()}, {"d_e", bank.embed_dim()}, {"d_p", bank.proj_dim()}, {"tau", bank.tau}};
  save_bundle(dir, {{"prototypes", bank.prototypes}, {"w_slot", bank.w_slot}, {"w_channel", bank.w_channel}},
              extra.dump());
}

SlotBank load_slot_bank(const std::filesystem::path& dir) {
  Bundle b = load_bundle(dir);
  auto extra = nlohmann::json::parse(b.extra_json);
  SlotBank bank;
  bank.prototypes = b.at("prototypes").detach().set_requires_grad(true);
  bank.w_slot = b.at("w_slot").detach().set_requires_grad(true);
  bank.w_channel = b.at("w_channel").detach().set_requires_grad(true);
  bank.tau = extra.at("tau").get<double>();
  if (bank.slots() != extra.at("slots").get<std::size_t>() || bank.proj_dim() != extra.at("d_p").get<std::size_t>()) {
    throw InputError("slot bank manifest disagrees with stored tensors");
  }
  bank.validate();
  return bank;
}

Tensor matching_logits(const SlotBank& bank, const ChannelEmbeddings& e) {
  if (e.rows.rank() != 2 || e.rows.dim(1) != bank.embed_dim()) {
    throw ShapeError("matching_logits", bank.prototypes.shape(), e.rows.shape());
  }
  const Tensor slots = matmul(bank.prototypes, bank.w_slot);
  const Tensor chans = matmul(e.rows, bank.w_channel);
  return scale(matmul(slots, transpose(chans)), 1.0 / std::sqrt(double(bank.proj_dim())));
}

MarginalResiduals marginal_residuals(std::span<const double> p, std::size_t s, std::size_t c,
                                     std::span<const double> a, std::span<const double> b) {
  MarginalResiduals r;
  std::vector<double> col(c, 0.0);
  for (std::size_t i = 0; i < s; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      row += p[i * c + j];
      col[j] += p[i * c + j];
    }
    r.rows = std::max(r.rows, std::fabs(row - a[i]));
  }
  for (std::size_t j = 0; j < c; ++j) r.cols = std::max(r.cols, std::fabs(col[j] - b[j]));
  return r;
}

namespace {

void check_marginal(std::span<const double> m, std::size_t n, const char* name) {
  if (m.size() != n) throw ShapeError(std::string("sinkhorn_log: marginal ") + name, {m.size()}, {n});
  double total = 0.0;
  for (double v : m) {
    if (!(v > 0.0)) throw ConfigError(std::string("sinkhorn_log: marginal ") + name + " must be positive");
    total += v;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw ConfigError(std::string("sinkhorn_log: marginal ") + name + " must sum to 1");
}

}  // namespace

TransportPlan sinkhorn_log(const Tensor& logits, double tau, std::span<const double> a, std::span<const double> b,
                           const SinkhornOptions& options) {
  if (logits.rank() != 2) throw ShapeError("sinkhorn_log: rank-2 logits required", logits.shape(), {});
  if (!(tau > 0.0)) throw ConfigError("sinkhorn_log: tau must be positive, got " + std::to_string(tau));
  if (options.max_iters == 0) throw ConfigError("sinkhorn_log: at least one iteration required");
  const std::size_t s = logits.dim(0), c = logits.dim(1);
  check_marginal(a, s, "a");
  check_marginal(b, c, "b");
  for (double v : logits.data()) {
    if (!std::isfinite(v)) throw InputError("sinkhorn_log: non-finite logit");
  }

  std::vector<double> la(s), lb(c);
  for (std::size_t i = 0; i < s; ++i) la[i] = std::log(a[i]);
  for (std::size_t j = 0; j < c; ++j) lb[j] = std::log(b[j]);
  const Tensor log_a = Tensor::from({s}, la);
  const Tensor log_b = Tensor::from({c}, lb);

  const Tensor log_k = scale(logits, 1.0 / tau);
  const Tensor log_kt = transpose(log_k);
  Tensor log_u;
  Tensor log_v = Tensor::zeros({c});

  // Raw-value copy of the plan for the stopping rule.
  auto residuals = [&](const Tensor& lu, const Tensor& lv) {
    std::vector<double> p(s * c);
    auto k = log_k.data();
    auto u = lu.data();
    auto v = lv.data();
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t j = 0; j < c; ++j) p[i * c + j] = std::exp(u[i] + k[i * c + j] + v[j]);
    }
    return marginal_residuals(p, s, c, a, b);
  };

  TransportPlan out;
  MarginalResiduals res;
  for (std::size_t t = 0; t < options.max_iters; ++t) {
    log_u = log_a - clamp_min(logsumexp_lastdim(log_k + log_v), options.log_floor);
    log_v = log_b - clamp_min(logsumexp_lastdim(log_kt + log_u), options.log_floor);
    out.iterations_run = t + 1;
    if (options.tolerance > 0.0 || t + 1 == options.max_iters) {
      res = residuals(log_u, log_v);
      if (res.rows < options.tolerance && res.cols < options.tolerance) break;
    }
  }

  out.plan = exp(reshape(log_u, {s, 1}) + log_k + log_v);
  out.u = exp(log_u);
  out.v = exp(log_v);
  out.row_residual = res.rows;
  out.col_residual = res.cols;
  out.marginal_residual = std::max(res.rows, res.cols);
  return out;
}

TransportPlan sinkhorn_log(const Tensor& logits, double tau, const SinkhornOptions& options) {
  if (logits.rank() != 2) throw ShapeError("sinkhorn_log: rank-2 logits required", logits.shape(), {});
  const std::vector<double> a(logits.dim(0), 1.0 / double(logits.dim(0)));
  const std::vector<double> b(logits.dim(1), 1.0 / double(logits.dim(1)));
  return sinkhorn_log(logits, tau, a, b, options);
}

Tensor route_channels(const TransportPlan& plan, const Tensor& x, bool rescale) {
  if (x.rank() != 3 || x.dim(0) != plan.channels()) throw ShapeError("route_channels", plan.plan.shape(), x.shape());
  const std::size_t h = x.dim(1), w = x.dim(2), s = plan.slots();
  Tensor z = matmul(plan.plan, reshape(x, {x.dim(0), h * w}));
  if (rescale) z = scale(z, double(s));
  return reshape(z, {s, h, w});
}

double plan_entropy(const Tensor& plan) {
  double h = 0.0;
  for (double p : plan.data()) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

}  // namespace bandmoe
