#include "bandmoe/degrade.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <json.hpp>
#include <numbers>

#include "bandmoe/error.hpp"
#include "bandmoe/tensor_io.hpp"

namespace bandmoe {

namespace {

constexpr double kPi = std::numbers::pi;

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

void check_image(const Tensor& x, const char* where) {
  if (x.rank() != 3) throw ShapeError(std::string(where) + ": [C,H,W] input required", x.shape(), {});
}

Tensor from_values(const Tensor& like, std::vector<double> values) { return Tensor::from(like.shape(), std::move(values)); }

// Bilinear value noise on a (cells+1)^2 lattice with smoothstep easing.
std::vector<double> value_noise(CounterRng& rng, std::size_t h, std::size_t w, std::size_t cells) {
  std::vector<double> lattice((cells + 1) * (cells + 1));
  for (double& v : lattice) v = rng.uniform();
  auto ease = [](double t) { return t * t * (3.0 - 2.0 * t); };
  std::vector<double> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = double(y) / double(h) * double(cells);
    const std::size_t iy = std::min(std::size_t(fy), cells - 1);
    const double ty = ease(fy - double(iy));
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = double(x) / double(w) * double(cells);
      const std::size_t ix = std::min(std::size_t(fx), cells - 1);
      const double tx = ease(fx - double(ix));
      auto at = [&](std::size_t r, std::size_t c) { return lattice[r * (cells + 1) + c]; };
      const double top = at(iy, ix) * (1 - tx) + at(iy, ix + 1) * tx;
      const double bottom = at(iy + 1, ix) * (1 - tx) + at(iy + 1, ix + 1) * tx;
      out[y * w + x] = top * (1 - ty) + bottom * ty;
    }
  }
  return out;
}

std::vector<double> octave_texture(CounterRng& rng, std::size_t h, std::size_t w) {
  std::vector<double> acc(h * w, 0.0);
  double amp = 1.0, total = 0.0;
  for (std::size_t o = 0; o < 4; ++o) {
    const auto layer = value_noise(rng, h, w, std::size_t{2} << o);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += amp * layer[i];
    total += amp;
    amp *= 0.5;
  }
  for (double& v : acc) v /= total;
  return acc;
}

double poisson_draw(CounterRng& rng, double lambda) {
  if (lambda <= 0.0) return 0.0;
  if (lambda < 30.0) {
    const double limit = std::exp(-lambda);
    double p = 1.0;
    int k = -1;
    do {
      ++k;
      p *= rng.uniform();
    } while (p > limit);
    return double(k);
  }
  return std::max(0.0, std::round(lambda + std::sqrt(lambda) * rng.normal()));
}

// Marsaglia-Tsang, shape >= 1, unit scale.
double gamma_draw(CounterRng& rng, double shape) {
  const double d = shape - 1.0 / 3.0, c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    const double z = rng.normal();
    const double v = std::pow(1.0 + c * z, 3);
    if (v <= 0.0) continue;
    const double u = rng.uniform();
    if (std::log(u) < 0.5 * z * z + d - d * v + d * std::log(v)) return d * v;
  }
}

double percentile(std::vector<double> sorted, double q) {
  const double pos = q * double(sorted.size() - 1);
  const std::size_t i = std::size_t(std::floor(pos));
  const std::size_t j = std::min(i + 1, sorted.size() - 1);
  return sorted[i] + (pos - double(i)) * (sorted[j] - sorted[i]);
}

template <typename PerChannel>
Tensor map_channels(const Tensor& x, PerChannel&& fn) {
  check_image(x, "channel map");
  const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
  std::vector<double> out = x.to_vector();
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::span<double> values(out.data() + ch * n, n);
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    if (*hi - *lo <= 1e-15) continue;
    fn(values);
  }
  return from_values(x, std::move(out));
}

Tensor blend(const Tensor& a, const Tensor& b, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - s) * a[i] + s * b[i];
  return from_values(a, std::move(out));
}

template <typename E, std::size_t N>
E parse_enum(std::string_view name, const std::array<std::string_view, N>& names, const char* what) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == name) return E(i);
  }
  throw ConfigError(std::string("unknown ") + what + " '" + std::string(name) + "'");
}

constexpr std::array<std::string_view, 6> kFamilyNames{"blur", "noise", "stripes", "brightness", "histeq", "linstretch"};
constexpr std::array<std::string_view, 4> kBlurNames{"gaussian", "motion", "mean", "disk"};
constexpr std::array<std::string_view, 8> kNoiseNames{"gaussian", "uniform",     "poisson", "rayleigh",
                                                      "gamma",    "salt_pepper", "impulse", "speckle"};

}  // namespace

std::string_view family_name(Family f) { return kFamilyNames.at(std::size_t(f)); }
std::string_view blur_name(BlurKind k) { return kBlurNames.at(std::size_t(k)); }
std::string_view noise_name(NoiseKind k) { return kNoiseNames.at(std::size_t(k)); }
Family parse_family(std::string_view name) { return parse_enum<Family>(name, kFamilyNames, "degradation family"); }
BlurKind parse_blur(std::string_view name) { return parse_enum<BlurKind>(name, kBlurNames, "blur kind"); }
NoiseKind parse_noise(std::string_view name) { return parse_enum<NoiseKind>(name, kNoiseNames, "noise distribution"); }

Tensor gen_clean_patch(std::uint64_t seed, std::size_t channels, std::size_t height, std::size_t width) {
  if (channels == 0 || height < 8 || width < 8) {
    throw ConfigError("gen_clean_patch: need C >= 1 and H, W >= 8");
  }
  CounterRng rng(seed, 0xC1EA);
  const std::size_t n = height * width;
  const std::vector<double> shared = octave_texture(rng, height, width);
  std::vector<double> out(channels * n);
  for (std::size_t c = 0; c < channels; ++c) {
    const std::vector<double> own = octave_texture(rng, height, width);
    const double mix = rng.uniform(0.5, 0.9);
    const double lo = rng.uniform(0.0, 0.25), hi = rng.uniform(0.75, 1.0);
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = mix * shared[i] + (1.0 - mix) * own[i];
    const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
    const double span = *mx - *mn;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = span > 1e-12 ? (v[i] - *mn) / span : 0.5;
      out[c * n + i] = clamp01(lo + (hi - lo) * t);
    }
  }
  return Tensor::from({channels, height, width}, std::move(out));
}

std::vector<double> blur_kernel(const BlurParams& p) {
  if (p.size < 3 || p.size > 9 || p.size % 2 == 0) {
    throw ConfigError("blur: kernel size must be odd and within [3, 9], got " + std::to_string(p.size));
  }
  if (!(p.strength >= 0.0 && p.strength <= 1.0)) throw ConfigError("blur: strength must lie in [0, 1]");
  const std::size_t n = p.size;
  const double r = double(n / 2);
  std::vector<double> k(n * n, 0.0);
  switch (p.kind) {
    case BlurKind::kGaussian: {
      const double sigma = std::max(0.5, double(n) / 4.0);
      for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
          const double dy = double(y) - r, dx = double(x) - r;
          k[y * n + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        }
      }
      break;
    }
    case BlurKind::kMotion: {
      // Bilinear splat of evenly spaced points along the centred segment.
      const double th = p.angle_deg * kPi / 180.0;
      const double ux = std::cos(th), uy = -std::sin(th);
      const std::size_t samples = 8 * n + 1;
      for (std::size_t s = 0; s < samples; ++s) {
        const double t = -r + 2.0 * r * double(s) / double(samples - 1);
        const double fx = r + t * ux, fy = r + t * uy;
        const double x0 = std::floor(fx), y0 = std::floor(fy);
        for (int dy = 0; dy <= 1; ++dy) {
          for (int dx = 0; dx <= 1; ++dx) {
            const double xi = x0 + dx, yi = y0 + dy;
            if (xi < 0 || yi < 0 || xi >= double(n) || yi >= double(n)) continue;
            const double wgt = (1.0 - std::fabs(fx - xi)) * (1.0 - std::fabs(fy - yi));
            if (wgt > 0.0) k[std::size_t(yi) * n + std::size_t(xi)] += wgt;
          }
        }
      }
      break;
    }
    case BlurKind::kMean:
      std::fill(k.begin(), k.end(), 1.0);
      break;
    case BlurKind::kDisk:
      for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
          const double dy = double(y) - r, dx = double(x) - r;
          k[y * n + x] = (dx * dx + dy * dy <= (r + 0.5) * (r + 0.5)) ? 1.0 : 0.0;
        }
      }
      break;
  }
  double total = 0.0;
  for (double v : k) total += v;
  for (double& v : k) v = p.strength * v / total;
  k[(n / 2) * n + n / 2] += 1.0 - p.strength;
  return k;
}

Tensor apply_blur(const Tensor& x, const BlurParams& p) {
  check_image(x, "apply_blur");
  const std::vector<double> k = blur_kernel(p);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), n = p.size;
  const long r = long(n / 2);
  auto src = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < n; ++ky) {
          const long sy = std::clamp(long(y) + long(ky) - r, 0L, long(h) - 1);
          for (std::size_t kx = 0; kx < n; ++kx) {
            const long sx = std::clamp(long(xx) + long(kx) - r, 0L, long(w) - 1);
            acc += k[ky * n + kx] * src[(ch * h + std::size_t(sy)) * w + std::size_t(sx)];
          }
        }
        out[(ch * h + y) * w + xx] = clamp01(acc);
      }
    }
  }
  return from_values(x, std::move(out));
}

Tensor apply_noise(const Tensor& x, const std::vector<NoiseComponent>& mixture, std::uint64_t seed) {
  check_image(x, "apply_noise");
  for (const auto& m : mixture) {
    if (!(m.strength >= 0.0) || !std::isfinite(m.strength)) throw ConfigError("apply_noise: strengths must be >= 0");
    if (int(m.kind) < 0 || int(m.kind) >= int(kNoiseNames.size())) throw ConfigError("apply_noise: unknown distribution");
  }
  std::vector<double> v = x.to_vector();
  for (std::size_t comp = 0; comp < mixture.size(); ++comp) {
    const double s = mixture[comp].strength;
    if (s == 0.0) continue;
    CounterRng rng(seed, 0x4015E + comp);
    switch (mixture[comp].kind) {
      case NoiseKind::kGaussian:
        for (double& p : v) p += s * rng.normal();
        break;
      case NoiseKind::kUniform:
        for (double& p : v) p += s * std::sqrt(3.0) * rng.uniform(-1.0, 1.0);
        break;
      case NoiseKind::kPoisson: {
        const double photons = 1.0 / (s * s);
        for (double& p : v) p = poisson_draw(rng, clamp01(p) * photons) / photons;
        break;
      }
      case NoiseKind::kRayleigh: {
        // Zero-mean Rayleigh(1) deviate scaled to standard deviation s.
        const double mean = std::sqrt(kPi / 2.0), sd = std::sqrt((4.0 - kPi) / 2.0);
        for (double& p : v) p += s * (std::sqrt(-2.0 * std::log(1.0 - rng.uniform())) - mean) / sd;
        break;
      }
      case NoiseKind::kGamma: {
        // Zero-mean, unit-variance Gamma(2, 1) deviate.
        for (double& p : v) p += s * (gamma_draw(rng, 2.0) - 2.0) / std::sqrt(2.0);
        break;
      }
      case NoiseKind::kSaltPepper:
        for (double& p : v) {
          const double u = rng.uniform();
          if (u < s) p = (u < 0.5 * s) ? 0.0 : 1.0;
        }
        break;
      case NoiseKind::kImpulse:
        for (double& p : v) {
          const double u = rng.uniform(), value = rng.uniform();
          if (u < s) p = value;
        }
        break;
      case NoiseKind::kSpeckle:
        for (double& p : v) p *= 1.0 + s * rng.normal();
        break;
    }
  }
  for (double& p : v) p = clamp01(p);
  return from_values(x, std::move(v));
}

Tensor apply_stripes(const Tensor& x, const StripeParams& p, std::uint64_t seed) {
  check_image(x, "apply_stripes");
  if (!(p.period >= 2.0)) throw ConfigError("apply_stripes: period must be >= 2");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const double th = p.angle_deg * kPi / 180.0;
  // Exact axes so that 0 and 90 degrees are transposes of one another.
  double cs = std::cos(th), sn = std::sin(th);
  if (std::fabs(cs) < 1e-12) cs = 0.0;
  if (std::fabs(sn) < 1e-12) sn = 0.0;
  CounterRng rng(seed, 0x57121E);
  const std::size_t stripes = h + w + 2;
  std::vector<double> gains(2 * stripes, 1.0);
  if (p.nonuniform) {
    for (double& g : gains) g = rng.uniform(0.5, 1.5);
  }
  std::vector<double> field(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xx = 0; xx < w; ++xx) {
      const double u = double(xx) * cs + double(y) * sn;
      const long k = long(std::floor(u / p.period)) + long(stripes);
      field[y * w + xx] = p.amplitude * gains[std::size_t(k)] * std::cos(2.0 * kPi * u / p.period + p.phase);
    }
  }
  std::vector<double> out = x.to_vector();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h * w; ++i) out[ch * h * w + i] = clamp01(out[ch * h * w + i] + field[i]);
  }
  return from_values(x, std::move(out));
}

Tensor apply_brightness(const Tensor& x, double gain) {
  check_image(x, "apply_brightness");
  if (!(gain > 0.0) || !std::isfinite(gain)) throw ConfigError("apply_brightness: gain must be positive");
  std::vector<double> out = x.to_vector();
  for (double& v : out) v = clamp01(gain * v);
  return from_values(x, std::move(out));
}

Tensor apply_histeq(const Tensor& x) {
  return map_channels(x, [](std::span<double> values) {
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double n = double(sorted.size());
    for (double& v : values) v = double(std::upper_bound(sorted.begin(), sorted.end(), v) - sorted.begin()) / n;
  });
}

Tensor apply_linstretch(const Tensor& x, double lo, double hi) {
  if (!(lo >= 0.0 && lo < hi && hi <= 1.0)) throw ConfigError("apply_linstretch: need 0 <= lo < hi <= 1");
  return map_channels(x, [&](std::span<double> values) {
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double plo = percentile(sorted, lo), phi = percentile(sorted, hi);
    if (phi - plo <= 1e-12) return;
    for (double& v : values) v = clamp01((v - plo) / (phi - plo));
  });
}

// ---------------------------------------------------------------------------

void DegradationSpec::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("degradation spec: " + what);
  };
  require(severity >= 0.0 && severity <= 1.0, "severity must lie in [0, 1]");
  switch (family) {
    case Family::kBlur:
      blur_kernel(blur);
      break;
    case Family::kNoise:
      for (const auto& m : noise) {
        const bool rate = m.kind == NoiseKind::kSaltPepper || m.kind == NoiseKind::kImpulse;
        require(m.strength >= 0.0 && m.strength <= (rate ? 1.0 : 0.5), "noise strength out of range");
      }
      break;
    case Family::kStripes:
      require(stripes.period >= 2.0 && stripes.period <= 64.0, "stripe period must lie in [2, 64]");
      require(stripes.amplitude >= 0.0 && stripes.amplitude <= 0.5, "stripe amplitude must lie in [0, 0.5]");
      require(std::isfinite(stripes.angle_deg) && std::isfinite(stripes.phase), "stripe angle/phase must be finite");
      break;
    case Family::kBrightness:
      require(gain >= 0.25 && gain <= 4.0, "brightness gain must lie in [0.25, 4]");
      break;
    case Family::kHistEq:
      break;
    case Family::kLinStretch:
      require(stretch_lo >= 0.0 && stretch_lo < stretch_hi && stretch_hi <= 1.0, "stretch percentiles out of order");
      break;
  }
}

std::string DegradationSpec::to_json() const {
  nlohmann::json noise_json = nlohmann::json::array();
  for (const auto& m : noise) noise_json.push_back({{"kind", noise_name(m.kind)}, {"strength", m.strength}});
  const nlohmann::json j = {
      {"family", family_name(family)},
      {"seed", seed},
      {"severity", severity},
      {"blur",
       {{"kind", blur_name(blur.kind)}, {"size", blur.size}, {"strength", blur.strength}, {"angle_deg", blur.angle_deg}}},
      {"noise", noise_json},
      {"stripes",
       {{"period", stripes.period},
        {"amplitude", stripes.amplitude},
        {"angle_deg", stripes.angle_deg},
        {"phase", stripes.phase},
        {"nonuniform", stripes.nonuniform}}},
      {"gain", gain},
      {"stretch_lo", stretch_lo},
      {"stretch_hi", stretch_hi},
  };
  return j.dump();
}

DegradationSpec DegradationSpec::from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    DegradationSpec s;
    s.family = parse_family(j.at("family").get<std::string>());
    s.seed = j.at("seed").get<std::uint64_t>();
    s.severity = j.at("severity").get<double>();
    const auto& b = j.at("blur");
    s.blur = {parse_blur(b.at("kind").get<std::string>()), b.at("size").get<std::size_t>(), b.at("strength").get<double>(),
              b.at("angle_deg").get<double>()};
    for (const auto& m : j.at("noise")) {
      s.noise.push_back({parse_noise(m.at("kind").get<std::string>()), m.at("strength").get<double>()});
    }
    const auto& st = j.at("stripes");
    s.stripes = {st.at("period").get<double>(), st.at("amplitude").get<double>(), st.at("angle_deg").get<double>(),
                 st.at("phase").get<double>(), st.at("nonuniform").get<bool>()};
    s.gain = j.at("gain").get<double>();
    s.stretch_lo = j.at("stretch_lo").get<double>();
    s.stretch_hi = j.at("stretch_hi").get<double>();
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("degradation spec: ") + e.what());
  }
}

Tensor apply_degradation(const Tensor& clean, const DegradationSpec& spec) {
  spec.validate();
  const double s = spec.severity;
  switch (spec.family) {
    case Family::kBlur: {
      BlurParams b = spec.blur;
      b.strength *= s;
      return apply_blur(clean, b);
    }
    case Family::kNoise: {
      std::vector<NoiseComponent> m = spec.noise;
      for (auto& c : m) c.strength *= s;
      return apply_noise(clean, m, spec.seed);
    }
    case Family::kStripes: {
      StripeParams p = spec.stripes;
      p.amplitude *= s;
      return apply_stripes(clean, p, spec.seed);
    }
    case Family::kBrightness:
      return apply_brightness(clean, std::pow(spec.gain, s));
    case Family::kHistEq:
      return blend(clean, apply_histeq(clean), s);
    case Family::kLinStretch:
      return blend(clean, apply_linstretch(clean, spec.stretch_lo, spec.stretch_hi), s);
  }
  throw ConfigError("apply_degradation: unknown family");
}

Family family_for_task(Task task) {
  switch (task) {
    case Task::kDenoise: return Family::kNoise;
    case Task::kDeblur: return Family::kBlur;
    case Task::kDestripe: return Family::kStripes;
    case Task::kHistEq: return Family::kHistEq;
    case Task::kLinStretch: return Family::kLinStretch;
    case Task::kBrightness: return Family::kBrightness;
    default:
      throw ConfigError("task '" + std::string(task_info(task).id) + "' has no synthetic degradation");
  }
}

namespace {

// Family parameter ranges for training samples.
DegradationSpec sample_spec(Family family, std::uint64_t seed) {
  CounterRng rng(seed, 0x5BEC);
  DegradationSpec s;
  s.family = family;
  s.seed = seed;
  s.severity = rng.uniform(0.25, 1.0);
  switch (family) {
    case Family::kBlur:
      s.blur.kind = BlurKind(rng.below(4));
      s.blur.size = 3 + 2 * std::size_t(rng.below(3));
      s.blur.strength = 1.0;
      s.blur.angle_deg = rng.uniform(0.0, 180.0);
      break;
    case Family::kNoise:
      s.noise.push_back({NoiseKind::kGaussian, rng.uniform(0.03, 0.08)});
      if (rng.bernoulli(0.3)) {
        const NoiseKind extra = NoiseKind(1 + rng.below(7));
        const bool rate = extra == NoiseKind::kSaltPepper || extra == NoiseKind::kImpulse;
        s.noise.push_back({extra, rate ? rng.uniform(0.005, 0.03) : rng.uniform(0.01, 0.04)});
      }
      break;
    case Family::kStripes:
      s.stripes.period = rng.uniform(3.0, 8.0);
      s.stripes.amplitude = rng.uniform(0.05, 0.15);
      s.stripes.angle_deg = rng.bernoulli(0.5) ? 0.0 : (rng.bernoulli(0.5) ? 90.0 : rng.uniform(0.0, 180.0));
      s.stripes.phase = rng.uniform(0.0, 2.0 * kPi);
      s.stripes.nonuniform = rng.bernoulli(0.5);
      break;
    case Family::kBrightness: {
      // Gains are the inverse of the restoration target ratio.
      const double target = rng.bernoulli(0.5) ? rng.uniform(1.15, 1.4) : rng.uniform(0.6, 0.85);
      s.gain = 1.0 / target;
      break;
    }
    case Family::kHistEq:
    case Family::kLinStretch:
      break;
  }
  return s;
}

DegradationSample assemble(Task task, const DegradationSpec& spec, std::string prompt, const SampleShape& shape) {
  DegradationSample out;
  out.clean = gen_clean_patch(spec.seed, shape.channels, shape.height, shape.width);
  out.degraded = apply_degradation(out.clean, spec);
  out.task = task;
  out.prompt = std::move(prompt);
  out.spec = spec;
  return out;
}

}  // namespace

DegradationSample make_sample(Task task, std::uint64_t seed, const PromptPools& pools, const SampleShape& shape) {
  const Family family = family_for_task(task);
  auto it = pools.find(std::string(task_info(task).id));
  if (it == pools.end() || it->second.empty()) {
    throw ConfigError("make_sample: no prompt pool for task '" + std::string(task_info(task).id) + "'");
  }
  CounterRng rng(seed, 0x9807);
  std::string prompt = it->second[rng.below(it->second.size())];
  return assemble(task, sample_spec(family, seed), std::move(prompt), shape);
}

DegradationSample make_eval_sample(Task task, std::uint64_t seed, const SampleShape& shape) {
  DegradationSpec s;
  s.family = family_for_task(task);
  s.seed = seed;
  s.severity = 1.0;
  CounterRng rng(seed, 0xE7A1);
  switch (s.family) {
    case Family::kNoise:
      s.noise = {{NoiseKind::kGaussian, 0.05}};
      break;
    case Family::kBlur:
      s.blur = {BlurKind::kMotion, 5, 1.0, 45.0};
      break;
    case Family::kStripes:
      s.stripes.period = rng.uniform(3.0, 8.0);
      s.stripes.amplitude = 0.1;
      s.stripes.angle_deg = rng.bernoulli(0.5) ? 0.0 : 90.0;
      s.stripes.phase = rng.uniform(0.0, 2.0 * kPi);
      s.stripes.nonuniform = rng.bernoulli(0.5);
      break;
    case Family::kBrightness:
      s.gain = 1.0 / (rng.bernoulli(0.5) ? 1.2 : 0.7);
      break;
    case Family::kHistEq:
      break;
    case Family::kLinStretch:
      s.stretch_lo = 0.02;
      s.stretch_hi = 0.98;
      break;
  }
  return assemble(task, s, std::string(task_info(task).test_prompt), shape);
}

void save_sample(const std::filesystem::path& dir, const DegradationSample& sample) {
  const nlohmann::json extra = {{"task", task_info(sample.task).id},
                                {"prompt", sample.prompt},
                                {"spec", nlohmann::json::parse(sample.spec.to_json())}};
  save_bundle(dir, {{"degraded", sample.degraded}, {"clean", sample.clean}}, extra.dump());
}

DegradationSample load_sample(const std::filesystem::path& dir) {
  const Bundle b = load_bundle(dir);
  const auto extra = nlohmann::json::parse(b.extra_json);
  DegradationSample s;
  s.degraded = b.at("degraded");
  s.clean = b.at("clean");
  if (s.degraded.shape() != s.clean.shape()) throw InputError("sample: degraded and clean shapes differ");
  s.task = parse_task(extra.at("task").get<std::string>());
  s.prompt = extra.at("prompt").get<std::string>();
  s.spec = DegradationSpec::from_json(extra.at("spec").dump());
  return s;
}

}  // namespace bandmoe
