#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "bandmoe/rng.hpp"
#include "bandmoe/tasks.hpp"
#include "bandmoe/tensor.hpp"

namespace bandmoe {

// Every function here works on raw values in [0,1] and returns untracked
// tensors; none of them participate in autodiff.

// Clean references --------------------------------------------------------

// Multi-octave value noise shared across channels, blended with a
// channel-specific texture and affinely recolored per channel into [0,1].
Tensor gen_clean_patch(std::uint64_t seed, std::size_t channels, std::size_t height, std::size_t width);

// Families ----------------------------------------------------------------

enum class Family { kBlur, kNoise, kStripes, kBrightness, kHistEq, kLinStretch };
enum class BlurKind { kGaussian, kMotion, kMean, kDisk };
enum class NoiseKind { kGaussian, kUniform, kPoisson, kRayleigh, kGamma, kSaltPepper, kImpulse, kSpeckle };

std::string_view family_name(Family f);
std::string_view blur_name(BlurKind k);
std::string_view noise_name(NoiseKind k);
Family parse_family(std::string_view name);  // ConfigError when unknown
BlurKind parse_blur(std::string_view name);
NoiseKind parse_noise(std::string_view name);

struct BlurParams {
  BlurKind kind = BlurKind::kGaussian;
  std::size_t size = 5;    // odd, in [3, 9]
  double strength = 1.0;   // kernel = (1 - s) delta + s K, s in [0, 1]
  double angle_deg = 0.0;  // motion direction, counterclockwise from +w
};

// Normalized [size, size] kernel (sums to 1).
std::vector<double> blur_kernel(const BlurParams& p);
// Convolution with replicate padding, channel by channel.
Tensor apply_blur(const Tensor& x, const BlurParams& p);

struct NoiseComponent {
  NoiseKind kind = NoiseKind::kGaussian;
  // Standard deviation for additive kinds, corruption rate for salt-and-pepper
  // and impulse, relative deviation for speckle, 1/sqrt(photons) for Poisson.
  double strength = 0.0;
};

// Components are applied in order; the result is clamped to [0,1].
Tensor apply_noise(const Tensor& x, const std::vector<NoiseComponent>& mixture, std::uint64_t seed);

struct StripeParams {
  double period = 4.0;     // >= 2 pixels
  double amplitude = 0.1;  // additive, in [0, 0.5]
  double angle_deg = 0.0;  // 0: stripes vary along w (column pattern)
  double phase = 0.0;      // radians
  bool nonuniform = false; // per-stripe gains in [0.5, 1.5]
};

// x + a g_k cos(2 pi u / period + phase), u = w cos(theta) + h sin(theta),
// k = floor(u / period); clamped to [0,1].
Tensor apply_stripes(const Tensor& x, const StripeParams& p, std::uint64_t seed);

// clamp(gain * x, 0, 1).
Tensor apply_brightness(const Tensor& x, double gain);

// Per channel v -> #{pixels <= v} / N. Constant channels are left unchanged.
Tensor apply_histeq(const Tensor& x);

// Per channel affine map sending the lo/hi percentiles (linear interpolation
// between order statistics) to 0/1, clamped. Constant channels unchanged.
Tensor apply_linstretch(const Tensor& x, double lo = 0.02, double hi = 0.98);

// Specs and samples -------------------------------------------------------

struct DegradationSpec {
  Family family = Family::kNoise;
  std::uint64_t seed = 0;
  double severity = 1.0;  // 0 is the identity for every family
  BlurParams blur;
  std::vector<NoiseComponent> noise;
  StripeParams stripes;
  double gain = 1.0;      // brightness gain applied to the clean image
  double stretch_lo = 0.02;
  double stretch_hi = 0.98;

  // Throws ConfigError when a parameter leaves its declared range.
  void validate() const;
  std::string to_json() const;
  static DegradationSpec from_json(std::string_view json);
};

// Applies a degradation family to a clean image. Severity s scales the family
// strength: blur strength, noise strengths and stripe amplitude by s,
// brightness gain as gain^s, and histeq/linstretch as (1 - s) x + s map(x).
Tensor apply_degradation(const Tensor& clean, const DegradationSpec& spec);

Family family_for_task(Task task);  // ConfigError for non-synthetic tasks

struct SampleShape {
  std::size_t channels = 4;
  std::size_t height = 16;
  std::size_t width = 16;
};

struct DegradationSample {
  Tensor degraded;
  Tensor clean;
  Task task = Task::kDenoise;
  std::string prompt;
  DegradationSpec spec;
};

// Training sample: severity ~ U[0.25, 1] and family parameters drawn from
// the declared ranges, prompt drawn from the task's pool.
DegradationSample make_sample(Task task, std::uint64_t seed, const PromptPools& pools, const SampleShape& shape = {});

// Evaluation fixture at full severity with the fixed test prompt: Gaussian
// noise 0.05, 5x5 motion blur at 45 degrees, seeded stripes, brightness
// targets of 1.2x or 0.7x the input, full histeq and 2-98% stretch.
DegradationSample make_eval_sample(Task task, std::uint64_t seed, const SampleShape& shape = {});

void save_sample(const std::filesystem::path& dir, const DegradationSample& sample);
DegradationSample load_sample(const std::filesystem::path& dir);

}  // namespace bandmoe
