#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "bandmoe/tensor.hpp"

namespace bandmoe {

inline constexpr double kPsnrSentinel = 100.0;

// 10 log10(peak^2 / MSE); kPsnrSentinel when MSE is zero.
double psnr(const Tensor& pred, const Tensor& ref, double peak = 1.0);

// Mean local SSIM over all channels with an 11x11 Gaussian window (sigma
// 1.5) evaluated at every fully contained position, K1 = 0.01, K2 = 0.03,
// dynamic range 1. Images smaller than the window use one global window.
double ssim(const Tensor& pred, const Tensor& ref);

struct SamResult {
  double radians = 0.0;       // mean angle over counted pixels
  std::size_t counted = 0;
  std::size_t skipped = 0;    // pixels where either spectrum has zero norm
};

// Spectral angle between per-pixel C-vectors. Throws DomainError when every
// pixel is skipped.
SamResult sam_detailed(const Tensor& pred, const Tensor& ref);
inline double sam(const Tensor& pred, const Tensor& ref) { return sam_detailed(pred, ref).radians; }

struct ErgasResult {
  double value = 0.0;
  std::vector<std::size_t> excluded_bands;  // reference band mean was zero
};

// 100 ratio sqrt(mean_b RMSE_b^2 / mean_b(ref)^2) over bands with nonzero
// reference mean. Throws DomainError when every band is excluded.
ErgasResult ergas_detailed(const Tensor& pred, const Tensor& ref, double ratio = 1.0);
inline double ergas(const Tensor& pred, const Tensor& ref, double ratio = 1.0) {
  return ergas_detailed(pred, ref, ratio).value;
}

struct MetricsRecord {
  std::string task;
  std::size_t n = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  double sam = 0.0;         // per-image pixel means, averaged over images
  double sam_pooled = 0.0;  // mean over every counted pixel of every image
  double ergas = 0.0;
};

// Running per-task means.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(std::string task) : task_(std::move(task)) {}
  void add(const Tensor& pred, const Tensor& ref);
  MetricsRecord record() const;

 private:
  std::string task_;
  std::size_t n_ = 0;
  double psnr_ = 0, ssim_ = 0, sam_ = 0, ergas_ = 0;
  double sam_pixels_ = 0;
  std::size_t sam_count_ = 0;
};

// Header "task,n,psnr,ssim,sam,ergas", values with 6 decimals.
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path);

}  // namespace bandmoe
