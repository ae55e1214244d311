#include "bandmoe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "bandmoe/error.hpp"

namespace bandmoe {

namespace {

constexpr std::size_t kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

void check_pair(const Tensor& pred, const Tensor& ref, const char* what) {
  if (pred.shape() != ref.shape()) throw ShapeError(std::string(what) + ": prediction vs reference", pred.shape(), ref.shape());
  if (pred.numel() == 0) throw ShapeError(std::string(what) + ": empty input", pred.shape(), ref.shape());
}

void check_image_pair(const Tensor& pred, const Tensor& ref, const char* what) {
  check_pair(pred, ref, what);
  if (pred.rank() != 3) throw ShapeError(std::string(what) + ": [C,H,W] input required", pred.shape(), ref.shape());
}

std::vector<double> gaussian_window() {
  std::vector<double> g(kWindow);
  const double c = double(kWindow / 2);
  double total = 0;
  for (std::size_t i = 0; i < kWindow; ++i) total += (g[i] = std::exp(-(double(i) - c) * (double(i) - c) / (2 * kSigma * kSigma)));
  for (double& v : g) v /= total;
  return g;
}

double ssim_from_moments(double mx, double my, double vx, double vy, double cxy) {
  return ((2 * mx * my + kC1) * (2 * cxy + kC2)) / ((mx * mx + my * my + kC1) * (vx + vy + kC2));
}

}  // namespace

double psnr(const Tensor& pred, const Tensor& ref, double peak) {
  check_pair(pred, ref, "psnr");
  auto p = pred.data();
  auto r = ref.data();
  double mse = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) mse += (p[i] - r[i]) * (p[i] - r[i]);
  mse /= double(p.size());
  if (mse == 0.0) return kPsnrSentinel;
  return 10.0 * std::log10(peak * peak / mse);
}

double ssim(const Tensor& pred, const Tensor& ref) {
  check_image_pair(pred, ref, "ssim");
  const std::size_t c = pred.dim(0), h = pred.dim(1), w = pred.dim(2);
  auto x = pred.data();
  auto y = ref.data();
  double total = 0.0;
  if (h < kWindow || w < kWindow) {
    const double n = double(h * w);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mx = 0, my = 0;
      for (std::size_t i = 0; i < h * w; ++i) {
        mx += x[ch * h * w + i];
        my += y[ch * h * w + i];
      }
      mx /= n;
      my /= n;
      double vx = 0, vy = 0, cxy = 0;
      for (std::size_t i = 0; i < h * w; ++i) {
        const double dx = x[ch * h * w + i] - mx, dy = y[ch * h * w + i] - my;
        vx += dx * dx;
        vy += dy * dy;
        cxy += dx * dy;
      }
      total += ssim_from_moments(mx, my, vx / n, vy / n, cxy / n);
    }
    return total / double(c);
  }
  const std::vector<double> g = gaussian_window();
  const std::size_t oh = h - kWindow + 1, ow = w - kWindow + 1;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* px = x.data() + ch * h * w;
    const double* py = y.data() + ch * h * w;
    double channel = 0.0;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (std::size_t a = 0; a < kWindow; ++a) {
          for (std::size_t b = 0; b < kWindow; ++b) {
            const double wt = g[a] * g[b];
            const double vx = px[(i + a) * w + j + b], vy = py[(i + a) * w + j + b];
            mx += wt * vx;
            my += wt * vy;
            sxx += wt * vx * vx;
            syy += wt * vy * vy;
            sxy += wt * vx * vy;
          }
        }
        channel += ssim_from_moments(mx, my, sxx - mx * mx, syy - my * my, sxy - mx * my);
      }
    }
    total += channel / double(oh * ow);
  }
  return total / double(c);
}

SamResult sam_detailed(const Tensor& pred, const Tensor& ref) {
  check_image_pair(pred, ref, "sam");
  const std::size_t c = pred.dim(0), n = pred.dim(1) * pred.dim(2);
  auto x = pred.data();
  auto y = ref.data();
  SamResult r;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0, nx = 0, ny = 0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double a = x[ch * n + i], b = y[ch * n + i];
      dot += a * b;
      nx += a * a;
      ny += b * b;
    }
    if (nx == 0.0 || ny == 0.0) {
      ++r.skipped;
      continue;
    }
    total += std::acos(std::clamp(dot / std::sqrt(nx * ny), -1.0, 1.0));
    ++r.counted;
  }
  if (r.counted == 0) throw DomainError("sam: every pixel has a zero-norm spectrum");
  r.radians = total / double(r.counted);
  return r;
}

ErgasResult ergas_detailed(const Tensor& pred, const Tensor& ref, double ratio) {
  check_image_pair(pred, ref, "ergas");
  if (!(ratio > 0.0)) throw ConfigError("ergas: resolution ratio must be positive");
  const std::size_t c = pred.dim(0), n = pred.dim(1) * pred.dim(2);
  auto x = pred.data();
  auto y = ref.data();
  ErgasResult r;
  double acc = 0.0;
  std::size_t used = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mse = 0, mean = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = x[ch * n + i] - y[ch * n + i];
      mse += d * d;
      mean += y[ch * n + i];
    }
    mse /= double(n);
    mean /= double(n);
    if (mean == 0.0) {
      r.excluded_bands.push_back(ch);
      continue;
    }
    acc += mse / (mean * mean);
    ++used;
  }
  if (used == 0) throw DomainError("ergas: every reference band has zero mean");
  r.value = 100.0 * ratio * std::sqrt(acc / double(used));
  return r;
}

void MetricsAccumulator::add(const Tensor& pred, const Tensor& ref) {
  const SamResult s = sam_detailed(pred, ref);
  psnr_ += psnr(pred, ref);
  ssim_ += ssim(pred, ref);
  sam_ += s.radians;
  sam_pixels_ += s.radians * double(s.counted);
  sam_count_ += s.counted;
  ergas_ += ergas(pred, ref);
  ++n_;
}

MetricsRecord MetricsAccumulator::record() const {
  MetricsRecord r;
  r.task = task_;
  r.n = n_;
  if (n_ == 0) return r;
  const double n = double(n_);
  r.psnr = psnr_ / n;
  r.ssim = ssim_ / n;
  r.sam = sam_ / n;
  r.sam_pooled = sam_count_ ? sam_pixels_ / double(sam_count_) : 0.0;
  r.ergas = ergas_ / n;
  return r;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("metrics: cannot write " + path.string());
  os << "task,n,psnr,ssim,sam,ergas\n";
  char line[256];
  for (const auto& r : records) {
    std::snprintf(line, sizeof line, "%s,%zu,%.6f,%.6f,%.6f,%.6f\n", r.task.c_str(), r.n, r.psnr, r.ssim, r.sam, r.ergas);
    os << line;
  }
  if (!os) throw InputError("metrics: write failed for " + path.string());
}

std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("metrics: cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "task,n,psnr,ssim,sam,ergas") throw InputError("metrics: unexpected header '" + line + "'");
  std::vector<MetricsRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> f;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (f.size() != 6) throw InputError("metrics: malformed row '" + line + "'");
    MetricsRecord r;
    try {
      r.task = f[0];
      r.n = std::stoul(f[1]);
      r.psnr = std::stod(f[2]);
      r.ssim = std::stod(f[3]);
      r.sam = std::stod(f[4]);
      r.ergas = std::stod(f[5]);
    } catch (const std::exception&) {
      throw InputError("metrics: malformed row '" + line + "'");
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace bandmoe
