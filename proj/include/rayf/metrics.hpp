#pragma once

#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "rayf/common.hpp"
#include "rayf/tensor.hpp"

namespace rayf {

// 10 log10(1 / MSE) with channel-mean MSE; capped at 99 dB for (near)
// identical inputs.
inline double psnr(const Array& a, const Array& b) {
  require_shape(a.same_shape(b), "psnr: shape mismatch");
  require_shape(a.numel() > 0, "psnr: empty image");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    mse += d * d;
  }
  mse /= double(a.numel());
  if (mse < 1e-10) return 99.0;
  return 10.0 * std::log10(1.0 / mse);
}

namespace detail {

inline const std::vector<double>& ssim_window() {
  static const std::vector<double> w = [] {
    std::vector<double> win(11 * 11);
    const double sigma = 1.5;
    double sum = 0.0;
    for (int i = 0; i < 11; ++i)
      for (int j = 0; j < 11; ++j) {
        const double di = i - 5, dj = j - 5;
        win[std::size_t(i) * 11 + j] =
            std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
        sum += win[std::size_t(i) * 11 + j];
      }
    for (auto& v : win) v /= sum;
    return win;
  }();
  return w;
}

}  // namespace detail

// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// dynamic range 1.0, valid-window positions only, channel mean.
inline double ssim(const Array& a, const Array& b) {
  require_shape(a.same_shape(b), "ssim: shape mismatch");
  require_shape(a.rank() == 3 && a.dim(2) == 3, "ssim: expects (H, W, 3)");
  const int h = int(a.dim(0)), w = int(a.dim(1));
  require_config(h >= 11 && w >= 11, "ssim: image must be at least 11x11");

  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto& win = detail::ssim_window();

  double total = 0.0;
  std::size_t count = 0;
  for (int ch = 0; ch < 3; ++ch) {
    for (int y = 0; y + 11 <= h; ++y) {
      for (int x = 0; x + 11 <= w; ++x) {
        double mu1 = 0, mu2 = 0, m11 = 0, m22 = 0, m12 = 0;
        for (int i = 0; i < 11; ++i) {
          for (int j = 0; j < 11; ++j) {
            const double wt = win[std::size_t(i) * 11 + j];
            const double va = a(std::size_t(y + i), std::size_t(x + j),
                                std::size_t(ch));
            const double vb = b(std::size_t(y + i), std::size_t(x + j),
                                std::size_t(ch));
            mu1 += wt * va;
            mu2 += wt * vb;
            m11 += wt * va * va;
            m22 += wt * vb * vb;
            m12 += wt * (va * vb);  // grouping keeps ssim(a,b) == ssim(b,a)
          }
        }
        const double var1 = m11 - mu1 * mu1;
        const double var2 = m22 - mu2 * mu2;
        const double cov = m12 - (mu1 * mu2);
        total += ((2.0 * (mu1 * mu2) + c1) * (2.0 * cov + c2)) /
                 ((mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2));
        ++count;
      }
    }
  }
  return total / double(count);
}

struct MetricReport {
  std::vector<double> frame_psnr;
  std::vector<double> frame_ssim;

  double mean_psnr() const {
    double s = 0;
    for (double v : frame_psnr) s += v;
    return frame_psnr.empty() ? 0.0 : s / double(frame_psnr.size());
  }
  double mean_ssim() const {
    double s = 0;
    for (double v : frame_ssim) s += v;
    return frame_ssim.empty() ? 0.0 : s / double(frame_ssim.size());
  }

  void print_table(std::ostream& os) const {
    os << std::left << std::setw(8) << "frame" << std::right << std::setw(10)
       << "psnr" << std::setw(10) << "ssim" << "\n";
    for (std::size_t i = 0; i < frame_psnr.size(); ++i) {
      os << std::left << std::setw(8) << i << std::right << std::fixed
         << std::setprecision(4) << std::setw(10) << frame_psnr[i]
         << std::setw(10) << frame_ssim[i] << "\n";
    }
    os << std::left << std::setw(8) << "mean" << std::right << std::fixed
       << std::setprecision(4) << std::setw(10) << mean_psnr() << std::setw(10)
       << mean_ssim() << "\n";
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "frame,psnr,ssim\n" << std::fixed << std::setprecision(6);
    for (std::size_t i = 0; i < frame_psnr.size(); ++i)
      os << i << "," << frame_psnr[i] << "," << frame_ssim[i] << "\n";
    os << "mean," << mean_psnr() << "," << mean_ssim() << "\n";
    return os.str();
  }
};

// Per-frame comparison of two (N, H, W, 3) stacks.
inline MetricReport evaluate_frames(const Array& recon, const Array& gt) {
  require_shape(recon.same_shape(gt), "evaluate_frames: shape mismatch");
  require_shape(recon.rank() == 4 && recon.dim(3) == 3,
                "evaluate_frames: expects (N, H, W, 3)");
  MetricReport report;
  const std::size_t n = recon.dim(0), h = recon.dim(1), w = recon.dim(2);
  for (std::size_t i = 0; i < n; ++i) {
    Array ra({h, w, 3}), rb({h, w, 3});
    for (std::size_t k = 0; k < h * w * 3; ++k) {
      ra[k] = recon[i * h * w * 3 + k];
      rb[k] = gt[i * h * w * 3 + k];
    }
    report.frame_psnr.push_back(psnr(ra, rb));
    report.frame_ssim.push_back(ssim(ra, rb));
  }
  return report;
}

}  // namespace rayf
