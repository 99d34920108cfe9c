#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "osdd/tensor.hpp"

namespace osdd {

struct ImageMetrics {
  double mae_pixel = 0;  // mean absolute error on the 0-255 scale
  double psnr = 0;       // dB, capped
  double ssim = 0;
};

inline double mae_pixel_255(const Tensor<float>& a, const Tensor<float>& b) {
  check_same_shape(a, b, "mae_pixel");
  double s = 0;
  for (size_t i = 0; i < a.data.size(); ++i)
    s += std::abs(double(a.data[i]) - double(b.data[i]));
  return 255.0 * s / double(a.data.size());
}

inline double psnr_db(const Tensor<float>& a, const Tensor<float>& b, double cap = 100.0) {
  check_same_shape(a, b, "psnr");
  double mse = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = double(a.data[i]) - double(b.data[i]);
    mse += d * d;
  }
  mse /= double(a.data.size());
  if (mse <= 0.0) return cap;
  return std::min(cap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

// 11x11 Gaussian window, sigma 1.5 (the standard SSIM window), normalized.
inline const std::vector<double>& ssim_window() {
  static const std::vector<double> w = [] {
    std::vector<double> v(121);
    double s = 0;
    for (int y = 0; y < 11; ++y)
      for (int x = 0; x < 11; ++x) {
        const double dy = y - 5, dx = x - 5;
        v[size_t(y * 11 + x)] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
        s += v[size_t(y * 11 + x)];
      }
    for (double& e : v) e /= s;
    return v;
  }();
  return w;
}

}  // namespace detail

// Mean SSIM over channels. Valid-window (no padding) sliding 11x11 Gaussian
// statistics; images smaller than the window fall back to global statistics.
inline double ssim(const Tensor<float>& a, const Tensor<float>& b) {
  check_same_shape(a, b, "ssim");
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;  // L = 1
  const int64_t h = a.shape.h, w = a.shape.w;

  double total = 0;
  int64_t count = 0;
  for (int64_t n = 0; n < a.shape.n; ++n)
    for (int64_t c = 0; c < a.shape.c; ++c) {
      if (h < 11 || w < 11) {
        double ma = 0, mb = 0;
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x < w; ++x) {
            ma += a.at(n, c, y, x);
            mb += b.at(n, c, y, x);
          }
        const double m = double(h * w);
        ma /= m;
        mb /= m;
        double va = 0, vb = 0, cov = 0;
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x < w; ++x) {
            const double da = a.at(n, c, y, x) - ma;
            const double db = b.at(n, c, y, x) - mb;
            va += da * da;
            vb += db * db;
            cov += da * db;
          }
        va /= m;
        vb /= m;
        cov /= m;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                 ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
        continue;
      }
      const auto& win = detail::ssim_window();
      double acc = 0;
      int64_t cells = 0;
      for (int64_t y = 0; y + 11 <= h; ++y)
        for (int64_t x = 0; x + 11 <= w; ++x) {
          double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
          for (int64_t wy = 0; wy < 11; ++wy)
            for (int64_t wx = 0; wx < 11; ++wx) {
              const double g = win[size_t(wy * 11 + wx)];
              const double pa = a.at(n, c, y + wy, x + wx);
              const double pb = b.at(n, c, y + wy, x + wx);
              ma += g * pa;
              mb += g * pb;
              saa += g * pa * pa;
              sbb += g * pb * pb;
              sab += g * pa * pb;
            }
          const double va = saa - ma * ma;
          const double vb = sbb - mb * mb;
          const double cov = sab - ma * mb;
          acc += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                 ((ma * ma + mb * mb + c1) * (va + vb + c2));
          ++cells;
        }
      total += acc / double(cells);
      ++count;
    }
  return total / double(count);
}

inline ImageMetrics compute_metrics(const Tensor<float>& out, const Tensor<float>& ref) {
  ImageMetrics m;
  m.mae_pixel = mae_pixel_255(out, ref);
  m.psnr = psnr_db(out, ref);
  m.ssim = ssim(out, ref);
  return m;
}

}  // namespace osdd
