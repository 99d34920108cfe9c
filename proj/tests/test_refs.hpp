#pragma once

// Brute-force reference implementations used as oracles in tests. These are
// written independently of the library's vectorized paths on purpose.

#include <cmath>
#include <cstdint>

#include "osdd/rng.hpp"
#include "osdd/tensor.hpp"

namespace testref {

using osdd::Shape;
using osdd::Tensor;

template <typename T>
Tensor<T> random_image(int64_t n, int64_t h, int64_t w, uint64_t seed, double lo = 0.0,
                       double hi = 1.0) {
  osdd::Rng rng(seed);
  Tensor<T> t(Shape{n, 3, h, w});
  rng.fill_uniform(t, lo, hi);
  return t;
}

// Direct-loop cross-correlation with zero padding.
template <typename T>
Tensor<T> conv_ref(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int64_t stride,
                   int64_t pad) {
  const int64_t oh = (x.shape.h + 2 * pad - w.shape.h) / stride + 1;
  const int64_t ow = (x.shape.w + 2 * pad - w.shape.w) / stride + 1;
  Tensor<T> y(Shape{x.shape.n, w.shape.n, oh, ow});
  for (int64_t n = 0; n < x.shape.n; ++n)
    for (int64_t oc = 0; oc < w.shape.n; ++oc)
      for (int64_t yy = 0; yy < oh; ++yy)
        for (int64_t xx = 0; xx < ow; ++xx) {
          double acc = double(b.data[size_t(oc)]);
          for (int64_t ic = 0; ic < w.shape.c; ++ic)
            for (int64_t ky = 0; ky < w.shape.h; ++ky)
              for (int64_t kx = 0; kx < w.shape.w; ++kx) {
                const int64_t iy = yy * stride - pad + ky;
                const int64_t ix = xx * stride - pad + kx;
                if (iy < 0 || iy >= x.shape.h || ix < 0 || ix >= x.shape.w) continue;
                acc += double(x.at(n, ic, iy, ix)) * double(w.at(oc, ic, ky, kx));
              }
          y.at(n, oc, yy, xx) = T(acc);
        }
  return y;
}

template <typename T>
Tensor<T> lrelu_ref(Tensor<T> t, double slope) {
  for (auto& v : t.data)
    if (v < T(0)) v = T(double(v) * slope);
  return t;
}

template <typename T>
double mse_ref(const Tensor<T>& a, const Tensor<T>& b) {
  double s = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = double(a.data[i]) - double(b.data[i]);
    s += d * d;
  }
  return s / double(a.data.size());
}

template <typename T>
double l1_ref(const Tensor<T>& a, const Tensor<T>& b) {
  double s = 0;
  for (size_t i = 0; i < a.data.size(); ++i)
    s += std::abs(double(a.data[i]) - double(b.data[i]));
  return s / double(a.data.size());
}

// Reference perceptual distance: both stages of the fixed extractor via
// conv_ref, summed per-stage MSE.
template <typename T, typename FE>
double perceptual_ref(const FE& fe, const Tensor<T>& a, const Tensor<T>& b) {
  const Tensor<T> a1 = lrelu_ref(conv_ref(a, fe.w1, fe.b1, 2, 1), 0.1);
  const Tensor<T> b1 = lrelu_ref(conv_ref(b, fe.w1, fe.b1, 2, 1), 0.1);
  const Tensor<T> a2 = lrelu_ref(conv_ref(a1, fe.w2, fe.b2, 2, 1), 0.1);
  const Tensor<T> b2 = lrelu_ref(conv_ref(b1, fe.w2, fe.b2, 2, 1), 0.1);
  return mse_ref(a1, b1) + mse_ref(a2, b2);
}

// Reference Sobel gradient-magnitude map (luma weights, zero padding),
// replicated to 3 channels.
template <typename T>
Tensor<T> sobel_ref(const Tensor<T>& x) {
  const int64_t h = x.shape.h, w = x.shape.w;
  Tensor<T> gray(Shape{x.shape.n, 1, h, w});
  for (int64_t n = 0; n < x.shape.n; ++n)
    for (int64_t yy = 0; yy < h; ++yy)
      for (int64_t xx = 0; xx < w; ++xx)
        gray.at(n, 0, yy, xx) = T(0.299 * double(x.at(n, 0, yy, xx)) +
                                  0.587 * double(x.at(n, 1, yy, xx)) +
                                  0.114 * double(x.at(n, 2, yy, xx)));
  const double kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  const double ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  Tensor<T> out(Shape{x.shape.n, 3, h, w});
  for (int64_t n = 0; n < x.shape.n; ++n)
    for (int64_t yy = 0; yy < h; ++yy)
      for (int64_t xx = 0; xx < w; ++xx) {
        double gx = 0, gy = 0;
        for (int64_t dy = -1; dy <= 1; ++dy)
          for (int64_t dx = -1; dx <= 1; ++dx) {
            const int64_t iy = yy + dy, ix = xx + dx;
            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
            gx += kx[dy + 1][dx + 1] * double(gray.at(n, 0, iy, ix));
            gy += ky[dy + 1][dx + 1] * double(gray.at(n, 0, iy, ix));
          }
        const T m = T(std::sqrt(gx * gx + gy * gy + 1e-8));
        out.at(n, 0, yy, xx) = m;
        out.at(n, 1, yy, xx) = m;
        out.at(n, 2, yy, xx) = m;
      }
  return out;
}

}  // namespace testref
