#pragma once

#include "osdd/layers.hpp"
#include "osdd/ops.hpp"
#include "osdd/rng.hpp"

namespace osdd {

// Fixed (untrained, seeded) convolutional feature extractor standing in for a
// pretrained perceptual backbone. Two stride-2 stages; the perceptual
// distance is the summed MSE between the stage outputs of two images.
template <typename T>
struct FeatureExtractor {
  Tensor<T> w1, b1, w2, b2;
  static constexpr int64_t kC1 = 8;
  static constexpr int64_t kC2 = 16;

  static FeatureExtractor make(uint64_t seed = 0x9E0FEA7ULL) {
    Rng rng(derive_seed(seed, "feature-extractor"));
    FeatureExtractor fe;
    fe.w1 = kaiming_normal<T>(Shape{kC1, 3, 3, 3}, 27, rng);
    fe.b1 = Tensor<T>::zeros(Shape{kC1, 1, 1, 1});
    fe.w2 = kaiming_normal<T>(Shape{kC2, kC1, 3, 3}, kC1 * 9, rng);
    fe.b2 = Tensor<T>::zeros(Shape{kC2, 1, 1, 1});
    return fe;
  }

  std::vector<Var<T>> features(Tape<T>& tp, Var<T> x) const {
    if (x.shape().c != 3)
      fail_validation("FeatureExtractor: expected 3-channel input, got ", x.shape().str());
    Var<T> f1 = leaky_relu(
        conv2d(x, tp.leaf(w1, false), tp.leaf(b1, false), 2, 1), T(0.1));
    Var<T> f2 = leaky_relu(
        conv2d(f1, tp.leaf(w2, false), tp.leaf(b2, false), 2, 1), T(0.1));
    return {f1, f2};
  }
};

// Summed per-stage MSE between feature maps; symmetric, zero for identical inputs.
template <typename T>
Var<T> perceptual_distance(Tape<T>& tp, const FeatureExtractor<T>& fe, Var<T> a, Var<T> b) {
  auto fa = fe.features(tp, a);
  auto fb = fe.features(tp, b);
  Var<T> total = mse_loss(fa[0], fb[0]);
  for (size_t i = 1; i < fa.size(); ++i) total = add(total, mse_loss(fa[i], fb[i]));
  return total;
}

// Luma Sobel gradient-magnitude map, replicated back to 3 channels so it can
// feed the same extractor.
template <typename T>
Var<T> sobel_edge_map(Tape<T>& tp, Var<T> x) {
  Tensor<T> luma_w(Shape{1, 3, 1, 1});
  luma_w.data = {T(0.299), T(0.587), T(0.114)};
  Tensor<T> zero_b = Tensor<T>::zeros(Shape{1, 1, 1, 1});
  Var<T> gray = conv2d(x, tp.leaf(luma_w, false), tp.leaf(zero_b, false), 1, 0);

  Tensor<T> kx(Shape{1, 1, 3, 3});
  kx.data = {T(-1), T(0), T(1), T(-2), T(0), T(2), T(-1), T(0), T(1)};
  Tensor<T> ky(Shape{1, 1, 3, 3});
  ky.data = {T(-1), T(-2), T(-1), T(0), T(0), T(0), T(1), T(2), T(1)};
  Var<T> gx = conv2d(gray, tp.leaf(kx, false), tp.leaf(zero_b, false), 1, 1);
  Var<T> gy = conv2d(gray, tp.leaf(ky, false), tp.leaf(zero_b, false), 1, 1);
  Var<T> mag = sqrt_op(add_const(add(mul(gx, gx), mul(gy, gy)), T(1e-8)));
  return concat_ch(mag, concat_ch(mag, mag));
}

// Edge-aware perceptual loss: perceptual distance on the images plus
// perceptual distance on their edge maps.
template <typename T>
Var<T> ea_perceptual_loss(Tape<T>& tp, const FeatureExtractor<T>& fe, Var<T> a, Var<T> b) {
  Var<T> img_term = perceptual_distance(tp, fe, a, b);
  Var<T> edge_term = perceptual_distance(tp, fe, sobel_edge_map(tp, a), sobel_edge_map(tp, b));
  return add(img_term, edge_term);
}

}  // namespace osdd
