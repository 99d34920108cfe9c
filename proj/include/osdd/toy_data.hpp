#pragma once

#include <string>
#include <vector>

#include "osdd/image_io.hpp"
#include "osdd/rng.hpp"
#include "osdd/tensor.hpp"

namespace osdd {

// Procedural sharp test images: smooth gradient background, hard-edged shapes,
// and a sinusoidal texture band -- structure at several scales so blur is
// actually destructive and restoration measurable. Deterministic per index.
inline Tensor<float> make_toy_image(uint64_t index, int64_t size) {
  Rng rng(derive_seed(0xD0D0CAFEULL, "toy-image", index));
  Tensor<float> img(Shape{1, 3, size, size});

  // gradient background between two random colors along a random direction
  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = rng.uniform(0.05, 0.95);
    c1[c] = rng.uniform(0.05, 0.95);
  }
  const double theta = rng.uniform(0.0, 6.283185307179586);
  const double gx = std::cos(theta), gy = std::sin(theta);
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      const double u = 0.5 + 0.5 * (gx * (2.0 * x / size - 1.0) + gy * (2.0 * y / size - 1.0));
      for (int c = 0; c < 3; ++c)
        img.at(0, c, y, x) = float(c0[c] + (c1[c] - c0[c]) * u);
    }

  const auto smoothstep = [](double e0, double e1, double v) {
    const double t = std::min(1.0, std::max(0.0, (v - e0) / (e1 - e0)));
    return t * t * (3.0 - 2.0 * t);
  };

  // hard-edged shapes (circles and rectangles), ~1px soft edge
  const int shapes = 5 + int(rng.below(4));
  for (int sidx = 0; sidx < shapes; ++sidx) {
    const bool circle = rng.uniform() < 0.5;
    double col[3];
    for (int c = 0; c < 3; ++c) col[c] = rng.uniform(0.0, 1.0);
    const double cx = rng.uniform(0.1, 0.9) * size;
    const double cy = rng.uniform(0.1, 0.9) * size;
    const double rad = rng.uniform(0.05, 0.22) * size;
    const double ang = rng.uniform(0.0, 6.283185307179586);
    const double ca = std::cos(ang), sa = std::sin(ang);
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x) {
        double cover;
        if (circle) {
          const double d = std::hypot(x - cx, y - cy);
          cover = 1.0 - smoothstep(rad - 0.7, rad + 0.7, d);
        } else {
          const double rx = ca * (x - cx) + sa * (y - cy);
          const double ry = -sa * (x - cx) + ca * (y - cy);
          const double dx = std::abs(rx) - rad;
          const double dy = std::abs(ry) - rad * 0.6;
          const double d = std::max(dx, dy);
          cover = 1.0 - smoothstep(-0.7, 0.7, d);
        }
        if (cover <= 0.0) continue;
        for (int c = 0; c < 3; ++c)
          img.at(0, c, y, x) =
              float((1.0 - cover) * img.at(0, c, y, x) + cover * col[c]);
      }
  }

  // sinusoidal texture stripe on a random channel
  const int ch = int(rng.below(3));
  const double freq = rng.uniform(0.15, 0.5);
  const double phase = rng.uniform(0.0, 6.283185307179586);
  const int64_t band_y0 = int64_t(rng.uniform(0.0, 0.6) * size);
  const int64_t band_h = int64_t(rng.uniform(0.2, 0.4) * size);
  for (int64_t y = band_y0; y < std::min(size, band_y0 + band_h); ++y)
    for (int64_t x = 0; x < size; ++x) {
      const double s = 0.5 + 0.5 * std::sin(freq * x + 0.3 * freq * y + phase);
      img.at(0, ch, y, x) = float(0.65 * img.at(0, ch, y, x) + 0.35 * s);
    }

  for (auto& v : img.data) v = std::min(1.0f, std::max(0.0f, v));
  return img;
}

// Writes `count` toy images into dir as toy_<k>.ppm; returns the paths.
inline std::vector<std::string> write_toy_images(const std::string& dir, int64_t count,
                                                 int64_t size) {
  std::vector<std::string> paths;
  for (int64_t i = 0; i < count; ++i) {
    const std::string p = dir + "/toy_" + std::to_string(i) + ".ppm";
    write_ppm(p, make_toy_image(uint64_t(i), size));
    paths.push_back(p);
  }
  return paths;
}

}  // namespace osdd
