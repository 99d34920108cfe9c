#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "osdd/common.hpp"

namespace osdd {

// Dense 4-axis shape (batch, channels, height, width). Lower-rank data uses
// trailing ones: a scalar is {1,1,1,1}, a feature matrix is {n,f,1,1}.
struct Shape {
  int64_t n = 1, c = 1, h = 1, w = 1;

  Shape() = default;
  Shape(int64_t n_, int64_t c_, int64_t h_, int64_t w_) : n(n_), c(c_), h(h_), w(w_) {}

  int64_t numel() const { return n * c * h * w; }
  bool operator==(const Shape& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    return str_cat("(", n, ",", c, ",", h, ",", w, ")");
  }
};

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(s), data(static_cast<size_t>(s.numel()), fill) {}

  static Tensor zeros(Shape s) { return Tensor(s, T(0)); }
  static Tensor full(Shape s, T v) { return Tensor(s, v); }
  static Tensor scalar(T v) {
    Tensor t(Shape{1, 1, 1, 1});
    t.data[0] = v;
    return t;
  }

  int64_t numel() const { return shape.numel(); }
  bool empty() const { return data.empty(); }

  T& at(int64_t n_, int64_t c_, int64_t h_, int64_t w_) {
    return data[static_cast<size_t>(((n_ * shape.c + c_) * shape.h + h_) * shape.w + w_)];
  }
  T at(int64_t n_, int64_t c_, int64_t h_, int64_t w_) const {
    return data[static_cast<size_t>(((n_ * shape.c + c_) * shape.h + h_) * shape.w + w_)];
  }

  T item() const {
    if (numel() != 1) fail_validation("item() on tensor of shape ", shape.str());
    return data[0];
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* who) {
  if (a.shape != b.shape)
    fail_validation(who, ": shape mismatch ", a.shape.str(), " vs ", b.shape.str());
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "max_abs_diff");
  T m = 0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, static_cast<T>(std::abs(a.data[i] - b.data[i])));
  return m;
}

template <typename T>
T mean_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mean_abs_diff");
  double s = 0;
  for (size_t i = 0; i < a.data.size(); ++i) s += std::abs(double(a.data[i]) - double(b.data[i]));
  return static_cast<T>(s / double(a.data.size()));
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape) return false;
  for (size_t i = 0; i < a.data.size(); ++i)
    if (a.data[i] != b.data[i]) return false;
  return true;
}

}  // namespace osdd
