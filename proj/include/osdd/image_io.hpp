#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "osdd/tensor.hpp"

namespace osdd {

namespace detail {

inline int ppm_next_token(std::istream& in, std::string& tok) {
  tok.clear();
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {  // comment to end of line
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  while (c != EOF && !std::isspace(c)) {
    tok.push_back(static_cast<char>(c));
    c = in.get();
  }
  return tok.empty() ? EOF : 0;
}

}  // namespace detail

inline uint8_t float_to_byte(float v) {
  const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  const long r = std::lround(c * 255.0f);
  return static_cast<uint8_t>(r < 0 ? 0 : (r > 255 ? 255 : r));
}

// Reads a binary (P6) or ASCII (P3) PPM into a (1, 3, H, W) tensor in [0,1].
inline Tensor<float> read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_validation("cannot open image ", path);
  std::string tok;
  if (detail::ppm_next_token(in, tok) == EOF || (tok != "P6" && tok != "P3"))
    fail_validation(path, ": not a P6/P3 PPM (magic '", tok, "')");
  const bool binary = tok == "P6";
  int64_t w = 0, h = 0, maxval = 0;
  for (int64_t* field : {&w, &h, &maxval}) {
    if (detail::ppm_next_token(in, tok) == EOF)
      fail_validation(path, ": truncated PPM header");
    *field = std::stoll(tok);
  }
  if (w <= 0 || h <= 0) fail_validation(path, ": bad dimensions ", w, "x", h);
  if (maxval != 255) fail_validation(path, ": unsupported maxval ", maxval);
  Tensor<float> img(Shape{1, 3, h, w});
  if (binary) {
    std::vector<uint8_t> raw(static_cast<size_t>(w * h * 3));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size()))
      fail_validation(path, ": truncated pixel data");
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        for (int64_t c = 0; c < 3; ++c)
          img.at(0, c, y, x) = float(raw[static_cast<size_t>((y * w + x) * 3 + c)]) / 255.0f;
  } else {
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        for (int64_t c = 0; c < 3; ++c) {
          if (detail::ppm_next_token(in, tok) == EOF)
            fail_validation(path, ": truncated P3 pixel data");
          img.at(0, c, y, x) = float(std::stoll(tok)) / 255.0f;
        }
  }
  return img;
}

// Writes a (1, 3, H, W) tensor as binary PPM; values clamped to [0,1] and
// quantized to 8 bits.
inline void write_ppm(const std::string& path, const Tensor<float>& img) {
  if (img.shape.n != 1 || img.shape.c != 3)
    fail_validation("write_ppm: expected (1,3,H,W), got ", img.shape.str());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_validation("cannot write image ", path);
  out << "P6\n" << img.shape.w << " " << img.shape.h << "\n255\n";
  std::vector<uint8_t> raw(static_cast<size_t>(img.shape.w * img.shape.h * 3));
  for (int64_t y = 0; y < img.shape.h; ++y)
    for (int64_t x = 0; x < img.shape.w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        raw[static_cast<size_t>((y * img.shape.w + x) * 3 + c)] =
            float_to_byte(img.at(0, c, y, x));
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) fail_validation("short write on ", path);
}

}  // namespace osdd
