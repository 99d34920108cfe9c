#pragma once

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "osdd/image_io.hpp"
#include "osdd/rng.hpp"
#include "osdd/tensor.hpp"

namespace osdd {

// ----------------------------------------------------------- trajectory model

struct TrajectoryParams {
  int64_t num_points = 256;
  double dt = 0.0;  // <= 0 selects 1 / num_points
  double sigma_gauss = 30.0;   // std of the Gaussian acceleration term
  double p_impulse = 0.1;      // per-step probability of an impulsive shake
  double impulse_gain = 2.0;   // impulse magnitude relative to current speed
  double centripetal = 4.0;    // pull toward the trajectory origin
  double max_speed = 8.0;      // velocity norm clamp
  double init_speed = 1.0;     // |v_1|
  // Initial direction override; NaN selects a random (seeded) unit direction.
  double init_dir_x = std::numeric_limits<double>::quiet_NaN();
  double init_dir_y = std::numeric_limits<double>::quiet_NaN();
  uint64_t seed = 0;

  double step() const { return dt > 0.0 ? dt : 1.0 / double(num_points); }

  void validate() const {
    if (num_points < 1) fail_validation("TrajectoryParams: num_points must be >= 1");
    if (p_impulse < 0.0 || p_impulse > 1.0)
      fail_validation("TrajectoryParams: p_impulse must lie in [0,1], got ", p_impulse);
    for (double v : {sigma_gauss, impulse_gain, centripetal, max_speed, init_speed})
      if (v < 0.0) fail_validation("TrajectoryParams: coefficients must be >= 0");
  }
};

struct Trajectory {
  std::vector<std::array<double, 2>> points;
};

// Integrates the shake dynamics:
//   v_{t+1} = v_t + dt * (g_t + i_t - centripetal * p_t)
//   p_{t+1} = p_t + dt * v_{t+1}
// with Gaussian acceleration g_t, occasional impulses i_t proportional to the
// current speed, and a centripetal pull toward the start point.
inline Trajectory generate_trajectory(const TrajectoryParams& params) {
  params.validate();
  Rng rng(params.seed);
  const double dt = params.step();

  double dx = params.init_dir_x, dy = params.init_dir_y;
  if (std::isnan(dx) || std::isnan(dy)) {
    const double theta = rng.uniform(0.0, 6.283185307179586);
    dx = std::cos(theta);
    dy = std::sin(theta);
  } else {
    const double n = std::hypot(dx, dy);
    if (n > 0.0) {
      dx /= n;
      dy /= n;
    }
  }
  double vx = params.init_speed * dx;
  double vy = params.init_speed * dy;
  double px = 0.0, py = 0.0;

  Trajectory traj;
  traj.points.reserve(static_cast<size_t>(params.num_points));
  traj.points.push_back({px, py});
  for (int64_t i = 1; i < params.num_points; ++i) {
    double ax = rng.normal() * params.sigma_gauss;
    double ay = rng.normal() * params.sigma_gauss;
    if (rng.uniform() < params.p_impulse) {
      const double speed = std::hypot(vx, vy);
      const double phi = rng.uniform(0.0, 6.283185307179586);
      ax += params.impulse_gain * speed * std::cos(phi);
      ay += params.impulse_gain * speed * std::sin(phi);
    }
    ax -= params.centripetal * px;
    ay -= params.centripetal * py;
    vx += dt * ax;
    vy += dt * ay;
    if (params.max_speed > 0.0) {
      const double speed = std::hypot(vx, vy);
      if (speed > params.max_speed) {
        vx *= params.max_speed / speed;
        vy *= params.max_speed / speed;
      }
    }
    px += dt * vx;
    py += dt * vy;
    traj.points.push_back({px, py});
  }
  return traj;
}

// ----------------------------------------------------------------- blur kernel

struct BlurKernel {
  int64_t size = 0;          // odd side length
  std::vector<double> grid;  // row-major size x size, non-negative, sums to 1

  double at(int64_t y, int64_t x) const {
    return grid[static_cast<size_t>(y * size + x)];
  }
  double& at(int64_t y, int64_t x) { return grid[static_cast<size_t>(y * size + x)]; }

  double sum() const {
    double s = 0;
    for (double v : grid) s += v;
    return s;
  }
};

// Centers the trajectory on its centroid, scales it uniformly to fit the grid
// with a one-cell margin, and splats each point bilinearly.
inline BlurKernel rasterize_kernel(const Trajectory& traj, int64_t size = 31) {
  if (traj.points.empty()) fail_validation("rasterize_kernel: empty trajectory");
  if (size < 3 || size % 2 == 0)
    fail_validation("rasterize_kernel: size must be odd and >= 3, got ", size);

  double cx = 0, cy = 0;
  for (const auto& p : traj.points) {
    cx += p[0];
    cy += p[1];
  }
  cx /= double(traj.points.size());
  cy /= double(traj.points.size());

  double max_abs = 0;
  for (const auto& p : traj.points)
    max_abs = std::max({max_abs, std::abs(p[0] - cx), std::abs(p[1] - cy)});

  const double half = double(size - 1) / 2.0;
  const double scale = max_abs > 0.0 ? (half - 1.0) / max_abs : 0.0;

  BlurKernel k;
  k.size = size;
  k.grid.assign(static_cast<size_t>(size * size), 0.0);
  for (const auto& p : traj.points) {
    const double gx = half + (p[0] - cx) * scale;
    const double gy = half + (p[1] - cy) * scale;
    const int64_t x0 = static_cast<int64_t>(std::floor(gx));
    const int64_t y0 = static_cast<int64_t>(std::floor(gy));
    const double fx = gx - double(x0);
    const double fy = gy - double(y0);
    const double w[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
    const int64_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
    const int64_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
    for (int j = 0; j < 4; ++j)
      if (xs[j] >= 0 && xs[j] < size && ys[j] >= 0 && ys[j] < size)
        k.at(ys[j], xs[j]) += w[j];
  }

  const double s = k.sum();
  if (s <= 0.0) fail_numeric("rasterize_kernel: zero-mass kernel");
  for (double& v : k.grid) v /= s;
  return k;
}

// Per-channel 2-D correlation with reflect-101 padding (edge pixel not
// duplicated); output clamped to [0,1].
template <typename T>
Tensor<T> apply_blur(const Tensor<T>& x, const BlurKernel& k) {
  const int64_t h = x.shape.h, w = x.shape.w;
  if (k.size >= h || k.size >= w)
    fail_validation("apply_blur: kernel size ", k.size, " must be smaller than image ",
                    x.shape.str());
  const int64_t r = k.size / 2;
  const auto reflect = [](int64_t i, int64_t n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return i;
  };
  Tensor<T> out(x.shape);
  for (int64_t n = 0; n < x.shape.n; ++n)
    for (int64_t c = 0; c < x.shape.c; ++c)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t xx = 0; xx < w; ++xx) {
          double acc = 0;
          for (int64_t ky = -r; ky <= r; ++ky)
            for (int64_t kx = -r; kx <= r; ++kx)
              acc += k.at(ky + r, kx + r) *
                     double(x.at(n, c, reflect(y + ky, h), reflect(xx + kx, w)));
          out.at(n, c, y, xx) = static_cast<T>(std::min(1.0, std::max(0.0, acc)));
        }
  return out;
}

inline std::string kernel_hash(const BlurKernel& k) {
  uint64_t h = 1469598103934665603ULL;
  for (double v : k.grid) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xffULL;
      h *= 1099511628211ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// --------------------------------------------------------------- dataset build

// Per-pair randomized generation settings: each emitted pair samples a kernel
// size and trajectory coefficients from these ranges using a seed derived
// from (root seed, pair index), so generation is order- and parallelism-
// independent.
struct BlurSynthConfig {
  int64_t patch = 64;
  int64_t stride = 32;
  int64_t kernel_min = 11;  // odd, inclusive
  int64_t kernel_max = 41;  // odd, inclusive
  int64_t num_points = 256;
  double sigma_lo = 10.0, sigma_hi = 60.0;
  double impulse_lo = 0.0, impulse_hi = 0.3;
  double impulse_gain = 2.0;
  double centripetal_lo = 1.0, centripetal_hi = 8.0;
  double max_speed = 8.0;
  double init_speed = 1.0;
  uint64_t seed = 0;

  void validate() const {
    if (patch < 2) fail_validation("BlurSynthConfig: patch must be >= 2");
    if (stride < 1) fail_validation("BlurSynthConfig: stride must be >= 1");
    if (kernel_min < 3 || kernel_min % 2 == 0 || kernel_max < kernel_min ||
        kernel_max % 2 == 0)
      fail_validation("BlurSynthConfig: kernel range must be odd values >= 3, got [",
                      kernel_min, ", ", kernel_max, "]");
    if (kernel_max >= patch)
      fail_validation("BlurSynthConfig: kernel_max ", kernel_max,
                      " must be smaller than patch ", patch);
  }

  nlohmann::json to_json() const {
    return {{"patch", patch},
            {"stride", stride},
            {"kernel_min", kernel_min},
            {"kernel_max", kernel_max},
            {"num_points", num_points},
            {"sigma_lo", sigma_lo},
            {"sigma_hi", sigma_hi},
            {"impulse_lo", impulse_lo},
            {"impulse_hi", impulse_hi},
            {"impulse_gain", impulse_gain},
            {"centripetal_lo", centripetal_lo},
            {"centripetal_hi", centripetal_hi},
            {"max_speed", max_speed},
            {"init_speed", init_speed},
            {"seed", seed}};
  }

  static BlurSynthConfig from_json(const nlohmann::json& j) {
    BlurSynthConfig c;
    c.patch = j.value("patch", c.patch);
    c.stride = j.value("stride", c.stride);
    c.kernel_min = j.value("kernel_min", c.kernel_min);
    c.kernel_max = j.value("kernel_max", c.kernel_max);
    c.num_points = j.value("num_points", c.num_points);
    c.sigma_lo = j.value("sigma_lo", c.sigma_lo);
    c.sigma_hi = j.value("sigma_hi", c.sigma_hi);
    c.impulse_lo = j.value("impulse_lo", c.impulse_lo);
    c.impulse_hi = j.value("impulse_hi", c.impulse_hi);
    c.impulse_gain = j.value("impulse_gain", c.impulse_gain);
    c.centripetal_lo = j.value("centripetal_lo", c.centripetal_lo);
    c.centripetal_hi = j.value("centripetal_hi", c.centripetal_hi);
    c.max_speed = j.value("max_speed", c.max_speed);
    c.init_speed = j.value("init_speed", c.init_speed);
    c.seed = j.value("seed", c.seed);
    return c;
  }
};

struct PairRecord {
  int64_t id = 0;
  std::string source;  // source image path
  int64_t x = 0, y = 0;
  uint64_t seed = 0;
  std::string kernel_hash;
  std::string blurry;  // file name relative to the dataset directory
  std::string sharp;
};

struct DatasetManifest {
  BlurSynthConfig config;
  std::vector<PairRecord> pairs;
};

namespace detail {

// Deterministic per-pair sampling. Draw order is part of the manifest
// contract: kernel size, sigma, p_impulse, centripetal, trajectory seed.
inline std::pair<TrajectoryParams, int64_t> sample_pair_params(const BlurSynthConfig& cfg,
                                                               uint64_t pair_seed) {
  Rng rng(pair_seed);
  const int64_t n_sizes = (cfg.kernel_max - cfg.kernel_min) / 2 + 1;
  const int64_t ksize = cfg.kernel_min + 2 * int64_t(rng.below(uint64_t(n_sizes)));
  TrajectoryParams tp;
  tp.num_points = cfg.num_points;
  tp.sigma_gauss = rng.uniform(cfg.sigma_lo, cfg.sigma_hi);
  tp.p_impulse = rng.uniform(cfg.impulse_lo, cfg.impulse_hi);
  tp.impulse_gain = cfg.impulse_gain;
  tp.centripetal = rng.uniform(cfg.centripetal_lo, cfg.centripetal_hi);
  tp.max_speed = cfg.max_speed;
  tp.init_speed = cfg.init_speed;
  tp.seed = rng.next_u64();
  return {tp, ksize};
}

inline Tensor<float> crop(const Tensor<float>& img, int64_t y0, int64_t x0, int64_t size) {
  Tensor<float> out(Shape{1, img.shape.c, size, size});
  for (int64_t c = 0; c < img.shape.c; ++c)
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x)
        out.at(0, c, y, x) = img.at(0, c, y0 + y, x0 + x);
  return out;
}

inline std::string pair_file(const char* prefix, int64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%05lld.ppm", prefix, static_cast<long long>(id));
  return buf;
}

}  // namespace detail

// Crops overlapping patches from every readable source image, blurs each with
// an independently seeded random kernel, and writes (blurry, sharp) PPM pairs
// plus a JSONL manifest. Returns the manifest.
inline DatasetManifest build_dataset(const std::vector<std::string>& sources,
                                     const BlurSynthConfig& cfg,
                                     const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  DatasetManifest man;
  man.config = cfg;
  int64_t skipped = 0;
  int64_t id = 0;
  for (const std::string& src : sources) {
    Tensor<float> img;
    try {
      img = read_ppm(src);
    } catch (const ValidationError&) {
      ++skipped;
      continue;
    }
    if (img.shape.h < cfg.patch || img.shape.w < cfg.patch) {
      ++skipped;
      continue;
    }
    for (int64_t y = 0; y + cfg.patch <= img.shape.h; y += cfg.stride)
      for (int64_t x = 0; x + cfg.patch <= img.shape.w; x += cfg.stride) {
        const uint64_t pair_seed = derive_seed(cfg.seed, "pair", uint64_t(id));
        auto [tp, ksize] = detail::sample_pair_params(cfg, pair_seed);
        const BlurKernel kernel = rasterize_kernel(generate_trajectory(tp), ksize);
        const Tensor<float> sharp = detail::crop(img, y, x, cfg.patch);
        const Tensor<float> blurry = apply_blur(sharp, kernel);

        PairRecord rec;
        rec.id = id;
        rec.source = src;
        rec.x = x;
        rec.y = y;
        rec.seed = pair_seed;
        rec.kernel_hash = kernel_hash(kernel);
        rec.blurry = detail::pair_file("blur", id);
        rec.sharp = detail::pair_file("sharp", id);
        write_ppm(out_dir + "/" + rec.blurry, blurry);
        write_ppm(out_dir + "/" + rec.sharp, sharp);
        man.pairs.push_back(rec);
        ++id;
      }
  }
  if (skipped > 0) log_warn(str_cat(skipped, " source image(s) skipped"));
  if (man.pairs.empty()) fail_validation("build_dataset: no pairs produced");

  std::ofstream meta(out_dir + "/meta.json");
  nlohmann::json mj = {{"schema_version", 1},
                       {"config", cfg.to_json()},
                       {"count", man.pairs.size()}};
  meta << mj.dump(2) << "\n";

  std::ofstream pf(out_dir + "/pairs.jsonl");
  for (const PairRecord& r : man.pairs) {
    nlohmann::json j = {{"id", r.id},         {"source", r.source},
                        {"x", r.x},           {"y", r.y},
                        {"seed", r.seed},     {"kernel_hash", r.kernel_hash},
                        {"blurry", r.blurry}, {"sharp", r.sharp}};
    pf << j.dump() << "\n";
  }
  return man;
}

inline DatasetManifest load_manifest(const std::string& dataset_dir) {
  std::ifstream meta(dataset_dir + "/meta.json");
  if (!meta) fail_validation("missing manifest ", dataset_dir, "/meta.json");
  nlohmann::json mj;
  meta >> mj;
  DatasetManifest man;
  man.config = BlurSynthConfig::from_json(mj.at("config"));
  std::ifstream pf(dataset_dir + "/pairs.jsonl");
  if (!pf) fail_validation("missing manifest ", dataset_dir, "/pairs.jsonl");
  std::string line;
  while (std::getline(pf, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    PairRecord r;
    r.id = j.at("id");
    r.source = j.at("source");
    r.x = j.at("x");
    r.y = j.at("y");
    r.seed = j.at("seed");
    r.kernel_hash = j.at("kernel_hash");
    r.blurry = j.at("blurry");
    r.sharp = j.at("sharp");
    man.pairs.push_back(r);
  }
  if (man.pairs.empty()) fail_validation("manifest ", dataset_dir, " lists no pairs");
  return man;
}

// Rebuilds every pair of an existing dataset from its recorded seeds into
// out_dir. Byte-identical to the original generation by construction; the
// kernel hash recorded per pair is re-verified.
inline void regenerate_dataset(const std::string& dataset_dir, const std::string& out_dir) {
  DatasetManifest man = load_manifest(dataset_dir);
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  for (const PairRecord& rec : man.pairs) {
    auto [tp, ksize] = detail::sample_pair_params(man.config, rec.seed);
    const BlurKernel kernel = rasterize_kernel(generate_trajectory(tp), ksize);
    if (kernel_hash(kernel) != rec.kernel_hash)
      fail_numeric("regenerate_dataset: kernel hash mismatch for pair ", rec.id);
    Tensor<float> img = read_ppm(rec.source);
    const Tensor<float> sharp = detail::crop(img, rec.y, rec.x, man.config.patch);
    write_ppm(out_dir + "/" + rec.sharp, sharp);
    write_ppm(out_dir + "/" + rec.blurry, apply_blur(sharp, kernel));
  }
}

}  // namespace osdd
