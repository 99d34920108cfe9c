#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "osdd/adapters.hpp"
#include "osdd/layers.hpp"
#include "osdd/ops.hpp"
#include "osdd/schedule.hpp"

namespace osdd {

struct DenoiserConfig {
  int64_t latent_channels = 4;
  int64_t base_channels = 32;
  int64_t cond_dim = 64;  // learned conditioning vector length
  int64_t time_dim = 32;  // sinusoidal timestep embedding size (even)

  void validate() const {
    if (latent_channels < 1) fail_validation("DenoiserConfig: latent_channels must be positive");
    if (base_channels < 1) fail_validation("DenoiserConfig: base_channels must be positive");
    if (cond_dim < 1) fail_validation("DenoiserConfig: cond_dim must be positive");
    if (time_dim < 2 || time_dim % 2 != 0)
      fail_validation("DenoiserConfig: time_dim must be a positive even number, got ", time_dim);
  }

  nlohmann::json to_json() const {
    return {{"latent_channels", latent_channels},
            {"base_channels", base_channels},
            {"cond_dim", cond_dim},
            {"time_dim", time_dim}};
  }

  static DenoiserConfig from_json(const nlohmann::json& j) {
    DenoiserConfig c;
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.cond_dim = j.value("cond_dim", c.cond_dim);
    c.time_dim = j.value("time_dim", c.time_dim);
    c.validate();
    return c;
  }
};

// Standard sinusoidal embedding of a (1-based) timestep index.
template <typename T>
Tensor<T> sinusoidal_time_embedding(int64_t t, int64_t dim) {
  if (dim < 2 || dim % 2 != 0)
    fail_validation("sinusoidal_time_embedding: dim must be a positive even number, got ", dim);
  Tensor<T> e(Shape{1, dim, 1, 1});
  const int64_t half = dim / 2;
  for (int64_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
    e.data[size_t(i)] = T(std::sin(double(t) * freq));
    e.data[size_t(i + half)] = T(std::cos(double(t) * freq));
  }
  return e;
}

// Noise-prediction network: a small latent U-net (two down / two up levels)
// with an additive timestep embedding per level and a learned conditioning
// vector injected by feature-wise modulation at the bottleneck. Every trunk
// convolution routes through the optional dual adapter; the embedding and
// modulation layers are not adapted.
template <typename T>
class Denoiser {
 public:
  DenoiserConfig cfg;
  ParamStore<T> params;
  mutable int64_t forward_count = 0;  // one-step contract instrumentation

  explicit Denoiser(DenoiserConfig config, uint64_t seed = 0xDE01ULL) : cfg(config) {
    cfg.validate();
    Rng rng(derive_seed(seed, "denoiser-init"));
    const int64_t B = cfg.base_channels;

    stem_ = Conv2dLayer<T>::make(params, "stem", cfg.latent_channels, B, 3, 1, 1, rng);
    rb0_ = ResBlock<T>::make(params, "l0.rb", B, rng);
    down1_ = Conv2dLayer<T>::make(params, "down1", B, 2 * B, 3, 2, 1, rng);
    rb1_ = ResBlock<T>::make(params, "l1.rb", 2 * B, rng);
    down2_ = Conv2dLayer<T>::make(params, "down2", 2 * B, 4 * B, 3, 2, 1, rng);
    mid1_ = ResBlock<T>::make(params, "mid.rb1", 4 * B, rng);
    mid2_ = ResBlock<T>::make(params, "mid.rb2", 4 * B, rng);
    up1_ = Conv2dLayer<T>::make(params, "up1", 4 * B, 2 * B, 3, 1, 1, rng);
    fuse1_ = Conv2dLayer<T>::make(params, "fuse1", 4 * B, 2 * B, 3, 1, 1, rng);
    urb1_ = ResBlock<T>::make(params, "l1u.rb", 2 * B, rng);
    up0_ = Conv2dLayer<T>::make(params, "up0", 2 * B, B, 3, 1, 1, rng);
    fuse0_ = Conv2dLayer<T>::make(params, "fuse0", 2 * B, B, 3, 1, 1, rng);
    urb0_ = ResBlock<T>::make(params, "l0u.rb", B, rng);
    out_norm_ = GroupNormLayer<T>::make(params, "out_norm", B);
    out_ = Conv2dLayer<T>::make(params, "out", B, cfg.latent_channels, 3, 1, 1, rng);

    temb_fc_ = LinearLayer<T>::make(params, "temb.fc", cfg.time_dim, cfg.time_dim, rng);
    temb_to_[0] = LinearLayer<T>::make(params, "temb.to_l0", cfg.time_dim, B, rng);
    temb_to_[1] = LinearLayer<T>::make(params, "temb.to_l1", cfg.time_dim, 2 * B, rng);
    temb_to_[2] = LinearLayer<T>::make(params, "temb.to_l2", cfg.time_dim, 4 * B, rng);

    cond_ = &params.add("cond.c", uniform_init<T>(Shape{1, cfg.cond_dim, 1, 1}, -0.1, 0.1, rng));
    film_ = LinearLayer<T>::make(params, "cond.film", cfg.cond_dim, 8 * B, rng);
    // Start feature-wise modulation at identity (scale 1, shift 0).
    std::fill(film_.w->value.data.begin(), film_.w->value.data.end(), T(0));
  }

  Param<T>& conditioning() { return *cond_; }

  // The conditioning vector plus its feature-wise modulation projection.
  // The projection starts at zero, so it must train alongside the vector;
  // a frozen zero projection would block all gradient to the vector.
  std::vector<Param<T>*> conditioning_params() {
    std::vector<Param<T>*> out;
    for (Param<T>* p : params.all())
      if (p->name.rfind("cond.", 0) == 0) out.push_back(p);
    return out;
  }

  // Trunk layers eligible for adapters: all convolutions, excluding the
  // normalization, timestep-embedding, and conditioning layers.
  AdaptableLayers<T> adaptable() {
    AdaptableLayers<T> a;
    a.convs = {{"stem", &stem_},     {"l0.rb.c1", &rb0_.c1},   {"l0.rb.c2", &rb0_.c2},
               {"down1", &down1_},   {"l1.rb.c1", &rb1_.c1},   {"l1.rb.c2", &rb1_.c2},
               {"down2", &down2_},   {"mid.rb1.c1", &mid1_.c1}, {"mid.rb1.c2", &mid1_.c2},
               {"mid.rb2.c1", &mid2_.c1}, {"mid.rb2.c2", &mid2_.c2}, {"up1", &up1_},
               {"fuse1", &fuse1_},   {"l1u.rb.c1", &urb1_.c1}, {"l1u.rb.c2", &urb1_.c2},
               {"up0", &up0_},       {"fuse0", &fuse0_},       {"l0u.rb.c1", &urb0_.c1},
               {"l0u.rb.c2", &urb0_.c2}, {"out", &out_}};
    return a;
  }

  // Everything except the conditioning pathway; frozen during adapter phases.
  std::vector<Param<T>*> trunk_params() {
    std::vector<Param<T>*> out;
    for (Param<T>* p : params.all())
      if (p->name.rfind("cond.", 0) != 0) out.push_back(p);
    return out;
  }

  Var<T> forward_t(Tape<T>& tp, Var<T> z, int64_t t, const NoiseSchedule& sched,
                   const DualAdapter<T>* da = nullptr) const {
    const Shape zs = z.shape();
    if (zs.c != cfg.latent_channels)
      fail_validation("denoiser: latent has ", zs.c, " channels, expected ",
                      cfg.latent_channels);
    if (zs.h % 4 != 0 || zs.w % 4 != 0)
      fail_validation("denoiser: latent spatial dims ", zs.h, "x", zs.w,
                      " must be divisible by 4 (two downsampling levels)");
    (void)sched.idx(t);  // validates the timestep range
    ++forward_count;

    Var<T> temb = tp.leaf(sinusoidal_time_embedding<T>(t, cfg.time_dim));
    temb = silu(temb_fc_.forward(tp, temb));
    auto temb_at = [&](int level) { return temb_to_[level].forward(tp, temb); };

    Var<T> h = conv(tp, "stem", stem_, z, da);
    h = res(tp, "l0.rb", rb0_, add_channel(h, temb_at(0)), da);
    Var<T> skip0 = h;
    h = conv(tp, "down1", down1_, h, da);
    h = res(tp, "l1.rb", rb1_, add_channel(h, temb_at(1)), da);
    Var<T> skip1 = h;
    h = conv(tp, "down2", down2_, h, da);
    h = res(tp, "mid.rb1", mid1_, add_channel(h, temb_at(2)), da);

    // conditioning: h <- h * (1 + scale) + shift, both derived from c
    Var<T> film = film_.forward(tp, cond_->use(tp));
    const int64_t mid_ch = 4 * cfg.base_channels;
    Var<T> fs = slice_ch(film, 0, mid_ch);
    Var<T> fb = slice_ch(film, mid_ch, mid_ch);
    h = add_channel(mul_channel(h, add_const(fs, T(1))), fb);
    h = res(tp, "mid.rb2", mid2_, h, da);

    h = conv(tp, "up1", up1_, upsample_nearest2x(h), da);
    h = conv(tp, "fuse1", fuse1_, concat_ch(h, skip1), da);
    h = res(tp, "l1u.rb", urb1_, h, da);
    h = conv(tp, "up0", up0_, upsample_nearest2x(h), da);
    h = conv(tp, "fuse0", fuse0_, concat_ch(h, skip0), da);
    h = res(tp, "l0u.rb", urb0_, h, da);
    h = silu(out_norm_.forward(tp, h));
    return conv(tp, "out", out_, h, da);
  }

  Tensor<T> forward(const Tensor<T>& z, int64_t t, const NoiseSchedule& sched,
                    const DualAdapter<T>* da = nullptr) const {
    Tape<T> tp;
    return forward_t(tp, tp.leaf(z), t, sched, da).val();
  }

 private:
  Var<T> conv(Tape<T>& tp, const std::string& name, const Conv2dLayer<T>& l, Var<T> x,
              const DualAdapter<T>* da) const {
    return da && da->adapts(name) ? da->conv_forward(tp, name, l, x) : l.forward(tp, x);
  }

  Var<T> res(Tape<T>& tp, const std::string& name, const ResBlock<T>& rb, Var<T> x,
             const DualAdapter<T>* da) const {
    Var<T> h = silu(rb.n1.forward(tp, x));
    h = conv(tp, name + ".c1", rb.c1, h, da);
    h = silu(rb.n2.forward(tp, h));
    h = conv(tp, name + ".c2", rb.c2, h, da);
    return add(x, h);
  }

  Conv2dLayer<T> stem_, down1_, down2_, up1_, fuse1_, up0_, fuse0_, out_;
  ResBlock<T> rb0_, rb1_, mid1_, mid2_, urb1_, urb0_;
  GroupNormLayer<T> out_norm_;
  LinearLayer<T> temb_fc_;
  LinearLayer<T> temb_to_[3];
  Param<T>* cond_ = nullptr;
  LinearLayer<T> film_;
};

}  // namespace osdd
