#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "osdd/layers.hpp"
#include "osdd/ops.hpp"
#include "osdd/perceptual.hpp"
#include "osdd/rng.hpp"

namespace osdd {

// ---------------------------------------------------------------- config

struct EvaeConfig {
  int64_t downsample_factor = 8;  // f in {2,4,8}; latent is image size / f
  int64_t latent_channels = 4;    // c
  int64_t base_channels = 32;
  int64_t skip_conv_depth = 2;  // convolutions per decoder skip branch
  bool use_skips = true;

  int64_t levels() const {
    int64_t l = 0, f = downsample_factor;
    while (f > 1) {
      f >>= 1;
      ++l;
    }
    return l;
  }

  // Feature width at resolution level k (k = 0 is full resolution).
  int64_t channels(int64_t k) const {
    return base_channels * std::min<int64_t>(int64_t(1) << k, 4);
  }

  void validate() const {
    if (downsample_factor != 2 && downsample_factor != 4 && downsample_factor != 8)
      fail_validation("EvaeConfig: downsample_factor must be 2, 4, or 8, got ",
                      downsample_factor);
    if (latent_channels < 1)
      fail_validation("EvaeConfig: latent_channels must be positive, got ", latent_channels);
    if (base_channels < 1)
      fail_validation("EvaeConfig: base_channels must be positive, got ", base_channels);
    if (skip_conv_depth < 1)
      fail_validation("EvaeConfig: skip_conv_depth must be >= 1, got ", skip_conv_depth);
  }

  nlohmann::json to_json() const {
    return {{"downsample_factor", downsample_factor},
            {"latent_channels", latent_channels},
            {"base_channels", base_channels},
            {"skip_conv_depth", skip_conv_depth},
            {"use_skips", use_skips}};
  }

  static EvaeConfig from_json(const nlohmann::json& j) {
    EvaeConfig c;
    c.downsample_factor = j.value("downsample_factor", c.downsample_factor);
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.skip_conv_depth = j.value("skip_conv_depth", c.skip_conv_depth);
    c.use_skips = j.value("use_skips", c.use_skips);
    c.validate();
    return c;
  }
};

// --------------------------------------------------------------------- model

// Skip-connected VAE with two encoders sharing one decoder. Encoder 1 reads
// the blurry image and provides the skip features (taken from the last layer
// before each downsampling); encoder 2 reads the sharp image and provides the
// latent the diffusion model operates on. Latents are deterministic encoder
// means; no sampling or KL term.
template <typename T>
class Evae {
 public:
  EvaeConfig cfg;
  ParamStore<T> params;

  explicit Evae(EvaeConfig config, uint64_t seed = 0x0E7AEULL) : cfg(config) {
    cfg.validate();
    Rng rng(derive_seed(seed, "evae-init"));
    enc1_ = build_encoder("enc1", rng);
    enc2_ = build_encoder("enc2", rng);
    build_decoder(rng);
  }

  // ------------------------------------------------------------ tape paths

  // Encoder 1: latent plus one skip map per resolution level.
  std::pair<Var<T>, std::vector<Var<T>>> encode_with_skips_t(Tape<T>& tp, Var<T> x) {
    return encode_impl(tp, x, enc1_);
  }

  // Encoder 2: latent only.
  Var<T> encode_sharp_t(Tape<T>& tp, Var<T> x) { return encode_impl(tp, x, enc2_).first; }

  // Decoder output before the [0,1] clamp (training operates on this; the
  // tensor-level decode() clamps).
  Var<T> decode_t(Tape<T>& tp, Var<T> z, const std::vector<Var<T>>& skips) {
    const Shape zs = z.shape();
    if (zs.c != cfg.latent_channels)
      fail_validation("decode: latent has ", zs.c, " channels, expected ", cfg.latent_channels);
    const int64_t levels = cfg.levels();
    if (cfg.use_skips) {
      if (int64_t(skips.size()) != levels)
        fail_validation("decode: got ", skips.size(), " skip maps, expected ", levels);
      for (int64_t k = 0; k < levels; ++k) {
        const Shape ss = skips[size_t(k)].shape();
        const Shape want{zs.n, cfg.channels(k), zs.h << (levels - k), zs.w << (levels - k)};
        if (ss != want)
          fail_validation("decode: skip level ", k, " has shape ", ss.str(), ", expected ",
                          want.str());
      }
    } else if (!skips.empty()) {
      fail_validation("decode: this model was built without skip connections; got ",
                      skips.size(), " skip maps");
    }

    Var<T> h = dec_in_.forward(tp, z);
    h = dec_mid_.forward(tp, h);
    for (int64_t k = levels - 1; k >= 0; --k) {
      const DecLevel& L = dec_levels_[size_t(k)];
      h = L.up.forward(tp, upsample_nearest2x(h));
      if (cfg.use_skips) {
        Var<T> s = skips[size_t(k)];
        for (size_t i = 0; i < L.skip_branch.size(); ++i) {
          if (i > 0) s = silu(s);
          s = L.skip_branch[i].forward(tp, s);
        }
        h = concat_ch(h, s);
      }
      h = L.fuse.forward(tp, h);
      h = L.r1.forward(tp, h);
      h = L.r2.forward(tp, h);
    }
    h = silu(dec_out_norm_.forward(tp, h));
    return dec_out_.forward(tp, h);
  }

  // -------------------------------------------------- tensor-level inference

  struct EncodeResult {
    Tensor<T> latent;
    std::vector<Tensor<T>> skips;
  };

  EncodeResult encode_with_skips(const Tensor<T>& x) {
    Tape<T> tp;
    auto [z, sk] = encode_with_skips_t(tp, tp.leaf(x));
    EncodeResult r;
    r.latent = z.val();
    for (Var<T> s : sk) r.skips.push_back(s.val());
    return r;
  }

  Tensor<T> encode_sharp(const Tensor<T>& x) {
    Tape<T> tp;
    return encode_sharp_t(tp, tp.leaf(x)).val();
  }

  Tensor<T> decode(const Tensor<T>& z, const std::vector<Tensor<T>>& skips) {
    Tape<T> tp;
    std::vector<Var<T>> sv;
    sv.reserve(skips.size());
    for (const auto& s : skips) sv.push_back(tp.leaf(s));
    Tensor<T> img = decode_t(tp, tp.leaf(z), sv).val();
    for (auto& v : img.data) v = std::min(T(1), std::max(T(0), v));
    return img;
  }

 private:
  struct EncLevel {
    ResBlock<T> r1, r2;
    Conv2dLayer<T> down;
  };
  struct Encoder {
    Conv2dLayer<T> stem;
    std::vector<EncLevel> levels;
    ResBlock<T> mid;
    GroupNormLayer<T> head_norm;
    Conv2dLayer<T> head;
  };
  struct DecLevel {
    Conv2dLayer<T> up;
    std::vector<Conv2dLayer<T>> skip_branch;
    Conv2dLayer<T> fuse;
    ResBlock<T> r1, r2;
  };

  Encoder build_encoder(const std::string& prefix, Rng& rng) {
    Encoder e;
    e.stem = Conv2dLayer<T>::make(params, prefix + ".stem", 3, cfg.channels(0), 3, 1, 1, rng);
    for (int64_t k = 0; k < cfg.levels(); ++k) {
      EncLevel l;
      const std::string lname = str_cat(prefix, ".l", k);
      l.r1 = ResBlock<T>::make(params, lname + ".r1", cfg.channels(k), rng);
      l.r2 = ResBlock<T>::make(params, lname + ".r2", cfg.channels(k), rng);
      l.down = Conv2dLayer<T>::make(params, lname + ".down", cfg.channels(k),
                                    cfg.channels(k + 1), 3, 2, 1, rng);
      e.levels.push_back(std::move(l));
    }
    const int64_t top = cfg.channels(cfg.levels());
    e.mid = ResBlock<T>::make(params, prefix + ".mid", top, rng);
    e.head_norm = GroupNormLayer<T>::make(params, prefix + ".head_norm", top);
    e.head = Conv2dLayer<T>::make(params, prefix + ".head", top, cfg.latent_channels, 3, 1, 1,
                                  rng);
    return e;
  }

  void build_decoder(Rng& rng) {
    const int64_t top = cfg.channels(cfg.levels());
    dec_in_ = Conv2dLayer<T>::make(params, "dec.conv_in", cfg.latent_channels, top, 3, 1, 1, rng);
    dec_mid_ = ResBlock<T>::make(params, "dec.mid", top, rng);
    dec_levels_.resize(size_t(cfg.levels()));
    for (int64_t k = cfg.levels() - 1; k >= 0; --k) {
      DecLevel l;
      const std::string lname = str_cat("dec.l", k);
      const int64_t ch = cfg.channels(k);
      l.up = Conv2dLayer<T>::make(params, lname + ".up", cfg.channels(k + 1), ch, 3, 1, 1, rng);
      if (cfg.use_skips) {
        for (int64_t i = 0; i < cfg.skip_conv_depth; ++i)
          l.skip_branch.push_back(
              Conv2dLayer<T>::make(params, str_cat(lname, ".skip", i), ch, ch, 3, 1, 1, rng));
      }
      // The fuse conv is the level's first trunk layer; with skips it consumes
      // the channel concat [upsampled | skip], without it just the upsampled
      // path, so the two variants share trunk weights up to input width.
      l.fuse = Conv2dLayer<T>::make(params, lname + ".fuse", cfg.use_skips ? 2 * ch : ch, ch, 3,
                                    1, 1, rng);
      l.r1 = ResBlock<T>::make(params, lname + ".r1", ch, rng);
      l.r2 = ResBlock<T>::make(params, lname + ".r2", ch, rng);
      dec_levels_[size_t(k)] = std::move(l);
    }
    dec_out_norm_ = GroupNormLayer<T>::make(params, "dec.out_norm", cfg.channels(0));
    dec_out_ = Conv2dLayer<T>::make(params, "dec.out", cfg.channels(0), 3, 3, 1, 1, rng);
  }

  std::pair<Var<T>, std::vector<Var<T>>> encode_impl(Tape<T>& tp, Var<T> x, const Encoder& E) {
    const Shape xs = x.shape();
    if (xs.c != 3) fail_validation("encode: expected 3-channel image, got ", xs.str());
    const int64_t f = cfg.downsample_factor;
    if (xs.h % f != 0 || xs.w % f != 0)
      fail_validation("encode: spatial dims ", xs.h, "x", xs.w,
                      " must be divisible by downsample_factor ", f);

    Var<T> h = E.stem.forward(tp, x);
    std::vector<Var<T>> skips;
    for (size_t k = 0; k < E.levels.size(); ++k) {
      h = E.levels[k].r1.forward(tp, h);
      h = E.levels[k].r2.forward(tp, h);
      skips.push_back(h);  // last layer before downsampling
      h = E.levels[k].down.forward(tp, h);
    }
    h = E.mid.forward(tp, h);
    h = silu(E.head_norm.forward(tp, h));
    return {E.head.forward(tp, h), std::move(skips)};
  }

  Encoder enc1_, enc2_;
  Conv2dLayer<T> dec_in_;
  ResBlock<T> dec_mid_;
  std::vector<DecLevel> dec_levels_;
  GroupNormLayer<T> dec_out_norm_;
  Conv2dLayer<T> dec_out_;
};

// ----------------------------------------------------------------------- loss

// Reconstruction loss: mean absolute error plus alpha times the perceptual
// distance under the fixed feature extractor.
template <typename T>
Var<T> evae_loss_t(Tape<T>& tp, const FeatureExtractor<T>& fe, Var<T> x_hat, Var<T> x,
                   double alpha) {
  if (alpha < 0) fail_validation("evae_loss: alpha must be >= 0, got ", alpha);
  if (x_hat.shape() != x.shape())
    fail_validation("evae_loss: shape mismatch ", x_hat.shape().str(), " vs ", x.shape().str());
  Var<T> l1 = l1_loss(x_hat, x);
  if (alpha == 0) return l1;
  return add(l1, scale(perceptual_distance(tp, fe, x_hat, x), T(alpha)));
}

template <typename T>
double evae_loss(const FeatureExtractor<T>& fe, const Tensor<T>& x_hat, const Tensor<T>& x,
                 double alpha) {
  Tape<T> tp;
  return double(evae_loss_t(tp, fe, tp.leaf(x_hat), tp.leaf(x), alpha).val().item());
}

// ------------------------------------------------------------------- training

struct EvaeTrainConfig {
  int64_t iters = 2000;
  int64_t batch = 4;
  double lr = 1e-3;
  double alpha_override = -1.0;  // < 0: auto-balance alpha from loss-term EMAs
  int64_t alpha_update_every = 100;
  double alpha_min = 0.1;
  double alpha_max = 10.0;
  double ema_decay = 0.99;
  uint64_t seed = 1;
  int64_t log_every = 0;  // > 0: print progress every N iterations

  void validate() const {
    if (iters < 1) fail_validation("EvaeTrainConfig: iters must be >= 1");
    if (batch < 1) fail_validation("EvaeTrainConfig: batch size must be >= 1");
    if (lr <= 0) fail_validation("EvaeTrainConfig: lr must be positive");
    if (alpha_update_every < 1) fail_validation("EvaeTrainConfig: alpha_update_every must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"iters", iters},
            {"batch", batch},
            {"lr", lr},
            {"alpha_override", alpha_override},
            {"alpha_update_every", alpha_update_every},
            {"alpha_min", alpha_min},
            {"alpha_max", alpha_max},
            {"ema_decay", ema_decay},
            {"seed", seed},
            {"log_every", log_every}};
  }

  static EvaeTrainConfig from_json(const nlohmann::json& j) {
    EvaeTrainConfig c;
    c.iters = j.value("iters", c.iters);
    c.batch = j.value("batch", c.batch);
    c.lr = j.value("lr", c.lr);
    c.alpha_override = j.value("alpha_override", c.alpha_override);
    c.alpha_update_every = j.value("alpha_update_every", c.alpha_update_every);
    c.alpha_min = j.value("alpha_min", c.alpha_min);
    c.alpha_max = j.value("alpha_max", c.alpha_max);
    c.ema_decay = j.value("ema_decay", c.ema_decay);
    c.seed = j.value("seed", c.seed);
    c.log_every = j.value("log_every", c.log_every);
    c.validate();
    return c;
  }
};

struct EvaeTrainResult {
  std::vector<double> loss_history;  // total loss per iteration
  double final_alpha = 1.0;
};

// Stack same-shaped (1,C,H,W) tensors along the batch dimension.
template <typename T>
Tensor<T> stack_batch(const std::vector<const Tensor<T>*>& items) {
  if (items.empty()) fail_validation("stack_batch: empty list");
  const Shape s0 = items[0]->shape;
  Tensor<T> out(Shape{int64_t(items.size()) * s0.n, s0.c, s0.h, s0.w});
  int64_t off = 0;
  for (const Tensor<T>* t : items) {
    if (t->shape != s0)
      fail_validation("stack_batch: shape mismatch ", t->shape.str(), " vs ", s0.str());
    std::copy(t->data.begin(), t->data.end(), out.data.begin() + off);
    off += t->numel();
  }
  return out;
}

// Train both encoders and the decoder simultaneously: reconstruct the sharp
// image from encoder 2's latent and encoder 1's skip features of the blurry
// image. The perceptual weight alpha tracks the ratio of the two loss terms
// unless overridden.
template <typename T>
EvaeTrainResult train_evae(Evae<T>& model,
                           const std::vector<std::pair<Tensor<T>, Tensor<T>>>& pairs,
                           const EvaeTrainConfig& tc) {
  tc.validate();
  if (pairs.empty()) fail_validation("train_evae: empty dataset");
  const FeatureExtractor<T> fe = FeatureExtractor<T>::make();
  Adam<T> opt(model.params.all(), tc.lr);
  Rng rng(derive_seed(tc.seed, "train-evae"));

  EvaeTrainResult out;
  double alpha = tc.alpha_override >= 0 ? tc.alpha_override : 1.0;
  double l1_ema = 0, lp_ema = 0;
  bool ema_ready = false;

  for (int64_t it = 0; it < tc.iters; ++it) {
    std::vector<const Tensor<T>*> xl, xh;
    for (int64_t b = 0; b < tc.batch; ++b) {
      const auto& p = pairs[size_t(rng.below(uint64_t(pairs.size())))];
      xl.push_back(&p.first);
      xh.push_back(&p.second);
    }
    Tape<T> tp;
    Var<T> vxl = tp.leaf(stack_batch(xl));
    Var<T> vxh = tp.leaf(stack_batch(xh));
    auto [zl_unused, skips] = model.encode_with_skips_t(tp, vxl);
    (void)zl_unused;
    Var<T> z = model.encode_sharp_t(tp, vxh);
    Var<T> xhat = model.decode_t(tp, z, model.cfg.use_skips ? skips : std::vector<Var<T>>{});

    Var<T> l1 = l1_loss(xhat, vxh);
    Var<T> lp = perceptual_distance(tp, fe, xhat, vxh);
    Var<T> loss = add(l1, scale(lp, T(alpha)));
    opt.zero_grad();
    tp.backward(loss);
    opt.step();

    const double l1v = double(l1.val().item());
    const double lpv = double(lp.val().item());
    out.loss_history.push_back(double(loss.val().item()));
    if (!ema_ready) {
      l1_ema = l1v;
      lp_ema = lpv;
      ema_ready = true;
    } else {
      l1_ema = tc.ema_decay * l1_ema + (1 - tc.ema_decay) * l1v;
      lp_ema = tc.ema_decay * lp_ema + (1 - tc.ema_decay) * lpv;
    }
    if (tc.alpha_override < 0 && (it + 1) % tc.alpha_update_every == 0 && lp_ema > 0)
      alpha = std::min(tc.alpha_max, std::max(tc.alpha_min, l1_ema / lp_ema));
    if (tc.log_every > 0 && (it % tc.log_every == 0 || it + 1 == tc.iters))
      std::fprintf(stderr, "[evae] iter %lld loss %.6f l1 %.6f lp %.6f alpha %.3f\n",
                   (long long)it, out.loss_history.back(), l1v, lpv, alpha);
  }
  out.final_alpha = alpha;
  return out;
}

}  // namespace osdd
