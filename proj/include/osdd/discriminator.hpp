#pragma once

#include <cstdint>

#include <nlohmann/json.hpp>

#include "osdd/layers.hpp"
#include "osdd/ops.hpp"

namespace osdd {

struct DiscConfig {
  int64_t latent_channels = 4;
  int64_t base_channels = 32;
  int64_t mlp_hidden = 64;

  void validate() const {
    if (latent_channels < 1 || base_channels < 1 || mlp_hidden < 1)
      fail_validation("DiscConfig: all widths must be positive");
  }

  nlohmann::json to_json() const {
    return {{"latent_channels", latent_channels},
            {"base_channels", base_channels},
            {"mlp_hidden", mlp_hidden}};
  }

  static DiscConfig from_json(const nlohmann::json& j) {
    DiscConfig c;
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.validate();
    return c;
  }
};

// Real/fake probability for a latent: a downsampling convolutional block,
// global average pooling (so any latent resolution works), then a small MLP
// ending in a sigmoid. Output is per-sample, shape (N,1,1,1), in (0,1).
template <typename T>
class LatentDiscriminator {
 public:
  DiscConfig cfg;
  ParamStore<T> params;

  explicit LatentDiscriminator(DiscConfig config, uint64_t seed = 0xD15CULL) : cfg(config) {
    cfg.validate();
    Rng rng(derive_seed(seed, "disc-init"));
    const int64_t B = cfg.base_channels;
    c1_ = Conv2dLayer<T>::make(params, "c1", cfg.latent_channels, B, 3, 2, 1, rng);
    n1_ = GroupNormLayer<T>::make(params, "n1", B);
    c2_ = Conv2dLayer<T>::make(params, "c2", B, 2 * B, 3, 2, 1, rng);
    n2_ = GroupNormLayer<T>::make(params, "n2", 2 * B);
    fc1_ = LinearLayer<T>::make(params, "fc1", 2 * B, cfg.mlp_hidden, rng);
    fc2_ = LinearLayer<T>::make(params, "fc2", cfg.mlp_hidden, 1, rng);
  }

  Var<T> prob_t(Tape<T>& tp, Var<T> z) const {
    if (z.shape().c != cfg.latent_channels)
      fail_validation("discriminator: latent has ", z.shape().c, " channels, expected ",
                      cfg.latent_channels);
    Var<T> h = leaky_relu(n1_.forward(tp, c1_.forward(tp, z)), T(0.2));
    h = leaky_relu(n2_.forward(tp, c2_.forward(tp, h)), T(0.2));
    h = mean_hw(h);
    h = leaky_relu(fc1_.forward(tp, h), T(0.2));
    return sigmoid_op(fc2_.forward(tp, h));
  }

  Tensor<T> prob(const Tensor<T>& z) const {
    Tape<T> tp;
    return prob_t(tp, tp.leaf(z)).val();
  }

 private:
  Conv2dLayer<T> c1_, c2_;
  GroupNormLayer<T> n1_, n2_;
  LinearLayer<T> fc1_, fc2_;
};

}  // namespace osdd
