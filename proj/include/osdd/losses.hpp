#pragma once

#include <cmath>
#include <cstdint>

#include "osdd/ops.hpp"
#include "osdd/perceptual.hpp"

namespace osdd {

namespace detail {

// Probabilities feed logs; values at or beyond the (0,1) bounds (possible
// once a sigmoid saturates in float) are clamped to [eps, 1] with a warning.
template <typename T>
Var<T> safe_log_prob(Tape<T>& tp, Var<T> p, const char* who) {
  (void)tp;
  const Tensor<T>& v = p.val();
  for (T x : v.data)
    if (!(double(x) > 0.0 && double(x) < 1.0)) {
      log_warn(str_cat(who, ": discriminator output ", double(x),
                       " outside (0,1); clamping with epsilon 1e-7"));
      break;
    }
  return log_op(clamp_op(p, T(1e-7), T(1)));
}

template <typename T>
void check_term_finite(const Var<T>& term, const char* name) {
  if (!term.val().all_finite())
    fail_numeric("generator loss term '", name, "' is non-finite");
}

}  // namespace detail

// Per-term breakdown of the composite generator loss
//   L = L2(x_hat, x_h) + lambda1 * L_EA(x_hat, x_h) + lambda2 * (-E[log D(z_hat)])
// `total` stays on the tape for backprop; the doubles are for logging.
template <typename T>
struct GenLossTerms {
  Var<T> total;
  double l2 = 0, ea = 0, adv = 0;
};

// `disc` is any callable (Tape<T>&, Var<T>) -> Var<T> yielding per-sample
// probabilities; tests substitute forced-output oracles for it.
template <typename T, typename DiscFn>
GenLossTerms<T> generator_loss_t(Tape<T>& tp, const FeatureExtractor<T>& fe, Var<T> x_hat,
                                 Var<T> x_h, Var<T> z_hat, DiscFn&& disc, double lambda1,
                                 double lambda2) {
  if (lambda1 < 0 || lambda2 < 0)
    fail_validation("generator_loss: lambda weights must be >= 0, got ", lambda1, ", ", lambda2);
  if (x_hat.shape() != x_h.shape())
    fail_validation("generator_loss: image shape mismatch ", x_hat.shape().str(), " vs ",
                    x_h.shape().str());

  GenLossTerms<T> out;
  Var<T> total = mse_loss(x_hat, x_h);
  detail::check_term_finite(total, "L2");
  out.l2 = double(total.val().item());

  if (lambda1 > 0) {
    Var<T> ea = ea_perceptual_loss(tp, fe, x_hat, x_h);
    detail::check_term_finite(ea, "edge-aware perceptual");
    out.ea = double(ea.val().item());
    total = add(total, scale(ea, T(lambda1)));
  }
  if (lambda2 > 0) {
    Var<T> adv = neg(mean_all(detail::safe_log_prob(tp, disc(tp, z_hat), "generator_loss")));
    detail::check_term_finite(adv, "adversarial");
    out.adv = double(adv.val().item());
    total = add(total, scale(adv, T(lambda2)));
  }
  out.total = total;
  return out;
}

// L_D = -E[log D(z_h)] - E[log(1 - D(z_hat))]; callers pass an already
// detached z_hat when alternating with generator updates.
template <typename T, typename DiscFn>
Var<T> discriminator_loss_t(Tape<T>& tp, Var<T> z_h, Var<T> z_hat, DiscFn&& disc) {
  if (z_h.shape() != z_hat.shape())
    fail_validation("discriminator_loss: latent shape mismatch ", z_h.shape().str(), " vs ",
                    z_hat.shape().str());
  Var<T> real_term = neg(mean_all(detail::safe_log_prob(tp, disc(tp, z_h),
                                                        "discriminator_loss")));
  Var<T> fake_prob = add_const(neg(disc(tp, z_hat)), T(1));  // 1 - D(z_hat)
  Var<T> fake_term = neg(mean_all(detail::safe_log_prob(tp, fake_prob, "discriminator_loss")));
  Var<T> loss = add(real_term, fake_term);
  if (!loss.val().all_finite()) fail_numeric("discriminator loss is non-finite");
  return loss;
}

}  // namespace osdd
