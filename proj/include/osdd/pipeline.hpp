#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "osdd/adapters.hpp"
#include "osdd/denoiser.hpp"
#include "osdd/discriminator.hpp"
#include "osdd/evae.hpp"
#include "osdd/losses.hpp"
#include "osdd/metrics.hpp"
#include "osdd/schedule.hpp"

namespace osdd {

// ------------------------------------------------------------------ train plan

struct TrainPlan {
  // Progressive resolution ladder; the full-scale default steps through
  // these square crop sizes in order.
  std::vector<int64_t> ladder = {160, 192, 256, 320, 384, 448, 512};
  int64_t iters_per_stage = 10000;
  double lambda1 = 1.0;  // edge-aware perceptual weight
  double lambda2 = 1.0;  // adversarial weight
  int64_t fixed_t = 999;
  uint64_t seed = 1;
  std::string phase = "synthetic";  // "synthetic" trains s, "real" trains r
  int64_t batch = 1;
  double lr = 1e-3;
  double lr_disc = 1e-3;
  int64_t log_every = 50;

  void validate(int64_t downsample_factor, int64_t schedule_steps) const {
    if (ladder.empty()) fail_validation("TrainPlan: empty resolution ladder");
    for (size_t i = 0; i < ladder.size(); ++i) {
      if (ladder[i] < downsample_factor)
        fail_validation("TrainPlan: ladder size ", ladder[i], " too small");
      if (ladder[i] % downsample_factor != 0)
        fail_validation("TrainPlan: ladder size ", ladder[i], " not divisible by f=",
                        downsample_factor);
      if ((ladder[i] / downsample_factor) % 4 != 0)
        fail_validation("TrainPlan: ladder size ", ladder[i], " gives latent ",
                        ladder[i] / downsample_factor,
                        ", which the two-level denoiser needs divisible by 4");
      if (i > 0 && ladder[i] <= ladder[i - 1])
        fail_validation("TrainPlan: ladder must be strictly increasing");
    }
    if (iters_per_stage < 1) fail_validation("TrainPlan: iters_per_stage must be >= 1");
    if (lambda1 < 0 || lambda2 < 0) fail_validation("TrainPlan: lambda weights must be >= 0");
    if (fixed_t < 1 || fixed_t > schedule_steps)
      fail_validation("TrainPlan: fixed_t ", fixed_t, " outside schedule 1..", schedule_steps);
    if (phase != "synthetic" && phase != "real")
      fail_validation("TrainPlan: phase must be 'synthetic' or 'real', got ", phase);
    if (batch < 1) fail_validation("TrainPlan: batch must be >= 1");
    if (lr <= 0 || lr_disc <= 0) fail_validation("TrainPlan: learning rates must be positive");
  }

  nlohmann::json to_json() const {
    return {{"ladder", ladder},         {"iters_per_stage", iters_per_stage},
            {"lambda1", lambda1},       {"lambda2", lambda2},
            {"fixed_t", fixed_t},       {"seed", seed},
            {"phase", phase},           {"batch", batch},
            {"lr", lr},                 {"lr_disc", lr_disc},
            {"log_every", log_every}};
  }

  static TrainPlan from_json(const nlohmann::json& j) {
    TrainPlan p;
    if (j.contains("ladder")) p.ladder = j.at("ladder").get<std::vector<int64_t>>();
    p.iters_per_stage = j.value("iters_per_stage", p.iters_per_stage);
    p.lambda1 = j.value("lambda1", p.lambda1);
    p.lambda2 = j.value("lambda2", p.lambda2);
    p.fixed_t = j.value("fixed_t", p.fixed_t);
    p.seed = j.value("seed", p.seed);
    p.phase = j.value("phase", p.phase);
    p.batch = j.value("batch", p.batch);
    p.lr = j.value("lr", p.lr);
    p.lr_disc = j.value("lr_disc", p.lr_disc);
    p.log_every = j.value("log_every", p.log_every);
    return p;
  }
};

// One metrics-log line; val_mae is only present on validation records.
struct TrainRecord {
  int64_t iteration = 0;
  int64_t stage_resolution = 0;
  double l2 = 0, ea = 0, adv = 0, total = 0, d_loss = 0;
  double val_mae = -1;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"iteration", iteration}, {"stage_resolution", stage_resolution},
                        {"l2", l2},               {"ea", ea},
                        {"adv", adv},             {"total", total},
                        {"d_loss", d_loss}};
    if (val_mae >= 0) j["val_mae"] = val_mae;
    return j;
  }
};

inline void write_records_jsonl(const std::string& path,
                                const std::vector<TrainRecord>& records) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path);
  if (!out) fail_validation("cannot write metrics log ", path);
  for (const auto& r : records) out << r.to_json().dump() << "\n";
}

struct TrainPhaseResult {
  std::vector<TrainRecord> records;
  double initial_val_mae = 0;
  double final_val_mae = 0;
};

// ------------------------------------------------------------------- pipeline

// Full one-step deblurring model: the blurry image's latent stands in for
// the noisy latent at one fixed timestep; a single denoiser evaluation plus
// the closed-form clean-latent estimate replaces the reverse diffusion loop.
template <typename T>
class OsddPipeline {
 public:
  Evae<T>* evae = nullptr;
  Denoiser<T>* den = nullptr;
  DualAdapter<T>* da = nullptr;
  NoiseSchedule sched;
  int64_t fixed_t = 999;

  OsddPipeline(Evae<T>* e, Denoiser<T>* d, DualAdapter<T>* a, NoiseSchedule s,
               int64_t t)
      : evae(e), den(d), da(a), sched(std::move(s)), fixed_t(t) {
    if (!evae || !den || !da) fail_validation("OsddPipeline: null component");
    if (evae->cfg.latent_channels != den->cfg.latent_channels)
      fail_validation("OsddPipeline: eVAE latent channels ", evae->cfg.latent_channels,
                      " != denoiser latent channels ", den->cfg.latent_channels);
    (void)sched.idx(fixed_t);
  }

  // Training graph: all intermediate latents exposed, image before the clamp.
  struct ForwardVars {
    Var<T> z_l;
    std::vector<Var<T>> skips;
    Var<T> eps_hat;
    Var<T> z_hat;
    Var<T> x_hat;
  };

  ForwardVars forward_t(Tape<T>& tp, Var<T> x_l) {
    ForwardVars fv;
    auto [z_l, skips] = evae->encode_with_skips_t(tp, x_l);
    fv.z_l = z_l;
    fv.skips = std::move(skips);
    fv.eps_hat = den->forward_t(tp, fv.z_l, fixed_t, sched, da);
    const double ab = sched.alpha_bar(fixed_t);
    fv.z_hat = scale(sub(fv.z_l, scale(fv.eps_hat, T(std::sqrt(1.0 - ab)))),
                     T(1.0 / std::sqrt(ab)));
    fv.x_hat = evae->decode_t(tp, fv.z_hat,
                              evae->cfg.use_skips ? fv.skips : std::vector<Var<T>>{});
    return fv;
  }

  // Inference: encode, one denoiser evaluation, closed-form clean latent,
  // decode. Output clamped to [0,1].
  Tensor<T> deblur(const Tensor<T>& x_l, double gamma) {
    da->set_gamma(gamma);
    if (gamma > 0.0 && gamma < 1.0 && (da->r.layer_count() == 0 || da->s.layer_count() == 0))
      fail_validation("deblur: gamma ", gamma,
                      " blends both adapter branches but at least one is missing");
    auto enc = evae->encode_with_skips(x_l);
    const Tensor<T> eps_hat = den->forward(enc.latent, fixed_t, sched, da);
    const Tensor<T> z_hat = predict_clean_latent(enc.latent, eps_hat, fixed_t, sched);
    return evae->decode(z_hat, evae->cfg.use_skips ? enc.skips : std::vector<Tensor<T>>{});
  }

  double validation_mae(const std::vector<std::pair<Tensor<T>, Tensor<T>>>& pairs,
                        double gamma) {
    if (pairs.empty()) fail_validation("validation_mae: empty pair list");
    double s = 0;
    for (const auto& [xl, xh] : pairs) s += double(mean_abs_diff(deblur(xl, gamma), xh));
    return s / double(pairs.size());
  }
};

// ------------------------------------------------------------- phase training

namespace detail {

template <typename T>
Tensor<T> crop(const Tensor<T>& t, int64_t oy, int64_t ox, int64_t size) {
  Tensor<T> out(Shape{t.shape.n, t.shape.c, size, size});
  for (int64_t n = 0; n < t.shape.n; ++n)
    for (int64_t c = 0; c < t.shape.c; ++c)
      for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x)
          out.at(n, c, y, x) = t.at(n, c, oy + y, ox + x);
  return out;
}

template <typename T>
void set_trainable(const std::vector<Param<T>*>& ps, bool flag) {
  for (Param<T>* p : ps) p->trainable = flag;
}

}  // namespace detail

// Trains the adapter branch selected by plan.phase (plus the conditioning
// vector and the discriminator) on (blurry, sharp) pairs, walking the
// resolution ladder with random square crops. The eVAE, the denoiser trunk,
// and the inactive adapter branch stay frozen.
template <typename T>
TrainPhaseResult train_phase(OsddPipeline<T>& pipe, LatentDiscriminator<T>& disc,
                             const std::vector<std::pair<Tensor<T>, Tensor<T>>>& train_pairs,
                             const std::vector<std::pair<Tensor<T>, Tensor<T>>>& val_pairs,
                             const TrainPlan& plan) {
  plan.validate(pipe.evae->cfg.downsample_factor, pipe.sched.steps);
  if (train_pairs.empty()) fail_validation("train_phase: empty training set");
  const bool synthetic = plan.phase == "synthetic";
  AdapterSet<T>& active = synthetic ? pipe.da->s : pipe.da->r;
  AdapterSet<T>& inactive = synthetic ? pipe.da->r : pipe.da->s;
  if (active.layer_count() == 0)
    fail_validation("train_phase: the '", plan.phase,
                    "' adapter branch has no attached layers");
  const double phase_gamma = synthetic ? 0.0 : 1.0;
  pipe.da->set_gamma(phase_gamma);
  pipe.fixed_t = plan.fixed_t;

  detail::set_trainable<T>(pipe.evae->params.all(), false);
  detail::set_trainable<T>(pipe.den->trunk_params(), false);
  detail::set_trainable<T>(inactive.params.all(), false);
  detail::set_trainable<T>(active.params.all(), true);
  detail::set_trainable<T>(pipe.den->conditioning_params(), true);
  detail::set_trainable<T>(disc.params.all(), true);

  std::vector<Param<T>*> gen_params = active.params.all();
  for (Param<T>* p : pipe.den->conditioning_params()) gen_params.push_back(p);
  Adam<T> g_opt(gen_params, plan.lr);
  Adam<T> d_opt(disc.params.all(), plan.lr_disc);
  const FeatureExtractor<T> fe = FeatureExtractor<T>::make();
  Rng rng(derive_seed(plan.seed, "train-phase", synthetic ? 0 : 1));
  auto disc_fn = [&disc](Tape<T>& t, Var<T> z) { return disc.prob_t(t, z); };

  TrainPhaseResult result;
  if (!val_pairs.empty()) result.initial_val_mae = pipe.validation_mae(val_pairs, phase_gamma);
  int64_t global_iter = 0;

  for (int64_t rung : plan.ladder) {
    for (const auto& [xl, xh] : train_pairs)
      if (xl.shape.h < rung || xl.shape.w < rung)
        fail_validation("train_phase: dataset image ", xl.shape.str(),
                        " smaller than ladder rung ", rung);

    for (int64_t it = 0; it < plan.iters_per_stage; ++it, ++global_iter) {
      std::vector<Tensor<T>> xls, xhs;
      for (int64_t b = 0; b < plan.batch; ++b) {
        const auto& p = train_pairs[size_t(rng.below(uint64_t(train_pairs.size())))];
        const int64_t oy = int64_t(rng.below(uint64_t(p.first.shape.h - rung + 1)));
        const int64_t ox = int64_t(rng.below(uint64_t(p.first.shape.w - rung + 1)));
        xls.push_back(detail::crop(p.first, oy, ox, rung));
        xhs.push_back(detail::crop(p.second, oy, ox, rung));
      }
      std::vector<const Tensor<T>*> xlp, xhp;
      for (const auto& t : xls) xlp.push_back(&t);
      for (const auto& t : xhs) xhp.push_back(&t);
      const Tensor<T> xl_b = stack_batch(xlp);
      const Tensor<T> xh_b = stack_batch(xhp);

      // generator step (the only denoiser evaluation this iteration)
      Tape<T> tg;
      auto fv = pipe.forward_t(tg, tg.leaf(xl_b));
      GenLossTerms<T> terms = generator_loss_t(tg, fe, fv.x_hat, tg.leaf(xh_b), fv.z_hat,
                                               disc_fn, plan.lambda1, plan.lambda2);
      g_opt.zero_grad();
      tg.backward(terms.total);
      g_opt.step();
      const Tensor<T> z_hat_detached = fv.z_hat.val();

      // discriminator step on detached latents
      Tape<T> td;
      Var<T> z_real = pipe.evae->encode_sharp_t(td, td.leaf(xh_b));
      Var<T> d_loss = discriminator_loss_t(td, z_real, td.leaf(z_hat_detached), disc_fn);
      d_opt.zero_grad();
      td.backward(d_loss);
      d_opt.step();

      const double total = double(terms.total.val().item());
      const double dl = double(d_loss.val().item());
      if (!std::isfinite(total) || !std::isfinite(dl))
        fail_numeric("train_phase: non-finite loss at iteration ", global_iter);
      if (plan.log_every > 0 &&
          (global_iter % plan.log_every == 0 || it + 1 == plan.iters_per_stage)) {
        TrainRecord r;
        r.iteration = global_iter;
        r.stage_resolution = rung;
        r.l2 = terms.l2;
        r.ea = terms.ea;
        r.adv = terms.adv;
        r.total = total;
        r.d_loss = dl;
        result.records.push_back(r);
      }
    }

    if (!val_pairs.empty()) {
      TrainRecord r;
      r.iteration = global_iter;
      r.stage_resolution = rung;
      r.val_mae = pipe.validation_mae(val_pairs, phase_gamma);
      result.records.push_back(r);
      result.final_val_mae = r.val_mae;
    }
  }
  active.provenance = synthetic ? "synthetic" : "real";
  return result;
}

}  // namespace osdd
