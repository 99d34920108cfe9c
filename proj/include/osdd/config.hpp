#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "osdd/blur.hpp"
#include "osdd/denoiser.hpp"
#include "osdd/discriminator.hpp"
#include "osdd/evae.hpp"
#include "osdd/pipeline.hpp"

namespace osdd {

// Everything a full run needs, loadable from one JSON file. Sub-seeds are
// derived from the single root seed by resolve_seeds(), so one number
// controls data synthesis, initialization, and both training phases.
struct RunConfig {
  RunConfig() { real_plan.phase = "real"; }

  uint64_t seed = 1;
  std::string run_dir = "runs/toy";

  // toy source material and the two blur domains
  int64_t toy_images = 10;
  int64_t toy_size = 96;
  BlurSynthConfig synth_blur;  // heavy trajectory blur for pretraining
  BlurSynthConfig real_blur;   // different statistics standing in for camera blur
  double val_fraction = 0.2;
  double test_fraction = 0.2;

  EvaeConfig evae;
  DenoiserConfig denoiser;
  DiscConfig disc;
  int64_t adapter_rank = 4;

  EvaeTrainConfig evae_train;
  TrainPlan synthetic_plan;
  TrainPlan real_plan;

  double gamma = 0.7;  // default blend at inference
  std::vector<double> sweep_gammas = {1.0, 0.9, 0.8, 0.7, 0.6, 0.5};

  void validate() const {
    if (run_dir.empty()) fail_validation("RunConfig: run_dir must not be empty");
    if (toy_images < 2) fail_validation("RunConfig: need at least 2 toy images");
    if (toy_size < synth_blur.patch || toy_size < real_blur.patch)
      fail_validation("RunConfig: toy_size ", toy_size, " smaller than dataset patch");
    if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction >= 1)
      fail_validation("RunConfig: val/test fractions must be >= 0 and sum below 1");
    if (adapter_rank < 1) fail_validation("RunConfig: adapter_rank must be >= 1");
    if (gamma < 0 || gamma > 1) fail_validation("RunConfig: gamma must lie in [0, 1]");
    if (sweep_gammas.empty()) fail_validation("RunConfig: sweep_gammas must not be empty");
    for (double g : sweep_gammas)
      if (g < 0 || g > 1) fail_validation("RunConfig: sweep gamma ", g, " outside [0, 1]");
    if (synthetic_plan.phase != "synthetic")
      fail_validation("RunConfig: synthetic_plan.phase must be 'synthetic'");
    if (real_plan.phase != "real") fail_validation("RunConfig: real_plan.phase must be 'real'");
    if (synthetic_plan.fixed_t != real_plan.fixed_t)
      fail_validation("RunConfig: the two phases must share fixed_t (",
                      synthetic_plan.fixed_t, " vs ", real_plan.fixed_t, ")");
    synth_blur.validate();
    real_blur.validate();
    evae.validate();
    denoiser.validate();
    disc.validate();
    evae_train.validate();
  }

  // Derive every stage seed from the root seed, overwriting whatever the
  // config file carried; artifacts then depend on `seed` alone.
  void resolve_seeds() {
    synth_blur.seed = derive_seed(seed, "synthetic-data");
    real_blur.seed = derive_seed(seed, "real-data");
    evae_train.seed = derive_seed(seed, "evae-train");
    synthetic_plan.seed = derive_seed(seed, "phase-synthetic");
    real_plan.seed = derive_seed(seed, "phase-real");
  }

  nlohmann::json to_json() const {
    return {{"seed", seed},
            {"run_dir", run_dir},
            {"toy_images", toy_images},
            {"toy_size", toy_size},
            {"synth_blur", synth_blur.to_json()},
            {"real_blur", real_blur.to_json()},
            {"val_fraction", val_fraction},
            {"test_fraction", test_fraction},
            {"evae", evae.to_json()},
            {"denoiser", denoiser.to_json()},
            {"disc", disc.to_json()},
            {"adapter_rank", adapter_rank},
            {"evae_train", evae_train.to_json()},
            {"synthetic_plan", synthetic_plan.to_json()},
            {"real_plan", real_plan.to_json()},
            {"gamma", gamma},
            {"sweep_gammas", sweep_gammas}};
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    c.seed = j.value("seed", c.seed);
    c.run_dir = j.value("run_dir", c.run_dir);
    c.toy_images = j.value("toy_images", c.toy_images);
    c.toy_size = j.value("toy_size", c.toy_size);
    if (j.contains("synth_blur")) c.synth_blur = BlurSynthConfig::from_json(j.at("synth_blur"));
    if (j.contains("real_blur")) c.real_blur = BlurSynthConfig::from_json(j.at("real_blur"));
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.test_fraction = j.value("test_fraction", c.test_fraction);
    if (j.contains("evae")) c.evae = EvaeConfig::from_json(j.at("evae"));
    if (j.contains("denoiser")) c.denoiser = DenoiserConfig::from_json(j.at("denoiser"));
    if (j.contains("disc")) c.disc = DiscConfig::from_json(j.at("disc"));
    c.adapter_rank = j.value("adapter_rank", c.adapter_rank);
    if (j.contains("evae_train")) c.evae_train = EvaeTrainConfig::from_json(j.at("evae_train"));
    if (j.contains("synthetic_plan"))
      c.synthetic_plan = TrainPlan::from_json(j.at("synthetic_plan"));
    if (j.contains("real_plan")) c.real_plan = TrainPlan::from_json(j.at("real_plan"));
    c.synthetic_plan.phase = "synthetic";
    c.real_plan.phase = "real";
    c.gamma = j.value("gamma", c.gamma);
    if (j.contains("sweep_gammas"))
      c.sweep_gammas = j.at("sweep_gammas").get<std::vector<double>>();
    c.validate();
    return c;
  }
};

// Apply a `dotted.key=value` override onto a config JSON tree. The value is
// parsed as JSON when possible (numbers, booleans, arrays) and kept as a
// string otherwise, so `--set evae.base_channels=16` works alongside
// `--set run_dir=runs/x`.
inline void apply_override(nlohmann::json& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    fail_validation("override must look like key.path=value, got '", assignment, "'");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  nlohmann::json* node = &tree;
  size_t start = 0;
  while (true) {
    const size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) fail_validation("override has an empty key segment: '", assignment, "'");
    if (dot == std::string::npos) {
      nlohmann::json parsed = nlohmann::json::parse(raw, nullptr, false);
      (*node)[key] = parsed.is_discarded() ? nlohmann::json(raw) : parsed;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline RunConfig load_run_config(const std::string& path,
                                 const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  if (!in) fail_validation("cannot open config file ", path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail_validation("config file ", path, " is not valid JSON: ", e.what());
  }
  for (const std::string& o : overrides) apply_override(j, o);
  return RunConfig::from_json(j);
}

inline void save_run_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail_validation("cannot write config file ", path);
  out << cfg.to_json().dump(2) << "\n";
}

}  // namespace osdd
