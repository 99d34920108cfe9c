// Command-line shell around the deblurring library: data synthesis, staged
// training, single-image inference, evaluation, the gamma sweep, and the
// ablation studies. One JSON config per run; any key can be overridden with
// --set dotted.key=value. Exit codes: 0 ok, 1 validation error, 2 numerics.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "osdd/harness.hpp"

namespace {

using namespace osdd;

struct ModelBundle {
  Evae<float> evae;
  Denoiser<float> den;
  LatentDiscriminator<float> disc;
  DualAdapter<float> da;
  OsddPipeline<float> pipe;

  explicit ModelBundle(const RunConfig& cfg)
      : evae(cfg.evae, derive_seed(cfg.seed, "evae-init")),
        den(cfg.denoiser, derive_seed(cfg.seed, "denoiser-init")),
        disc(cfg.disc, derive_seed(cfg.seed, "disc-init")),
        pipe(&evae, &den, &da, make_schedule(1000), cfg.real_plan.fixed_t) {
    attach_adapters(da.r, den.adaptable(), [](const std::string&) { return true; },
                    cfg.adapter_rank, derive_seed(cfg.seed, "adapter-r"));
    attach_adapters(da.s, den.adaptable(), [](const std::string&) { return true; },
                    cfg.adapter_rank, derive_seed(cfg.seed, "adapter-s"));
  }

  // Restore whatever stages have produced so far; the autoencoder must exist.
  void load(const std::string& dir, bool require_evae = true) {
    const std::string ck = dir + "/checkpoints";
    if (std::filesystem::exists(ck + "/evae"))
      load_checkpoint(evae.params, ck + "/evae");
    else if (require_evae)
      fail_validation("no autoencoder checkpoint under ", ck, "; run train-evae first");
    if (std::filesystem::exists(ck + "/denoiser")) load_checkpoint(den.params, ck + "/denoiser");
    if (std::filesystem::exists(ck + "/disc")) load_checkpoint(disc.params, ck + "/disc");
    if (std::filesystem::exists(ck + "/adapter_r")) da.r.load(ck + "/adapter_r");
    if (std::filesystem::exists(ck + "/adapter_s")) da.s.load(ck + "/adapter_s");
  }

  void save(const RunConfig& cfg) const {
    const std::string ck = cfg.run_dir + "/checkpoints";
    save_checkpoint(den.params, ck + "/denoiser",
                    {{"kind", "denoiser"}, {"config", cfg.denoiser.to_json()},
                     {"root_seed", cfg.seed}});
    save_checkpoint(disc.params, ck + "/disc",
                    {{"kind", "discriminator"}, {"config", cfg.disc.to_json()},
                     {"root_seed", cfg.seed}});
    da.r.save(ck + "/adapter_r", {{"root_seed", cfg.seed}});
    da.s.save(ck + "/adapter_s", {{"root_seed", cfg.seed}});
  }
};

PairSet load_split(const RunConfig& cfg, const std::string& domain, const std::string& split) {
  const std::string man_path = cfg.run_dir + "/manifests/" + domain + "_" + split + ".json";
  return load_pairs(PairManifest::load(man_path), cfg.run_dir + "/data/" + domain);
}

int cmd_generate_data(const RunConfig& cfg_in, const std::string& regenerate_from,
                      const std::string& regenerate_to) {
  if (!regenerate_from.empty()) {
    if (regenerate_to.empty())
      fail_validation("--regenerate needs --out for the destination directory");
    regenerate_dataset(regenerate_from, regenerate_to);
    std::cout << "regenerated " << regenerate_from << " into " << regenerate_to << "\n";
    return 0;
  }
  RunConfig cfg = cfg_in;
  cfg.resolve_seeds();
  const std::string& dir = cfg.run_dir;
  std::filesystem::create_directories(dir + "/data/sources");
  save_run_config(cfg, dir + "/config.json");
  const auto sources = write_toy_images(dir + "/data/sources", cfg.toy_images, cfg.toy_size);
  const int64_t half = cfg.toy_images / 2;
  const DatasetManifest synth_man =
      build_dataset({sources.begin(), sources.begin() + half}, cfg.synth_blur,
                    dir + "/data/synthetic");
  const DatasetManifest real_man = build_dataset({sources.begin() + half, sources.end()},
                                                 cfg.real_blur, dir + "/data/real");
  std::filesystem::create_directories(dir + "/manifests");
  SplitManifests ss =
      split_dataset(synth_man, cfg.val_fraction, 0.0, derive_seed(cfg.seed, "synth-split"));
  SplitManifests rs = split_dataset(real_man, cfg.val_fraction, cfg.test_fraction,
                                    derive_seed(cfg.seed, "real-split"));
  ss.train.save(dir + "/manifests/synthetic_train.json");
  ss.val.save(dir + "/manifests/synthetic_val.json");
  rs.train.save(dir + "/manifests/real_train.json");
  rs.val.save(dir + "/manifests/real_val.json");
  rs.test.save(dir + "/manifests/real_test.json");
  std::cout << "synthetic pairs: " << synth_man.pairs.size()
            << ", real pairs: " << real_man.pairs.size() << "\n";
  return 0;
}

int cmd_train_evae(RunConfig cfg) {
  cfg.resolve_seeds();
  RunLock lock(cfg.run_dir);
  const PairSet synth = load_split(cfg, "synthetic", "train");
  const PairSet real = load_split(cfg, "real", "train");
  std::vector<std::pair<Tensor<float>, Tensor<float>>> pairs = synth.pairs;
  pairs.insert(pairs.end(), real.pairs.begin(), real.pairs.end());

  Evae<float> evae(cfg.evae, derive_seed(cfg.seed, "evae-init"));
  const EvaeTrainResult res = train_evae(evae, pairs, cfg.evae_train);
  save_checkpoint(evae.params, cfg.run_dir + "/checkpoints/evae",
                  {{"kind", "evae"}, {"config", cfg.evae.to_json()}, {"root_seed", cfg.seed}});
  std::cout << "final loss " << res.loss_history.back() << ", alpha " << res.final_alpha
            << "\n";
  return 0;
}

int cmd_train_osdd(RunConfig cfg, const std::string& phase) {
  cfg.resolve_seeds();
  RunLock lock(cfg.run_dir);
  ModelBundle m(cfg);
  m.load(cfg.run_dir);

  const std::string domain = phase == "synthetic" ? "synthetic" : "real";
  const PairSet train = load_split(cfg, domain, "train");
  const PairSet val = load_split(cfg, domain, "val");
  const TrainPlan& plan = phase == "synthetic" ? cfg.synthetic_plan : cfg.real_plan;
  const TrainPhaseResult res = train_phase(m.pipe, m.disc, train.pairs, val.pairs, plan);
  write_records_jsonl(cfg.run_dir + "/logs/phase_" + phase + ".jsonl", res.records);
  m.save(cfg);
  std::cout << "phase " << phase << ": val MAE " << res.initial_val_mae << " -> "
            << res.final_val_mae << "\n";
  return 0;
}

int cmd_deblur(RunConfig cfg, const std::string& input, const std::string& output,
               double gamma, bool timed) {
  cfg.resolve_seeds();
  ModelBundle m(cfg);
  m.load(cfg.run_dir);
  const Tensor<float> x = read_ppm(input);
  const auto t0 = std::chrono::steady_clock::now();
  const Tensor<float> y = m.pipe.deblur(x, gamma);
  const auto t1 = std::chrono::steady_clock::now();
  write_ppm(output, y);
  if (timed)
    std::fprintf(stderr, "deblur time: %.3f s\n",
                 std::chrono::duration<double>(t1 - t0).count());
  std::cout << "wrote " << output << "\n";
  return 0;
}

int cmd_evaluate(RunConfig cfg, const std::string& split, double gamma) {
  cfg.resolve_seeds();
  ModelBundle m(cfg);
  m.load(cfg.run_dir);
  const PairSet data = load_split(cfg, "real", split);
  const MetricReport base = evaluate_identity(data);
  const MetricReport rep = evaluate_model(m.pipe, data, gamma, "osdd");
  std::cout << base.table() << "\n" << rep.table();
  std::filesystem::create_directories(cfg.run_dir + "/reports");
  std::ofstream out(cfg.run_dir + "/reports/eval_" + split + ".json");
  out << nlohmann::json{{"baseline", base.to_json()}, {"model", rep.to_json()}}.dump(2)
      << "\n";
  return 0;
}

int cmd_gamma_sweep(RunConfig cfg, std::vector<double> gammas, const std::string& split) {
  cfg.resolve_seeds();
  if (gammas.empty()) gammas = cfg.sweep_gammas;
  ModelBundle m(cfg);
  m.load(cfg.run_dir);
  const PairSet data = load_split(cfg, "real", split);
  std::filesystem::create_directories(cfg.run_dir + "/sweep");
  const auto reports = gamma_sweep(m.pipe, data, gammas, cfg.run_dir + "/sweep/gamma");
  for (const MetricReport& r : reports)
    std::cout << "gamma " << r.gamma << ": MAE " << r.aggregate.mae_pixel << ", PSNR "
              << r.aggregate.psnr << ", SSIM " << r.aggregate.ssim << "\n";
  std::ofstream out(cfg.run_dir + "/reports/sweep.json");
  nlohmann::json j = nlohmann::json::array();
  for (const MetricReport& r : reports) j.push_back(r.to_json());
  out << j.dump(2) << "\n";
  return 0;
}

int cmd_ablate(RunConfig cfg, const std::string& name) {
  cfg.resolve_seeds();
  RunLock lock(cfg.run_dir);
  const PairSet synth_train = load_split(cfg, "synthetic", "train");
  const PairSet real_train = load_split(cfg, "real", "train");
  const PairSet val = load_split(cfg, "real", "val");

  Evae<float> evae(cfg.evae, derive_seed(cfg.seed, "evae-init"));
  if (name != "evae_skip") {
    const std::string ck = cfg.run_dir + "/checkpoints/evae";
    if (!std::filesystem::exists(ck))
      fail_validation("ablation '", name, "' needs a trained autoencoder; run train-evae");
    load_checkpoint(evae.params, ck);
  }
  const AblationResult res = run_ablation(name, cfg, evae, synth_train, real_train, val);
  std::cout << res.table();
  std::filesystem::create_directories(cfg.run_dir + "/reports");
  std::ofstream out(cfg.run_dir + "/reports/ablation_" + name + ".json");
  out << res.to_json().dump(2) << "\n";
  return 0;
}

int cmd_run(const RunConfig& cfg) {
  const PipelineSummary sum = run_pipeline(cfg);
  std::cout << sum.baseline.table() << "\n" << sum.model.table() << "\n";
  std::cout << "MAE improvement over blurry baseline: " << sum.improvement_pct << "%\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"one-step diffusion deblurring toolkit"};
  app.require_subcommand(1);

  std::string config_path = "configs/toy.json";
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "run configuration JSON")
      ->envname("OSDD_CONFIG");
  app.add_option("--set", overrides, "override a config key, e.g. --set seed=7");

  auto* gen = app.add_subcommand("generate-data", "synthesize the paired toy datasets");
  std::string regen_from, regen_to;
  gen->add_option("--regenerate", regen_from, "rebuild an existing dataset from its manifest");
  gen->add_option("--out", regen_to, "destination for --regenerate");

  app.add_subcommand("train-evae", "train the skip-connected autoencoder");

  auto* tr = app.add_subcommand("train-osdd", "run one adapter training phase");
  std::string phase;
  tr->add_option("--phase", phase, "synthetic | real")->required();

  auto* db = app.add_subcommand("deblur", "deblur a single PPM image");
  std::string in_path, out_path = "deblurred.ppm";
  double gamma = -1;
  bool timed = false;
  db->add_option("--input", in_path, "blurry input image")->required();
  db->add_option("--output", out_path, "output path");
  db->add_option("--gamma", gamma, "adapter blend weight (default: config value)");
  db->add_flag("--time", timed, "report seconds per image on stderr");

  auto* ev = app.add_subcommand("evaluate", "score a data split");
  std::string split = "test";
  double eval_gamma = -1;
  ev->add_option("--split", split, "train | val | test");
  ev->add_option("--gamma", eval_gamma, "blend weight (default: config value)");

  auto* sw = app.add_subcommand("gamma-sweep", "evaluate across blend weights");
  std::vector<double> gammas;
  std::string sweep_split = "test";
  sw->add_option("--gammas", gammas, "blend weights to sweep")->delimiter(',');
  sw->add_option("--split", sweep_split, "train | val | test");

  auto* ab = app.add_subcommand("ablate", "run a paired-configuration study");
  std::string ablation;
  ab->add_option("--name", ablation,
                 "evae_skip | synthetic_pretrain | single_lora_schedule")
      ->required();

  app.add_subcommand("run", "full pipeline: data, training, evaluation, sweep");

  for (CLI::App* sub : app.get_subcommands({})) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    const osdd::RunConfig cfg = osdd::load_run_config(config_path, overrides);
    if (gamma < 0) gamma = cfg.gamma;
    if (eval_gamma < 0) eval_gamma = cfg.gamma;
    if (gen->parsed()) return cmd_generate_data(cfg, regen_from, regen_to);
    if (app.get_subcommand("train-evae")->parsed()) return cmd_train_evae(cfg);
    if (tr->parsed()) return cmd_train_osdd(cfg, phase);
    if (db->parsed()) return cmd_deblur(cfg, in_path, out_path, gamma, timed);
    if (ev->parsed()) return cmd_evaluate(cfg, split, eval_gamma);
    if (sw->parsed()) return cmd_gamma_sweep(cfg, gammas, sweep_split);
    if (ab->parsed()) return cmd_ablate(cfg, ablation);
    if (app.get_subcommand("run")->parsed()) return cmd_run(cfg);
  } catch (const osdd::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const osdd::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
