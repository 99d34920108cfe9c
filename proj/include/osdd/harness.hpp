#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "osdd/blur.hpp"
#include "osdd/checkpoint.hpp"
#include "osdd/config.hpp"
#include "osdd/metrics.hpp"
#include "osdd/pipeline.hpp"
#include "osdd/toy_data.hpp"

namespace osdd {

// ------------------------------------------------------------------ run lock

// Training commands are single-instance per run directory.
class RunLock {
 public:
  explicit RunLock(const std::string& run_dir) {
    std::filesystem::create_directories(run_dir);
    path_ = run_dir + "/.lock";
    if (std::filesystem::exists(path_))
      fail_validation("run directory ", run_dir,
                      " is locked by another run (remove ", path_,
                      " if that run is dead)");
    std::ofstream out(path_);
    out << "locked\n";
  }
  ~RunLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::string path_;
};

// ------------------------------------------------------------ pair manifests

struct PairManifest {
  struct Entry {
    int64_t id = 0;
    std::string blurry;  // paths relative to the dataset directory
    std::string sharp;
  };
  std::string split;  // train | val | test
  std::vector<Entry> entries;

  nlohmann::json to_json() const {
    nlohmann::json pairs = nlohmann::json::array();
    for (const Entry& e : entries)
      pairs.push_back({{"id", e.id}, {"blurry", e.blurry}, {"sharp", e.sharp}});
    return {{"split", split}, {"pairs", pairs}};
  }

  static PairManifest from_json(const nlohmann::json& j) {
    PairManifest m;
    m.split = j.at("split");
    for (const auto& p : j.at("pairs"))
      m.entries.push_back({p.at("id"), p.at("blurry"), p.at("sharp")});
    return m;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) fail_validation("cannot write manifest ", path);
    out << to_json().dump(2) << "\n";
  }

  static PairManifest load(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail_validation("cannot open manifest ", path);
    nlohmann::json j;
    in >> j;
    return from_json(j);
  }
};

struct SplitManifests {
  PairManifest train, val, test;
};

// Deterministic shuffled split of a generated dataset. Val/test sizes round
// to at least one pair when their fraction is positive.
inline SplitManifests split_dataset(const DatasetManifest& man, double val_fraction,
                                    double test_fraction, uint64_t seed) {
  if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction >= 1)
    fail_validation("split_dataset: fractions must be >= 0 and sum below 1");
  std::vector<size_t> order(man.pairs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "splits"));
  rng.shuffle(order);

  const int64_t n = int64_t(order.size());
  auto count = [n](double f) { return f <= 0 ? int64_t(0) : std::max<int64_t>(1, int64_t(f * double(n))); };
  const int64_t n_test = count(test_fraction);
  const int64_t n_val = count(val_fraction);
  if (n_test + n_val >= n)
    fail_validation("split_dataset: ", n, " pairs leave no training data after ",
                    n_val, " val + ", n_test, " test");

  SplitManifests out;
  out.train.split = "train";
  out.val.split = "val";
  out.test.split = "test";
  for (int64_t i = 0; i < n; ++i) {
    const PairRecord& r = man.pairs[order[size_t(i)]];
    PairManifest::Entry e{r.id, r.blurry, r.sharp};
    if (i < n_test)
      out.test.entries.push_back(e);
    else if (i < n_test + n_val)
      out.val.entries.push_back(e);
    else
      out.train.entries.push_back(e);
  }
  return out;
}

// In-memory (blurry, sharp) pairs with their manifest ids.
struct PairSet {
  std::vector<int64_t> ids;
  std::vector<std::pair<Tensor<float>, Tensor<float>>> pairs;
  size_t size() const { return pairs.size(); }
};

inline PairSet load_pairs(const PairManifest& man, const std::string& dataset_dir) {
  PairSet set;
  for (const auto& e : man.entries) {
    Tensor<float> blurry = read_ppm(dataset_dir + "/" + e.blurry);
    Tensor<float> sharp = read_ppm(dataset_dir + "/" + e.sharp);
    if (blurry.shape != sharp.shape)
      fail_validation("pair ", e.id, ": blurry ", blurry.shape.str(), " vs sharp ",
                      sharp.shape.str());
    set.ids.push_back(e.id);
    set.pairs.emplace_back(std::move(blurry), std::move(sharp));
  }
  if (set.pairs.empty()) fail_validation("manifest split '", man.split, "' is empty");
  return set;
}

// ---------------------------------------------------------------- evaluation

namespace detail {

// Metric computation is pure per image; spread it over available cores.
template <typename Fn>
void parallel_for(size_t n, Fn&& fn) {
  const size_t workers =
      std::min<size_t>({std::max<size_t>(1, std::thread::hardware_concurrency()), n, 8});
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  for (size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (size_t i; (i = next.fetch_add(1)) < n;) fn(i);
    });
  for (auto& t : pool) t.join();
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

struct MetricReport {
  std::string model_tag;
  double gamma = -1;  // < 0 when the blend weight does not apply
  struct Row {
    int64_t id = 0;
    ImageMetrics m;
  };
  std::vector<Row> per_image;
  ImageMetrics aggregate;

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const Row& r : per_image)
      rows.push_back(
          {{"id", r.id}, {"mae_pixel", r.m.mae_pixel}, {"psnr", r.m.psnr}, {"ssim", r.m.ssim}});
    nlohmann::json j = {{"model_tag", model_tag},
                        {"per_image", rows},
                        {"aggregate",
                         {{"mae_pixel", aggregate.mae_pixel},
                          {"psnr", aggregate.psnr},
                          {"ssim", aggregate.ssim}}}};
    if (gamma >= 0) j["gamma"] = gamma;
    return j;
  }

  std::string table() const {
    std::ostringstream os;
    os << "model: " << model_tag;
    if (gamma >= 0) os << "  (gamma " << gamma << ")";
    os << "\n  id    MAE_pixel       PSNR(dB)        SSIM\n";
    os << std::fixed << std::setprecision(4);
    for (const Row& r : per_image)
      os << std::setw(4) << r.id << "  " << std::setw(11) << r.m.mae_pixel << "  "
         << std::setw(11) << r.m.psnr << "  " << std::setw(10) << r.m.ssim << "\n";
    os << "mean  " << std::setw(11) << aggregate.mae_pixel << "  " << std::setw(11)
       << aggregate.psnr << "  " << std::setw(10) << aggregate.ssim << "\n";
    return os.str();
  }
};

// Score already-produced outputs against the reference pairs. Every manifest
// id must have an output.
inline MetricReport evaluate_outputs(const PairSet& data,
                                     const std::map<int64_t, Tensor<float>>& outputs,
                                     const std::string& model_tag, double gamma = -1) {
  std::string missing;
  for (int64_t id : data.ids)
    if (!outputs.count(id)) missing += (missing.empty() ? "" : ", ") + std::to_string(id);
  if (!missing.empty()) fail_validation("evaluate: missing outputs for ids: ", missing);

  for (size_t i = 0; i < data.size(); ++i) {
    const Shape& os = outputs.at(data.ids[i]).shape;
    if (os != data.pairs[i].second.shape)
      fail_validation("evaluate: output for id ", data.ids[i], " has shape ", os.str(),
                      ", reference is ", data.pairs[i].second.shape.str());
  }

  MetricReport rep;
  rep.model_tag = model_tag;
  rep.gamma = gamma;
  rep.per_image.resize(data.size());
  detail::parallel_for(data.size(), [&](size_t i) {
    rep.per_image[i] = {data.ids[i],
                       compute_metrics(outputs.at(data.ids[i]), data.pairs[i].second)};
  });
  for (const auto& r : rep.per_image) {
    rep.aggregate.mae_pixel += r.m.mae_pixel;
    rep.aggregate.psnr += r.m.psnr;
    rep.aggregate.ssim += r.m.ssim;
  }
  const double n = double(rep.per_image.size());
  rep.aggregate.mae_pixel /= n;
  rep.aggregate.psnr /= n;
  rep.aggregate.ssim /= n;
  return rep;
}

inline MetricReport evaluate_model(OsddPipeline<float>& pipe, const PairSet& data, double gamma,
                                   const std::string& model_tag) {
  std::map<int64_t, Tensor<float>> outputs;
  for (size_t i = 0; i < data.size(); ++i)
    outputs[data.ids[i]] = pipe.deblur(data.pairs[i].first, gamma);
  return evaluate_outputs(data, outputs, model_tag, gamma);
}

// The do-nothing reference point: score the blurry inputs themselves.
inline MetricReport evaluate_identity(const PairSet& data) {
  std::map<int64_t, Tensor<float>> outputs;
  for (size_t i = 0; i < data.size(); ++i) outputs[data.ids[i]] = data.pairs[i].first;
  return evaluate_outputs(data, outputs, "identity-blurry");
}

// --------------------------------------------------------------- gamma sweep

// One report per blend weight, plus two-column plot data per metric
// (out_stem.{mae,psnr,ssim}.dat) when out_stem is non-empty.
inline std::vector<MetricReport> gamma_sweep(OsddPipeline<float>& pipe, const PairSet& data,
                                             const std::vector<double>& gammas,
                                             const std::string& out_stem = "") {
  if (gammas.empty()) fail_validation("gamma_sweep: empty gamma list");
  for (double g : gammas) {
    if (g < 0 || g > 1) fail_validation("gamma_sweep: gamma ", g, " outside [0, 1]");
    if (g < 1 && pipe.da->s.layer_count() == 0)
      fail_validation("gamma_sweep: gamma ", g, " needs the synthetic adapter branch");
    if (g > 0 && pipe.da->r.layer_count() == 0)
      fail_validation("gamma_sweep: gamma ", g, " needs the real adapter branch");
  }
  std::vector<MetricReport> reports;
  for (double g : gammas) reports.push_back(evaluate_model(pipe, data, g, "sweep"));

  if (!out_stem.empty()) {
    auto dump = [&](const std::string& metric, auto pick) {
      std::ofstream out(out_stem + "." + metric + ".dat");
      if (!out) fail_validation("cannot write plot data ", out_stem, ".", metric, ".dat");
      for (const MetricReport& r : reports)
        out << detail::fmt(r.gamma) << " " << detail::fmt(pick(r.aggregate)) << "\n";
    };
    dump("mae", [](const ImageMetrics& m) { return m.mae_pixel; });
    dump("psnr", [](const ImageMetrics& m) { return m.psnr; });
    dump("ssim", [](const ImageMetrics& m) { return m.ssim; });
  }
  return reports;
}

// ----------------------------------------------------------------- ablations

struct AblationRow {
  std::string label;
  ImageMetrics m;
};

struct AblationResult {
  std::string name;
  std::vector<AblationRow> rows;
  nlohmann::json extra;  // study-specific summary numbers

  nlohmann::json to_json() const {
    nlohmann::json rows_j = nlohmann::json::array();
    for (const AblationRow& r : rows)
      rows_j.push_back({{"label", r.label},
                        {"mae_pixel", r.m.mae_pixel},
                        {"psnr", r.m.psnr},
                        {"ssim", r.m.ssim}});
    return {{"name", name}, {"rows", rows_j}, {"summary", extra}};
  }

  std::string table() const {
    std::ostringstream os;
    os << "ablation: " << name << "\n";
    os << std::fixed << std::setprecision(4);
    for (const AblationRow& r : rows)
      os << "  " << std::setw(36) << std::left << r.label << std::right << "  MAE "
         << std::setw(9) << r.m.mae_pixel << "  PSNR " << std::setw(9) << r.m.psnr << "  SSIM "
         << std::setw(7) << r.m.ssim << "\n";
    if (!extra.empty()) os << "  summary: " << extra.dump() << "\n";
    return os.str();
  }
};

namespace detail {

inline ImageMetrics mean_metrics(const std::vector<ImageMetrics>& ms) {
  ImageMetrics agg;
  for (const ImageMetrics& m : ms) {
    agg.mae_pixel += m.mae_pixel;
    agg.psnr += m.psnr;
    agg.ssim += m.ssim;
  }
  agg.mae_pixel /= double(ms.size());
  agg.psnr /= double(ms.size());
  agg.ssim /= double(ms.size());
  return agg;
}

// Held-out reconstruction quality of one autoencoder: sharp latent plus the
// blurry image's skip features, exactly the training target.
inline ImageMetrics evae_recon_metrics(Evae<float>& m, const PairSet& val) {
  std::vector<ImageMetrics> per;
  for (const auto& [xl, xh] : val.pairs) {
    auto enc = m.encode_with_skips(xl);
    const Tensor<float> recon = m.decode(
        m.encode_sharp(xh), m.cfg.use_skips ? enc.skips : std::vector<Tensor<float>>{});
    per.push_back(compute_metrics(recon, xh));
  }
  return mean_metrics(per);
}

}  // namespace detail

// Skip-connection study: same data, budget, and per-seed initialization for a
// skip-enabled and a skip-free autoencoder; rows report held-out
// reconstruction quality.
inline AblationResult ablate_evae_skip(const RunConfig& cfg, const PairSet& train,
                                       const PairSet& val, int seeds = 5) {
  if (seeds < 1) fail_validation("ablate_evae_skip: need at least one seed");
  AblationResult res;
  res.name = "evae_skip";
  int wins = 0;
  for (int s = 0; s < seeds; ++s) {
    const uint64_t model_seed = derive_seed(cfg.seed, "ablate-evae-skip", uint64_t(s));
    double mae[2] = {0, 0};
    for (bool skips : {true, false}) {
      EvaeConfig ec = cfg.evae;
      ec.use_skips = skips;
      Evae<float> model(ec, model_seed);
      EvaeTrainConfig tc = cfg.evae_train;
      tc.seed = derive_seed(model_seed, "train");
      train_evae(model, train.pairs, tc);
      const ImageMetrics m = detail::evae_recon_metrics(model, val);
      mae[skips ? 0 : 1] = m.mae_pixel;
      res.rows.push_back({str_cat("seed ", s, skips ? " skips on " : " skips off"), m});
    }
    if (mae[0] < mae[1]) ++wins;
  }
  res.extra = {{"seeds", seeds}, {"skip_wins", wins}};
  return res;
}

namespace detail {

// A fresh denoiser/discriminator/adapter stack around a shared autoencoder.
template <typename T>
struct AblationModel {
  Denoiser<T> den;
  DualAdapter<T> da;
  LatentDiscriminator<T> disc;
  OsddPipeline<T> pipe;

  AblationModel(const RunConfig& cfg, Evae<T>& evae, uint64_t seed)
      : den(cfg.denoiser, derive_seed(seed, "denoiser")),
        disc(cfg.disc, derive_seed(seed, "disc")),
        pipe(&evae, &den, &da, make_schedule(1000), cfg.real_plan.fixed_t) {
    attach_adapters(da.r, den.adaptable(), [](const std::string&) { return true; },
                    cfg.adapter_rank, derive_seed(seed, "adapter-r"));
    attach_adapters(da.s, den.adaptable(), [](const std::string&) { return true; },
                    cfg.adapter_rank, derive_seed(seed, "adapter-s"));
  }
};

inline ImageMetrics model_metrics(OsddPipeline<float>& pipe, const PairSet& val, double gamma) {
  return evaluate_model(pipe, val, gamma, "ablation").aggregate;
}

}  // namespace detail

// Synthetic pretraining study: identically initialized models with and
// without the synthetic phase, scored across blend weights. The "without"
// model keeps its synthetic branch at zero, so blending only attenuates the
// real branch.
inline AblationResult ablate_synthetic_pretrain(const RunConfig& cfg, Evae<float>& evae,
                                                const PairSet& synth_train,
                                                const PairSet& real_train, const PairSet& val) {
  const uint64_t seed = derive_seed(cfg.seed, "ablate-pretrain");
  detail::AblationModel<float> with(cfg, evae, seed);
  detail::AblationModel<float> without(cfg, evae, seed);

  TrainPlan sp = cfg.synthetic_plan;
  sp.seed = derive_seed(seed, "phase-synthetic");
  TrainPlan rp = cfg.real_plan;
  rp.seed = derive_seed(seed, "phase-real");
  train_phase(with.pipe, with.disc, synth_train.pairs, {}, sp);
  train_phase(with.pipe, with.disc, real_train.pairs, {}, rp);
  train_phase(without.pipe, without.disc, real_train.pairs, {}, rp);

  AblationResult res;
  res.name = "synthetic_pretrain";
  for (double g : {1.0, 0.8, 0.6}) {
    res.rows.push_back({str_cat("gamma ", g, " with adapter_s"),
                        detail::model_metrics(with.pipe, val, g)});
    res.rows.push_back({str_cat("gamma ", g, " w/o adapter_s"),
                        detail::model_metrics(without.pipe, val, g)});
  }
  return res;
}

// Initialization-schedule study: one adapter trained sequentially on
// synthetic then real data versus the dual-adapter under the same budget.
inline AblationResult ablate_single_lora_schedule(const RunConfig& cfg, Evae<float>& evae,
                                                  const PairSet& synth_train,
                                                  const PairSet& real_train,
                                                  const PairSet& val) {
  const uint64_t seed = derive_seed(cfg.seed, "ablate-schedule");
  detail::AblationModel<float> sequential(cfg, evae, seed);
  detail::AblationModel<float> dual(cfg, evae, seed);

  // Sequential: the real branch sees synthetic data first, then real data.
  TrainPlan stage1 = cfg.synthetic_plan;
  stage1.phase = "real";
  stage1.seed = derive_seed(seed, "seq-stage1");
  TrainPlan stage2 = cfg.real_plan;
  stage2.seed = derive_seed(seed, "seq-stage2");
  train_phase(sequential.pipe, sequential.disc, synth_train.pairs, {}, stage1);
  train_phase(sequential.pipe, sequential.disc, real_train.pairs, {}, stage2);

  TrainPlan sp = cfg.synthetic_plan;
  sp.seed = derive_seed(seed, "dda-synthetic");
  TrainPlan rp = cfg.real_plan;
  rp.seed = derive_seed(seed, "dda-real");
  train_phase(dual.pipe, dual.disc, synth_train.pairs, {}, sp);
  train_phase(dual.pipe, dual.disc, real_train.pairs, {}, rp);

  AblationResult res;
  res.name = "single_lora_schedule";
  res.rows.push_back({"single adapter, sequential (gamma 1)",
                      detail::model_metrics(sequential.pipe, val, 1.0)});
  res.rows.push_back({str_cat("dual adapter (gamma ", cfg.gamma, ")"),
                      detail::model_metrics(dual.pipe, val, cfg.gamma)});
  return res;
}

inline AblationResult run_ablation(const std::string& name, const RunConfig& cfg,
                                   Evae<float>& evae, const PairSet& synth_train,
                                   const PairSet& real_train, const PairSet& val) {
  if (name == "evae_skip") return ablate_evae_skip(cfg, real_train, val);
  if (name == "synthetic_pretrain")
    return ablate_synthetic_pretrain(cfg, evae, synth_train, real_train, val);
  if (name == "single_lora_schedule")
    return ablate_single_lora_schedule(cfg, evae, synth_train, real_train, val);
  fail_validation("unknown ablation '", name,
                  "' (expected evae_skip, synthetic_pretrain, or single_lora_schedule)");
}

// ------------------------------------------------------------- full pipeline

struct PipelineSummary {
  std::string run_dir;
  MetricReport baseline;  // blurry inputs scored as-is
  MetricReport model;     // deblurred at the configured gamma
  std::vector<MetricReport> sweep;
  double improvement_pct = 0;  // relative MAE reduction over the baseline

  nlohmann::json to_json(uint64_t root_seed) const {
    nlohmann::json sweep_j = nlohmann::json::array();
    for (const MetricReport& r : sweep)
      sweep_j.push_back({{"gamma", r.gamma},
                         {"mae_pixel", r.aggregate.mae_pixel},
                         {"psnr", r.aggregate.psnr},
                         {"ssim", r.aggregate.ssim}});
    return {{"root_seed", root_seed},
            {"baseline", r_json(baseline)},
            {"model", r_json(model)},
            {"improvement_pct", improvement_pct},
            {"sweep", sweep_j}};
  }

 private:
  static nlohmann::json r_json(const MetricReport& r) {
    nlohmann::json j = {{"mae_pixel", r.aggregate.mae_pixel},
                        {"psnr", r.aggregate.psnr},
                        {"ssim", r.aggregate.ssim}};
    if (r.gamma >= 0) j["gamma"] = r.gamma;
    return j;
  }
};

namespace detail {

inline void write_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail_validation("cannot write ", path);
  out << j.dump(2) << "\n";
}

}  // namespace detail

// The whole toy pipeline: synthesize two blur domains, train the
// autoencoder, run both adapter phases, evaluate against the do-nothing
// baseline, and sweep the blend weight. Every artifact lands under
// cfg.run_dir and depends only on cfg.seed.
inline PipelineSummary run_pipeline(RunConfig cfg) {
  cfg.validate();
  cfg.resolve_seeds();
  RunLock lock(cfg.run_dir);
  const std::string& dir = cfg.run_dir;
  save_run_config(cfg, dir + "/config.json");

  // --- data: disjoint source images per blur domain
  std::filesystem::create_directories(dir + "/data/sources");
  const auto sources =
      write_toy_images(dir + "/data/sources", cfg.toy_images, cfg.toy_size);
  const int64_t half = cfg.toy_images / 2;
  const std::vector<std::string> synth_sources(sources.begin(), sources.begin() + half);
  const std::vector<std::string> real_sources(sources.begin() + half, sources.end());
  const DatasetManifest synth_man =
      build_dataset(synth_sources, cfg.synth_blur, dir + "/data/synthetic");
  const DatasetManifest real_man =
      build_dataset(real_sources, cfg.real_blur, dir + "/data/real");

  std::filesystem::create_directories(dir + "/manifests");
  SplitManifests synth_splits =
      split_dataset(synth_man, cfg.val_fraction, 0.0, derive_seed(cfg.seed, "synth-split"));
  SplitManifests real_splits = split_dataset(real_man, cfg.val_fraction, cfg.test_fraction,
                                             derive_seed(cfg.seed, "real-split"));
  synth_splits.train.save(dir + "/manifests/synthetic_train.json");
  synth_splits.val.save(dir + "/manifests/synthetic_val.json");
  real_splits.train.save(dir + "/manifests/real_train.json");
  real_splits.val.save(dir + "/manifests/real_val.json");
  real_splits.test.save(dir + "/manifests/real_test.json");

  const PairSet synth_train = load_pairs(synth_splits.train, dir + "/data/synthetic");
  const PairSet synth_val = load_pairs(synth_splits.val, dir + "/data/synthetic");
  const PairSet real_train = load_pairs(real_splits.train, dir + "/data/real");
  const PairSet real_val = load_pairs(real_splits.val, dir + "/data/real");
  const PairSet real_test = load_pairs(real_splits.test, dir + "/data/real");

  // --- stage 1: autoencoder on both domains' training pairs
  Evae<float> evae(cfg.evae, derive_seed(cfg.seed, "evae-init"));
  std::vector<std::pair<Tensor<float>, Tensor<float>>> evae_pairs = synth_train.pairs;
  evae_pairs.insert(evae_pairs.end(), real_train.pairs.begin(), real_train.pairs.end());
  train_evae(evae, evae_pairs, cfg.evae_train);
  std::filesystem::create_directories(dir + "/checkpoints");
  save_checkpoint(evae.params, dir + "/checkpoints/evae",
                  {{"kind", "evae"}, {"config", cfg.evae.to_json()}, {"root_seed", cfg.seed}});

  // --- stage 2: adapter phases over the frozen trunk
  Denoiser<float> den(cfg.denoiser, derive_seed(cfg.seed, "denoiser-init"));
  LatentDiscriminator<float> disc(cfg.disc, derive_seed(cfg.seed, "disc-init"));
  DualAdapter<float> da;
  attach_adapters(da.r, den.adaptable(), [](const std::string&) { return true; },
                  cfg.adapter_rank, derive_seed(cfg.seed, "adapter-r"));
  attach_adapters(da.s, den.adaptable(), [](const std::string&) { return true; },
                  cfg.adapter_rank, derive_seed(cfg.seed, "adapter-s"));
  OsddPipeline<float> pipe(&evae, &den, &da, make_schedule(1000), cfg.real_plan.fixed_t);

  std::filesystem::create_directories(dir + "/logs");
  const TrainPhaseResult synth_res =
      train_phase(pipe, disc, synth_train.pairs, synth_val.pairs, cfg.synthetic_plan);
  write_records_jsonl(dir + "/logs/phase_synthetic.jsonl", synth_res.records);
  const TrainPhaseResult real_res =
      train_phase(pipe, disc, real_train.pairs, real_val.pairs, cfg.real_plan);
  write_records_jsonl(dir + "/logs/phase_real.jsonl", real_res.records);

  save_checkpoint(den.params, dir + "/checkpoints/denoiser",
                  {{"kind", "denoiser"}, {"config", cfg.denoiser.to_json()},
                   {"root_seed", cfg.seed}});
  save_checkpoint(disc.params, dir + "/checkpoints/disc",
                  {{"kind", "discriminator"}, {"config", cfg.disc.to_json()},
                   {"root_seed", cfg.seed}});
  da.s.save(dir + "/checkpoints/adapter_s", {{"root_seed", cfg.seed}});
  da.r.save(dir + "/checkpoints/adapter_r", {{"root_seed", cfg.seed}});

  // --- stage 3: evaluation on the held-out real test split
  PipelineSummary sum;
  sum.run_dir = dir;
  sum.baseline = evaluate_identity(real_test);
  sum.model = evaluate_model(pipe, real_test, cfg.gamma, "osdd");
  sum.improvement_pct = 100.0 * (sum.baseline.aggregate.mae_pixel -
                                 sum.model.aggregate.mae_pixel) /
                        sum.baseline.aggregate.mae_pixel;
  std::filesystem::create_directories(dir + "/reports");
  detail::write_json_file(sum.baseline.to_json(), dir + "/reports/baseline.json");
  detail::write_json_file(sum.model.to_json(), dir + "/reports/model.json");

  std::filesystem::create_directories(dir + "/sweep");
  sum.sweep = gamma_sweep(pipe, real_test, cfg.sweep_gammas, dir + "/sweep/gamma");
  nlohmann::json sweep_j = nlohmann::json::array();
  for (const MetricReport& r : sum.sweep) sweep_j.push_back(r.to_json());
  detail::write_json_file(sweep_j, dir + "/reports/sweep.json");

  detail::write_json_file(sum.to_json(cfg.seed), dir + "/summary.json");
  return sum;
}

}  // namespace osdd
