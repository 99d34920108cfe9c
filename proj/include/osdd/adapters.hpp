#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "osdd/checkpoint.hpp"
#include "osdd/layers.hpp"
#include "osdd/ops.hpp"

namespace osdd {

// Layers a model exposes for adaptation, keyed by stable names.
template <typename T>
struct AdaptableLayers {
  std::vector<std::pair<std::string, Conv2dLayer<T>*>> convs;
  std::vector<std::pair<std::string, LinearLayer<T>*>> linears;
};

// One low-rank adapter branch: for every adapted layer a down projection to
// `rank` features and a zero-initialized up projection back, so a freshly
// attached branch contributes exactly zero. Convolution adapters factor the
// base kernel's flattened input (in_ch * kh * kw) through rank 1x1 outputs:
// down is a rank-output copy of the base kernel geometry, up is a 1x1 conv.
template <typename T>
class AdapterSet {
 public:
  ParamStore<T> params;
  int64_t rank = 8;
  double scaling = 1.0;
  std::string provenance;  // "real" | "synthetic"

  bool has(const std::string& name) const { return entries_.count(name) > 0; }
  size_t layer_count() const { return entries_.size(); }

  std::vector<std::string> layer_names() const {
    std::vector<std::string> names;
    for (const auto& [name, e] : entries_) names.push_back(name);
    return names;
  }

  // rank_override 0 uses the set-wide rank; the used rank must satisfy
  // rank <= min(flattened input features, output features).
  void attach_conv(const std::string& name, const Conv2dLayer<T>& base, Rng& rng,
                   int64_t rank_override = 0) {
    const Shape ws = base.w->value.shape;  // (OC, IC, KH, KW)
    const int64_t flat_in = ws.c * ws.h * ws.w;
    const int64_t r = rank_override > 0 ? rank_override : rank;
    check_rank(name, r, flat_in, ws.n);
    Entry e;
    e.is_conv = true;
    e.stride = base.stride;
    e.pad = base.pad;
    e.down = &params.add(name + ".down",
                         kaiming_normal<T>(Shape{r, ws.c, ws.h, ws.w}, flat_in, rng));
    e.up = &params.add(name + ".up", Tensor<T>::zeros(Shape{ws.n, r, 1, 1}));
    entries_[name] = e;
  }

  void attach_linear(const std::string& name, const LinearLayer<T>& base, Rng& rng,
                     int64_t rank_override = 0) {
    const Shape ws = base.w->value.shape;  // (OUT, IN, 1, 1)
    const int64_t r = rank_override > 0 ? rank_override : rank;
    check_rank(name, r, ws.c, ws.n);
    Entry e;
    e.is_conv = false;
    e.down = &params.add(name + ".down", kaiming_normal<T>(Shape{r, ws.c, 1, 1}, ws.c, rng));
    e.up = &params.add(name + ".up", Tensor<T>::zeros(Shape{ws.n, r, 1, 1}));
    entries_[name] = e;
  }

  // scaling * up(down(y_i)); shape matches the base layer's output.
  Var<T> delta(Tape<T>& tp, const std::string& name, Var<T> y_i) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) fail_validation("AdapterSet: no adapter for layer ", name);
    const Entry& e = it->second;
    Var<T> zb_down = tp.leaf(Tensor<T>::zeros(Shape{e.down->value.shape.n, 1, 1, 1}));
    Var<T> zb_up = tp.leaf(Tensor<T>::zeros(Shape{e.up->value.shape.n, 1, 1, 1}));
    Var<T> h;
    if (e.is_conv) {
      h = conv2d(y_i, e.down->use(tp), zb_down, e.stride, e.pad);
      h = conv2d(h, e.up->use(tp), zb_up, 1, 0);
    } else {
      h = linear(y_i, e.down->use(tp), zb_down);
      h = linear(h, e.up->use(tp), zb_up);
    }
    return scaling == 1.0 ? h : scale(h, T(scaling));
  }

  void save(const std::string& dir, const nlohmann::json& extra = nlohmann::json::object()) const {
    nlohmann::json meta = extra;
    meta["kind"] = "adapter-set";
    meta["rank"] = rank;
    meta["scaling"] = scaling;
    meta["provenance"] = provenance;
    meta["layers"] = layer_names();
    save_checkpoint(params, dir, meta);
  }

  // Loads values into an already-attached set (the attach calls define the
  // architecture; the file must agree on rank and layer coverage).
  void load(const std::string& dir) {
    const nlohmann::json meta = read_checkpoint_manifest(dir).at("extra");
    if (meta.at("rank").get<int64_t>() != rank)
      fail_validation("adapter checkpoint ", dir, " has rank ", meta.at("rank").get<int64_t>(),
                      ", model expects ", rank);
    load_checkpoint(params, dir);
    scaling = meta.value("scaling", scaling);
    if (meta.contains("provenance")) provenance = meta["provenance"].get<std::string>();
  }

 private:
  struct Entry {
    bool is_conv = false;
    int64_t stride = 1, pad = 0;
    Param<T>* down = nullptr;
    Param<T>* up = nullptr;
  };

  void check_rank(const std::string& name, int64_t r, int64_t in_f, int64_t out_f) const {
    if (r < 1) fail_validation("adapter rank must be >= 1, got ", r);
    if (r > std::min(in_f, out_f))
      fail_validation("adapter rank ", r, " exceeds min(in=", in_f, ", out=", out_f,
                      ") at layer ", name);
    if (entries_.count(name)) fail_validation("adapter already attached at layer ", name);
  }

  std::map<std::string, Entry> entries_;
};

// Attach one adapter branch to every layer whose name the predicate accepts.
// Layers narrower than the requested rank get the largest admissible rank
// instead, so one uniform rank setting covers slim heads too.
template <typename T>
void attach_adapters(AdapterSet<T>& set, const AdaptableLayers<T>& layers,
                     const std::function<bool(const std::string&)>& predicate, int64_t rank,
                     uint64_t seed) {
  if (rank < 1) fail_validation("attach_adapters: rank must be >= 1, got ", rank);
  set.rank = rank;
  Rng rng(derive_seed(derive_seed(seed, "adapter-init"), set.provenance));
  size_t matched = 0;
  for (const auto& [name, layer] : layers.convs)
    if (predicate(name)) {
      const Shape ws = layer->w->value.shape;
      set.attach_conv(name, *layer, rng,
                      std::min(rank, std::min(ws.c * ws.h * ws.w, ws.n)));
      ++matched;
    }
  for (const auto& [name, layer] : layers.linears)
    if (predicate(name)) {
      const Shape ws = layer->w->value.shape;
      set.attach_linear(name, *layer, rng, std::min(rank, std::min(ws.c, ws.n)));
      ++matched;
    }
  if (matched == 0)
    fail_validation("attach_adapters: predicate matched no layers; adapter target is likely "
                    "mis-specified");
}

// Dynamic dual-adapter: a real-data branch and a synthetic-data branch fused
// with one global weight, y_o = W(y_i) + gamma * r(y_i) + (1 - gamma) * s(y_i).
// At the endpoints the silent branch is skipped entirely, making gamma = 1
// (gamma = 0) bit-compatible with a model carrying only the r (s) branch.
template <typename T>
class DualAdapter {
 public:
  AdapterSet<T> r, s;
  DualAdapter() {
    r.provenance = "real";
    s.provenance = "synthetic";
  }

  double gamma() const { return gamma_; }

  void set_gamma(double g) {
    if (!(g >= 0.0 && g <= 1.0))
      fail_validation("gamma must lie in [0,1], got ", g);
    gamma_ = g;
  }

  bool adapts(const std::string& name) const { return r.has(name) || s.has(name); }

  // Eq. 9 applied to one base layer output. `base_out` must be W(y_i).
  Var<T> fuse(Tape<T>& tp, const std::string& name, Var<T> y_i, Var<T> base_out) const {
    Var<T> out = base_out;
    if (r.has(name) && gamma_ > 0.0)
      out = add(out, scale(r.delta(tp, name, y_i), T(gamma_)));
    if (s.has(name) && gamma_ < 1.0)
      out = add(out, scale(s.delta(tp, name, y_i), T(1.0 - gamma_)));
    return out;
  }

  Var<T> conv_forward(Tape<T>& tp, const std::string& name, const Conv2dLayer<T>& base,
                      Var<T> y_i) const {
    return fuse(tp, name, y_i, base.forward(tp, y_i));
  }

  Var<T> linear_forward(Tape<T>& tp, const std::string& name, const LinearLayer<T>& base,
                        Var<T> y_i) const {
    return fuse(tp, name, y_i, base.forward(tp, y_i));
  }

 private:
  double gamma_ = 0.7;
};

}  // namespace osdd
