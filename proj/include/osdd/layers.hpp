#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "osdd/ops.hpp"
#include "osdd/rng.hpp"

namespace osdd {

// A named trainable tensor. Gradients accumulate into `grad` across one or
// more tape passes until the optimizer consumes them.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::zeros(value.shape)) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }

  Var<T> use(Tape<T>& tp) {
    return tp.leaf_with_sink(value, trainable ? &grad : nullptr, trainable);
  }
};

// Registry of parameters owned by a model. Iteration order is registration
// order, which fixes the serialization layout.
template <typename T>
class ParamStore {
 public:
  Param<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) fail_validation("ParamStore: duplicate parameter ", name);
    index_[name] = params_.size();
    params_.push_back(std::make_unique<Param<T>>(name, std::move(value)));
    return *params_.back();
  }

  Param<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) fail_validation("ParamStore: unknown parameter ", name);
    return *params_[it->second];
  }

  const Param<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail_validation("ParamStore: unknown parameter ", name);
    return *params_[it->second];
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Param<T>*> all() {
    std::vector<Param<T>*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  std::vector<const Param<T>*> all() const {
    std::vector<const Param<T>*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  size_t size() const { return params_.size(); }

  int64_t numel() const {
    int64_t n = 0;
    for (auto& p : params_) n += p->value.numel();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Param<T>>> params_;
  std::map<std::string, size_t> index_;
};

// ------------------------------------------------------------- initializers

template <typename T>
Tensor<T> kaiming_normal(Shape s, int64_t fan_in, Rng& rng) {
  Tensor<T> t(s);
  const double std_dev = std::sqrt(2.0 / double(fan_in));
  for (auto& v : t.data) v = T(rng.normal() * std_dev);
  return t;
}

template <typename T>
Tensor<T> uniform_init(Shape s, double lo, double hi, Rng& rng) {
  Tensor<T> t(s);
  for (auto& v : t.data) v = T(rng.uniform(lo, hi));
  return t;
}

// --------------------------------------------------------------- layer blocks

template <typename T>
struct Conv2dLayer {
  Param<T>* w = nullptr;
  Param<T>* b = nullptr;
  int64_t stride = 1;
  int64_t pad = 0;

  static Conv2dLayer make(ParamStore<T>& ps, const std::string& name, int64_t in_ch,
                          int64_t out_ch, int64_t k, int64_t stride, int64_t pad, Rng& rng) {
    Conv2dLayer l;
    l.w = &ps.add(name + ".w", kaiming_normal<T>(Shape{out_ch, in_ch, k, k}, in_ch * k * k, rng));
    l.b = &ps.add(name + ".b", Tensor<T>::zeros(Shape{out_ch, 1, 1, 1}));
    l.stride = stride;
    l.pad = pad;
    return l;
  }

  Var<T> forward(Tape<T>& tp, Var<T> x) const {
    return conv2d(x, w->use(tp), b->use(tp), stride, pad);
  }
};

template <typename T>
struct LinearLayer {
  Param<T>* w = nullptr;
  Param<T>* b = nullptr;

  static LinearLayer make(ParamStore<T>& ps, const std::string& name, int64_t in_f, int64_t out_f,
                          Rng& rng) {
    LinearLayer l;
    l.w = &ps.add(name + ".w", kaiming_normal<T>(Shape{out_f, in_f, 1, 1}, in_f, rng));
    l.b = &ps.add(name + ".b", Tensor<T>::zeros(Shape{out_f, 1, 1, 1}));
    return l;
  }

  Var<T> forward(Tape<T>& tp, Var<T> x) const { return linear(x, w->use(tp), b->use(tp)); }
};

// Largest divisor of c that is <= limit; group count for normalization.
inline int64_t norm_groups_for(int64_t c, int64_t limit = 8) {
  for (int64_t g = std::min(c, limit); g >= 1; --g)
    if (c % g == 0) return g;
  return 1;
}

template <typename T>
struct GroupNormLayer {
  Param<T>* gamma = nullptr;
  Param<T>* beta = nullptr;
  int64_t groups = 1;

  static GroupNormLayer make(ParamStore<T>& ps, const std::string& name, int64_t channels) {
    GroupNormLayer l;
    l.gamma = &ps.add(name + ".gamma", Tensor<T>::full(Shape{channels, 1, 1, 1}, T(1)));
    l.beta = &ps.add(name + ".beta", Tensor<T>::zeros(Shape{channels, 1, 1, 1}));
    l.groups = norm_groups_for(channels);
    return l;
  }

  Var<T> forward(Tape<T>& tp, Var<T> x) const {
    return group_norm(x, gamma->use(tp), beta->use(tp), groups);
  }
};

// Pre-activation residual block, channel-preserving.
template <typename T>
struct ResBlock {
  GroupNormLayer<T> n1, n2;
  Conv2dLayer<T> c1, c2;

  static ResBlock make(ParamStore<T>& ps, const std::string& name, int64_t ch, Rng& rng) {
    ResBlock b;
    b.n1 = GroupNormLayer<T>::make(ps, name + ".n1", ch);
    b.c1 = Conv2dLayer<T>::make(ps, name + ".c1", ch, ch, 3, 1, 1, rng);
    b.n2 = GroupNormLayer<T>::make(ps, name + ".n2", ch);
    b.c2 = Conv2dLayer<T>::make(ps, name + ".c2", ch, ch, 3, 1, 1, rng);
    return b;
  }

  Var<T> forward(Tape<T>& tp, Var<T> x) const {
    Var<T> h = c1.forward(tp, silu(n1.forward(tp, x)));
    h = c2.forward(tp, silu(n2.forward(tp, h)));
    return add(x, h);
  }
};

// ---------------------------------------------------------------------- adam

template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<Param<T>*> params, double lr = 1e-3, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.push_back(Tensor<T>::zeros(p->value.shape));
      v_.push_back(Tensor<T>::zeros(p->value.shape));
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, double(t_));
    const double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Param<T>& p = *params_[i];
      if (!p.trainable) continue;
      for (size_t j = 0; j < p.value.data.size(); ++j) {
        const double g = double(p.grad.data[j]);
        const double mj = beta1_ * double(m_[i].data[j]) + (1.0 - beta1_) * g;
        const double vj = beta2_ * double(v_[i].data[j]) + (1.0 - beta2_) * g * g;
        m_[i].data[j] = T(mj);
        v_[i].data[j] = T(vj);
        const double mhat = mj / bc1;
        const double vhat = vj / bc2;
        p.value.data[j] -= T(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

 private:
  std::vector<Param<T>*> params_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

}  // namespace osdd
