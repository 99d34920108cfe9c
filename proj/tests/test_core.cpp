// Numeric core: tensors, RNG streams, the autograd tape, and every op's
// forward values and gradients (checked against central finite differences
// in double precision).
#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "osdd/layers.hpp"
#include "osdd/ops.hpp"
#include "osdd/rng.hpp"

using namespace osdd;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(s);
  rng.fill_uniform(t, lo, hi);
  return t;
}

double eval_built(const std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>& build,
                  const std::vector<Tensor<double>>& ins) {
  Tape<double> tp;
  std::vector<Var<double>> vars;
  vars.reserve(ins.size());
  for (const auto& in : ins) vars.push_back(tp.leaf(in, false));
  return build(tp, vars).val().item();
}

// Compares tape gradients of a scalar-valued graph against central finite
// differences, elementwise over every input tensor.
void gradcheck(std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)> build,
               std::vector<Tensor<double>> inputs, double tol = 1e-6, double h = 1e-5) {
  Tape<double> tp;
  std::vector<Var<double>> vars;
  for (const auto& in : inputs) vars.push_back(tp.leaf(in, true));
  Var<double> loss = build(tp, vars);
  REQUIRE(loss.val().numel() == 1);
  tp.backward(loss);
  for (size_t vi = 0; vi < inputs.size(); ++vi) {
    Tensor<double> analytic = tp.has_grad(vars[vi].id)
                                  ? tp.grad(vars[vi].id)
                                  : Tensor<double>::zeros(inputs[vi].shape);
    for (size_t j = 0; j < inputs[vi].data.size(); ++j) {
      auto plus = inputs;
      auto minus = inputs;
      plus[vi].data[j] += h;
      minus[vi].data[j] -= h;
      const double num = (eval_built(build, plus) - eval_built(build, minus)) / (2.0 * h);
      const double ana = analytic.data[j];
      const double denom = std::max({1.0, std::abs(num), std::abs(ana)});
      INFO("input " << vi << " element " << j << ": analytic " << ana << " numeric " << num);
      REQUIRE(std::abs(ana - num) <= tol * denom);
    }
  }
}

// Weighted-sum readout so gradients of non-scalar ops are probed against a
// generic direction rather than all-ones. Seeded from the shape so repeated
// builds of the same graph (finite-difference re-evaluations) see the same
// function.
Var<double> readout(Tape<double>& tp, Var<double> y) {
  Rng r(derive_seed(12345, "readout", static_cast<uint64_t>(y.val().numel())));
  Tensor<double> w(y.shape());
  r.fill_uniform(w, -1.0, 1.0);
  return sum_all(mul(y, tp.leaf(w, false)));
}

Tensor<double> conv_ref(const Tensor<double>& x, const Tensor<double>& w,
                        const Tensor<double>& b, int64_t stride, int64_t pad) {
  const int64_t oh = (x.shape.h + 2 * pad - w.shape.h) / stride + 1;
  const int64_t ow = (x.shape.w + 2 * pad - w.shape.w) / stride + 1;
  Tensor<double> y(Shape{x.shape.n, w.shape.n, oh, ow});
  for (int64_t n = 0; n < x.shape.n; ++n)
    for (int64_t oc = 0; oc < w.shape.n; ++oc)
      for (int64_t oy = 0; oy < oh; ++oy)
        for (int64_t ox = 0; ox < ow; ++ox) {
          double acc = b.data[static_cast<size_t>(oc)];
          for (int64_t ic = 0; ic < x.shape.c; ++ic)
            for (int64_t ky = 0; ky < w.shape.h; ++ky)
              for (int64_t kx = 0; kx < w.shape.w; ++kx) {
                const int64_t iy = oy * stride - pad + ky;
                const int64_t ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= x.shape.h || ix < 0 || ix >= x.shape.w) continue;
                acc += x.at(n, ic, iy, ix) * w.at(oc, ic, ky, kx);
              }
          y.at(n, oc, oy, ox) = acc;
        }
  return y;
}

}  // namespace

TEST_CASE("shape and tensor basics") {
  Shape s{2, 3, 4, 5};
  REQUIRE(s.numel() == 120);
  Tensor<float> t(s);
  REQUIRE(t.data.size() == 120);
  t.at(1, 2, 3, 4) = 7.0f;
  REQUIRE(t.data[119] == 7.0f);
  REQUIRE(Tensor<float>::scalar(3.0f).item() == 3.0f);
  REQUIRE_THROWS_AS(t.item(), ValidationError);
  Tensor<float> nan_t = Tensor<float>::scalar(std::nanf(""));
  REQUIRE_FALSE(nan_t.all_finite());
  REQUIRE(t.all_finite());
}

TEST_CASE("splitmix64 reference vector and stream derivation") {
  uint64_t state = 0;
  REQUIRE(splitmix64(state) == 0xE220A8397B1DCDAFULL);
  // distinct streams from one root
  REQUIRE(derive_seed(42, 0) != derive_seed(42, 1));
  REQUIRE(derive_seed(42, "blur", 0) != derive_seed(42, "evae", 0));
  REQUIRE(derive_seed(42, "blur", 0) == derive_seed(42, "blur", 0));
}

TEST_CASE("rng determinism and distribution sanity") {
  Rng a(123), b(123), c(124);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
  REQUIRE(a.next_u64() != c.next_u64());

  Rng r(7);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = r.normal();
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  REQUIRE(std::abs(mean) < 0.03);
  REQUIRE(std::abs(var - 1.0) < 0.05);

  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
}

TEST_CASE("tape accumulates along shared paths") {
  // f(x) = sum(x*x + x); df/dx = 2x + 1
  Tape<double> tp;
  Tensor<double> xv(Shape{1, 1, 2, 2});
  xv.data = {1.0, -2.0, 0.5, 3.0};
  Var<double> x = tp.leaf(xv, true);
  Var<double> f = sum_all(add(mul(x, x), x));
  tp.backward(f);
  const Tensor<double>& g = tp.grad(x.id);
  for (size_t i = 0; i < 4; ++i)
    REQUIRE(g.data[i] == Catch::Approx(2.0 * xv.data[i] + 1.0).epsilon(1e-12));
}

TEST_CASE("tape without requires_grad stays inference-only") {
  Tape<double> tp;
  Var<double> x = tp.leaf(Tensor<double>::full(Shape{1, 1, 2, 2}, 2.0), false);
  Var<double> y = mean_all(mul(x, x));
  REQUIRE(y.val().item() == Catch::Approx(4.0));
  REQUIRE_FALSE(y.requires_grad());
  tp.backward(y);
  REQUIRE_FALSE(tp.has_grad(x.id));
}

TEST_CASE("leaf_with_sink accumulates into external parameter grads") {
  Param<double> p("w", Tensor<double>::full(Shape{1, 1, 1, 2}, 3.0));
  for (int pass = 0; pass < 2; ++pass) {
    Tape<double> tp;
    Var<double> w = p.use(tp);
    tp.backward(sum_all(mul(w, w)));
  }
  // d/dw sum(w^2) = 2w = 6, accumulated over two passes = 12
  REQUIRE(p.grad.data[0] == Catch::Approx(12.0));
  REQUIRE(p.grad.data[1] == Catch::Approx(12.0));
  p.zero_grad();
  REQUIRE(p.grad.data[0] == 0.0);
}

TEST_CASE("detach cuts the gradient path") {
  Tape<double> tp;
  Var<double> x = tp.leaf(Tensor<double>::full(Shape{1, 1, 1, 1}, 2.0), true);
  Var<double> y = mul(x, detach(scale(x, 3.0)));  // y = x * const(3x)
  tp.backward(sum_all(y));
  REQUIRE(tp.grad(x.id).data[0] == Catch::Approx(6.0));  // only the live branch
}

TEST_CASE("elementwise forward values") {
  Tape<double> tp;
  Tensor<double> av(Shape{1, 1, 1, 3});
  av.data = {1.0, -2.0, 0.5};
  Tensor<double> bv(Shape{1, 1, 1, 3});
  bv.data = {4.0, 0.25, -1.0};
  Var<double> a = tp.leaf(av, false);
  Var<double> b = tp.leaf(bv, false);
  REQUIRE(add(a, b).val().data[0] == 5.0);
  REQUIRE(sub(a, b).val().data[1] == -2.25);
  REQUIRE(mul(a, b).val().data[2] == -0.5);
  REQUIRE(scale(a, 2.0).val().data[1] == -4.0);
  REQUIRE(add_const(a, 1.0).val().data[1] == -1.0);
  REQUIRE(relu(a).val().data[1] == 0.0);
  REQUIRE(leaky_relu(a, 0.1).val().data[1] == Catch::Approx(-0.2));
  REQUIRE(sigmoid_op(tp.leaf(Tensor<double>::scalar(0.0), false)).val().item() == 0.5);
  REQUIRE(silu(tp.leaf(Tensor<double>::scalar(0.0), false)).val().item() == 0.0);
  const double s1 = 1.0 / (1.0 + std::exp(-1.0));
  REQUIRE(silu(tp.leaf(Tensor<double>::scalar(1.0), false)).val().item() ==
          Catch::Approx(s1).epsilon(1e-12));
  REQUIRE(clamp_op(a, -1.0, 0.75).val().data[1] == -1.0);
  REQUIRE(clamp_op(a, -1.0, 0.75).val().data[0] == 0.75);
  REQUIRE(sqrt_op(b).val().data[0] == 2.0);
  REQUIRE(log_op(tp.leaf(Tensor<double>::scalar(std::exp(1.0)), false)).val().item() ==
          Catch::Approx(1.0).epsilon(1e-12));
  REQUIRE_THROWS_AS(add(a, tp.leaf(Tensor<double>::zeros(Shape{1, 1, 1, 4}), false)),
                    ValidationError);
}

TEST_CASE("loss forward values") {
  Tape<double> tp;
  Tensor<double> av(Shape{1, 1, 2, 2});
  av.data = {1.0, 2.0, 3.0, 4.0};
  Tensor<double> bv(Shape{1, 1, 2, 2});
  bv.data = {1.5, 1.0, 3.0, 6.0};
  Var<double> a = tp.leaf(av, false);
  Var<double> b = tp.leaf(bv, false);
  // |diffs| = 0.5, 1, 0, 2 -> mean 0.875 ; squares = 0.25, 1, 0, 4 -> mean 1.3125
  REQUIRE(l1_loss(a, b).val().item() == Catch::Approx(0.875).epsilon(1e-12));
  REQUIRE(mse_loss(a, b).val().item() == Catch::Approx(1.3125).epsilon(1e-12));
  REQUIRE(mean_all(a).val().item() == Catch::Approx(2.5));
  REQUIRE(sum_all(a).val().item() == Catch::Approx(10.0));
}

TEST_CASE("shape ops forward") {
  Tape<double> tp;
  Rng rng(11);
  Tensor<double> xv = random_tensor(Shape{2, 3, 2, 2}, rng);
  Var<double> x = tp.leaf(xv, false);

  Var<double> r = reshape(x, Shape{1, 12, 1, 2});
  REQUIRE(r.shape() == Shape{1, 12, 1, 2});
  REQUIRE(r.val().data == xv.data);
  REQUIRE_THROWS_AS(reshape(x, Shape{1, 1, 1, 5}), ValidationError);

  Tensor<double> yv = random_tensor(Shape{2, 2, 2, 2}, rng);
  Var<double> y = tp.leaf(yv, false);
  Var<double> cat = concat_ch(x, y);
  REQUIRE(cat.shape() == Shape{2, 5, 2, 2});
  REQUIRE(cat.val().at(1, 3, 1, 0) == yv.at(1, 0, 1, 0));
  REQUIRE(cat.val().at(0, 2, 0, 1) == xv.at(0, 2, 0, 1));

  Var<double> sl = slice_ch(cat, 3, 2);
  REQUIRE(sl.shape() == Shape{2, 2, 2, 2});
  REQUIRE(max_abs_diff(sl.val(), yv) == 0.0);

  Tensor<double> uv(Shape{1, 1, 2, 2});
  uv.data = {1.0, 2.0, 3.0, 4.0};
  Var<double> up = upsample_nearest2x(tp.leaf(uv, false));
  REQUIRE(up.shape() == Shape{1, 1, 4, 4});
  REQUIRE(up.val().at(0, 0, 0, 1) == 1.0);
  REQUIRE(up.val().at(0, 0, 1, 2) == 2.0);
  REQUIRE(up.val().at(0, 0, 3, 3) == 4.0);

  Var<double> gap = mean_hw(tp.leaf(uv, false));
  REQUIRE(gap.shape() == Shape{1, 1, 1, 1});
  REQUIRE(gap.val().item() == Catch::Approx(2.5));
}

TEST_CASE("channel broadcast forward") {
  Tape<double> tp;
  Tensor<double> xv(Shape{2, 2, 1, 2});
  xv.data = {1, 2, 3, 4, 5, 6, 7, 8};
  Tensor<double> sv(Shape{1, 2, 1, 1});
  sv.data = {2.0, -1.0};
  Var<double> x = tp.leaf(xv, false);
  Var<double> s = tp.leaf(sv, false);
  Var<double> m = mul_channel(x, s);
  REQUIRE(m.val().at(0, 0, 0, 1) == 4.0);
  REQUIRE(m.val().at(1, 1, 0, 0) == -7.0);
  Var<double> ad = add_channel(x, s);
  REQUIRE(ad.val().at(0, 1, 0, 0) == 2.0);

  Tensor<double> pv(Shape{2, 2, 1, 1});
  pv.data = {1.0, 2.0, 3.0, 4.0};  // per-sample scales
  Var<double> p = tp.leaf(pv, false);
  Var<double> mp = mul_channel(x, p);
  REQUIRE(mp.val().at(1, 0, 0, 0) == 15.0);
  REQUIRE(mp.val().at(1, 1, 0, 1) == 32.0);
}

TEST_CASE("linear matches hand computation") {
  Tape<double> tp;
  Tensor<double> xv(Shape{2, 3, 1, 1});
  xv.data = {1, 2, 3, 4, 5, 6};
  Tensor<double> wv(Shape{2, 3, 1, 1});
  wv.data = {1, 0, -1, 0.5, 0.5, 0.5};
  Tensor<double> bv(Shape{2, 1, 1, 1});
  bv.data = {10.0, -10.0};
  Var<double> y = linear(tp.leaf(xv, false), tp.leaf(wv, false), tp.leaf(bv, false));
  REQUIRE(y.shape() == Shape{2, 2, 1, 1});
  REQUIRE(y.val().data[0] == Catch::Approx(1 - 3 + 10.0));
  REQUIRE(y.val().data[1] == Catch::Approx(3.0 - 10.0));
  REQUIRE(y.val().data[2] == Catch::Approx(4 - 6 + 10.0));
  REQUIRE(y.val().data[3] == Catch::Approx(7.5 - 10.0));
}

TEST_CASE("conv2d matches brute-force reference") {
  Rng rng(21);
  struct Cfg {
    int64_t n, ic, h, w, oc, k, stride, pad;
  };
  for (const Cfg& c : {Cfg{1, 1, 5, 5, 1, 3, 1, 1}, Cfg{2, 3, 6, 5, 4, 3, 1, 1},
                       Cfg{1, 2, 8, 8, 3, 3, 2, 1}, Cfg{2, 4, 4, 4, 2, 1, 1, 0},
                       Cfg{1, 2, 9, 7, 2, 5, 1, 2}, Cfg{1, 3, 8, 8, 2, 4, 2, 1}}) {
    Tape<double> tp;
    Tensor<double> xv = random_tensor(Shape{c.n, c.ic, c.h, c.w}, rng);
    Tensor<double> wv = random_tensor(Shape{c.oc, c.ic, c.k, c.k}, rng);
    Tensor<double> bv = random_tensor(Shape{c.oc, 1, 1, 1}, rng);
    Var<double> y = conv2d(tp.leaf(xv, false), tp.leaf(wv, false), tp.leaf(bv, false),
                           c.stride, c.pad);
    Tensor<double> ref = conv_ref(xv, wv, bv, c.stride, c.pad);
    REQUIRE(y.shape() == ref.shape);
    REQUIRE(max_abs_diff(y.val(), ref) < 1e-12);
  }
}

TEST_CASE("group_norm normalizes per group") {
  Rng rng(31);
  Tape<double> tp;
  const int64_t groups = 2;
  Tensor<double> xv = random_tensor(Shape{2, 4, 3, 3}, rng, -3.0, 5.0);
  Var<double> y = group_norm(tp.leaf(xv, false),
                             tp.leaf(Tensor<double>::full(Shape{4, 1, 1, 1}, 1.0), false),
                             tp.leaf(Tensor<double>::zeros(Shape{4, 1, 1, 1}), false), groups);
  const int64_t cg = 2, hw = 9, m = cg * hw;
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t g = 0; g < groups; ++g) {
      double mean = 0, var = 0;
      for (int64_t c = 0; c < cg; ++c)
        for (int64_t i = 0; i < hw; ++i)
          mean += y.val().at(n, g * cg + c, i / 3, i % 3);
      mean /= m;
      for (int64_t c = 0; c < cg; ++c)
        for (int64_t i = 0; i < hw; ++i) {
          const double d = y.val().at(n, g * cg + c, i / 3, i % 3) - mean;
          var += d * d;
        }
      var /= m;
      REQUIRE(std::abs(mean) < 1e-10);
      REQUIRE(var == Catch::Approx(1.0).epsilon(1e-3));  // eps in denominator
    }
  REQUIRE(norm_groups_for(12) == 6);
  REQUIRE(norm_groups_for(8) == 8);
  REQUIRE(norm_groups_for(7) == 7);
  REQUIRE(norm_groups_for(16) == 8);
}

TEST_CASE("gradients: elementwise and activations") {
  Rng rng(41);
  const Shape s{1, 2, 2, 3};
  auto x = random_tensor(s, rng, 0.2, 1.5);   // positive, away from kinks
  auto y = random_tensor(s, rng, -1.5, -0.2);

  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, add(v[0], v[1]));
  }, {x, y});
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, sub(v[0], v[1]));
  }, {x, y});
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, mul(v[0], v[1]));
  }, {x, y});
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, scale(add_const(v[0], 0.3), -1.7));
  }, {x});
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, relu(v[0]));
  }, {random_tensor(s, rng, 0.3, 1.0)});
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, leaky_relu(v[0], 0.2));
  }, {random_tensor(s, rng, -1.0, -0.3)});
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, silu(v[0]));
  }, {random_tensor(s, rng, -2.0, 2.0)});
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, sigmoid_op(v[0]));
  }, {random_tensor(s, rng, -2.0, 2.0)});
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, sqrt_op(v[0]));
  }, {random_tensor(s, rng, 0.5, 2.0)});
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, log_op(v[0]));
  }, {random_tensor(s, rng, 0.5, 2.0)});
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, clamp_op(v[0], -0.9, 0.9));
  }, {random_tensor(s, rng, -0.7, 0.7)});
}

TEST_CASE("gradients: shape ops and broadcasts") {
  Rng rng(43);
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, reshape(v[0], Shape{1, 12, 1, 1}));
  }, {random_tensor(Shape{1, 2, 2, 3}, rng)});
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, concat_ch(v[0], v[1]));
  }, {random_tensor(Shape{2, 2, 2, 2}, rng), random_tensor(Shape{2, 3, 2, 2}, rng)});
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, slice_ch(v[0], 1, 2));
  }, {random_tensor(Shape{2, 4, 2, 2}, rng)});
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, upsample_nearest2x(v[0]));
  }, {random_tensor(Shape{1, 2, 2, 2}, rng)});
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, mul_channel(v[0], v[1]));
  }, {random_tensor(Shape{2, 3, 2, 2}, rng), random_tensor(Shape{1, 3, 1, 1}, rng)});
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, mul_channel(v[0], v[1]));
  }, {random_tensor(Shape{2, 3, 2, 2}, rng), random_tensor(Shape{2, 3, 1, 1}, rng)});
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, add_channel(v[0], v[1]));
  }, {random_tensor(Shape{2, 3, 2, 2}, rng), random_tensor(Shape{2, 3, 1, 1}, rng)});
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, mean_hw(v[0]));
  }, {random_tensor(Shape{2, 3, 3, 2}, rng)});
}

TEST_CASE("gradients: linear, conv, groupnorm, losses") {
  Rng rng(47);
  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, linear(v[0], v[1], v[2]));
  }, {random_tensor(Shape{3, 4, 1, 1}, rng), random_tensor(Shape{2, 4, 1, 1}, rng),
      random_tensor(Shape{2, 1, 1, 1}, rng)});

  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, conv2d(v[0], v[1], v[2], 1, 1));
  }, {random_tensor(Shape{2, 2, 4, 4}, rng), random_tensor(Shape{3, 2, 3, 3}, rng),
      random_tensor(Shape{3, 1, 1, 1}, rng)});

  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, conv2d(v[0], v[1], v[2], 2, 1));
  }, {random_tensor(Shape{1, 2, 5, 5}, rng), random_tensor(Shape{2, 2, 3, 3}, rng),
      random_tensor(Shape{2, 1, 1, 1}, rng)});

  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, conv2d(v[0], v[1], v[2], 1, 0));
  }, {random_tensor(Shape{2, 3, 3, 3}, rng), random_tensor(Shape{2, 3, 1, 1}, rng),
      random_tensor(Shape{2, 1, 1, 1}, rng)});

  gradcheck([&](Tape<double>& tp, std::vector<Var<double>>& v) {
    return readout(tp, group_norm(v[0], v[1], v[2], 2));
  }, {random_tensor(Shape{2, 4, 3, 3}, rng), random_tensor(Shape{4, 1, 1, 1}, rng, 0.5, 1.5),
      random_tensor(Shape{4, 1, 1, 1}, rng)}, 1e-5);

  const Shape s{2, 2, 3, 3};
  gradcheck([&](Tape<double>&, std::vector<Var<double>>& v) {
    return l1_loss(v[0], v[1]);
  }, {random_tensor(s, rng, 1.0, 2.0), random_tensor(s, rng, -2.0, -1.0)});
  gradcheck([&](Tape<double>&, std::vector<Var<double>>& v) {
    return mse_loss(v[0], v[1]);
  }, {random_tensor(s, rng), random_tensor(s, rng)});
  gradcheck([&](Tape<double>&, std::vector<Var<double>>& v) {
    return mean_all(mul(v[0], v[0]));
  }, {random_tensor(s, rng)});
}

TEST_CASE("gradients: composite network slice") {
  // conv -> groupnorm -> silu -> conv stride 2 -> GAP -> linear -> sigmoid
  Rng rng(53);
  gradcheck(
      [&](Tape<double>&, std::vector<Var<double>>& v) {
        Var<double> h = conv2d(v[0], v[1], v[2], 1, 1);
        h = group_norm(h, v[3], v[4], 2);
        h = silu(h);
        h = conv2d(h, v[5], v[6], 2, 1);
        h = mean_hw(h);
        h = linear(h, v[7], v[8]);
        return sum_all(sigmoid_op(h));
      },
      {random_tensor(Shape{2, 2, 4, 4}, rng), random_tensor(Shape{4, 2, 3, 3}, rng, -0.4, 0.4),
       random_tensor(Shape{4, 1, 1, 1}, rng), random_tensor(Shape{4, 1, 1, 1}, rng, 0.5, 1.5),
       random_tensor(Shape{4, 1, 1, 1}, rng), random_tensor(Shape{4, 4, 3, 3}, rng, -0.4, 0.4),
       random_tensor(Shape{4, 1, 1, 1}, rng), random_tensor(Shape{1, 4, 1, 1}, rng),
       random_tensor(Shape{1, 1, 1, 1}, rng)},
      1e-5);
}

TEST_CASE("adam single step matches hand computation") {
  ParamStore<double> ps;
  Param<double>& p = ps.add("w", Tensor<double>::full(Shape{1, 1, 1, 1}, 1.0));
  Adam<double> opt(ps.all(), 0.1);
  p.grad.data[0] = 2.0;
  opt.step();
  // m_hat = g, v_hat = g^2  ->  step = lr * g / (|g| + eps) ~= lr
  REQUIRE(p.value.data[0] == Catch::Approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("param store rejects duplicates and reports totals") {
  ParamStore<float> ps;
  ps.add("a", Tensor<float>::zeros(Shape{2, 3, 1, 1}));
  REQUIRE_THROWS_AS(ps.add("a", Tensor<float>::zeros(Shape{1, 1, 1, 1})), ValidationError);
  REQUIRE_THROWS_AS(ps.at("missing"), ValidationError);
  ps.add("b", Tensor<float>::zeros(Shape{4, 1, 1, 1}));
  REQUIRE(ps.numel() == 10);
  REQUIRE(ps.size() == 2);
}
