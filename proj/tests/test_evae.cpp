// Skip-connected VAE: shape contracts, dual-encoder wiring, skip-free
// decoder equivalence, the L1 + alpha * perceptual loss, finite-difference
// gradients, small training runs, and checkpointing.
#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>

#include "osdd/blur.hpp"
#include "osdd/checkpoint.hpp"
#include "osdd/evae.hpp"
#include "osdd/toy_data.hpp"
#include "test_refs.hpp"

using namespace osdd;
using testref::random_image;

namespace {

std::string temp_dir(const std::string& tag) {
  auto d = std::filesystem::temp_directory_path() / ("osdd_evae_" + tag);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d.string();
}

EvaeConfig tiny_cfg(int64_t f, int64_t base = 4, bool skips = true) {
  EvaeConfig c;
  c.downsample_factor = f;
  c.latent_channels = 4;
  c.base_channels = base;
  c.use_skips = skips;
  return c;
}

// Extract item `i` of a batched tensor as a batch-of-1 tensor.
template <typename T>
Tensor<T> batch_item(const Tensor<T>& t, int64_t i) {
  Tensor<T> out(Shape{1, t.shape.c, t.shape.h, t.shape.w});
  const int64_t stride = t.shape.c * t.shape.h * t.shape.w;
  std::copy(t.data.begin() + i * stride, t.data.begin() + (i + 1) * stride, out.data.begin());
  return out;
}

template <typename T>
void copy_encoder1_to_encoder2(Evae<T>& m) {
  for (Param<T>* p : m.params.all()) {
    const std::string& n = p->name;
    if (n.rfind("enc1.", 0) == 0) m.params.at("enc2." + n.substr(5)).value = p->value;
  }
}

// Full reconstruction path used in training: sharp latent + blurry skips.
template <typename T>
Tensor<T> reconstruct(Evae<T>& m, const Tensor<T>& x_l, const Tensor<T>& x_h) {
  auto enc = m.encode_with_skips(x_l);
  return m.decode(m.encode_sharp(x_h), m.cfg.use_skips ? enc.skips : std::vector<Tensor<T>>{});
}

double recon_mae(Evae<float>& m, const std::vector<std::pair<Tensor<float>, Tensor<float>>>& ps) {
  double s = 0;
  for (const auto& p : ps) s += double(mean_abs_diff(reconstruct(m, p.first, p.second), p.second));
  return s / double(ps.size());
}

// Loss of the full training graph as a function of the current parameter
// values; used for finite differences.
double full_loss(Evae<double>& m, const FeatureExtractor<double>& fe, const Tensor<double>& xl,
                 const Tensor<double>& xh, double alpha, bool backward = false) {
  Tape<double> tp;
  auto [z_l, skips] = m.encode_with_skips_t(tp, tp.leaf(xl));
  (void)z_l;
  Var<double> xhat = m.decode_t(tp, m.encode_sharp_t(tp, tp.leaf(xh)), skips);
  Var<double> loss = evae_loss_t(tp, fe, xhat, tp.leaf(xh), alpha);
  if (backward) tp.backward(loss);
  return loss.val().item();
}

std::vector<std::pair<Tensor<float>, Tensor<float>>> toy_pairs(int64_t count, int64_t size) {
  BlurKernel k;
  k.size = 3;
  k.grid.assign(9, 1.0 / 9.0);
  std::vector<std::pair<Tensor<float>, Tensor<float>>> ps;
  for (int64_t i = 0; i < count; ++i) {
    Tensor<float> sharp = make_toy_image(i, size);
    ps.emplace_back(apply_blur(sharp, k), sharp);
  }
  return ps;
}

}  // namespace

TEST_CASE("evae: config validation") {
  CHECK_THROWS_AS(Evae<float>(tiny_cfg(3)), ValidationError);
  EvaeConfig c = tiny_cfg(4);
  c.latent_channels = 0;
  CHECK_THROWS_AS(Evae<float>(c), ValidationError);
  CHECK(tiny_cfg(2).levels() == 1);
  CHECK(tiny_cfg(4).levels() == 2);
  CHECK(tiny_cfg(8).levels() == 3);
  CHECK(tiny_cfg(8, 4).channels(3) == 16);  // width cap at 4x base
}

TEST_CASE("evae: shape contracts and determinism at f=8") {
  Evae<float> m(tiny_cfg(8, 4), 11);
  const auto x = random_image<float>(1, 64, 64, 1);

  auto enc = m.encode_with_skips(x);
  CHECK(enc.latent.shape == Shape{1, 4, 8, 8});
  REQUIRE(enc.skips.size() == 3);
  CHECK(enc.skips[0].shape == Shape{1, 4, 64, 64});
  CHECK(enc.skips[1].shape == Shape{1, 8, 32, 32});
  CHECK(enc.skips[2].shape == Shape{1, 16, 16, 16});

  auto enc_again = m.encode_with_skips(x);
  CHECK(bit_equal(enc.latent, enc_again.latent));
  CHECK(bit_equal(enc.skips[2], enc_again.skips[2]));

  CHECK(m.encode_sharp(x).shape == Shape{1, 4, 8, 8});

  const Tensor<float> img = m.decode(enc.latent, enc.skips);
  CHECK(img.shape == Shape{1, 3, 64, 64});
  CHECK(bit_equal(img, m.decode(enc.latent, enc.skips)));
  for (float v : img.data) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
  }
}

TEST_CASE("evae: input validation") {
  Evae<float> m(tiny_cfg(8, 4), 12);
  Tensor<float> bad(Shape{1, 3, 50, 50});
  CHECK_THROWS_WITH(m.encode_sharp(bad), Catch::Matchers::ContainsSubstring("divisible"));
  Tensor<float> two_ch(Shape{1, 2, 64, 64});
  CHECK_THROWS_AS(m.encode_sharp(two_ch), ValidationError);

  const auto x = random_image<float>(1, 64, 64, 2);
  auto enc = m.encode_with_skips(x);
  auto missing = enc.skips;
  missing.pop_back();
  CHECK_THROWS_AS(m.decode(enc.latent, missing), ValidationError);
  auto squashed = enc.skips;
  squashed[1] = Tensor<float>(Shape{1, 8, 16, 16});
  CHECK_THROWS_WITH(m.decode(enc.latent, squashed),
                    Catch::Matchers::ContainsSubstring("skip level 1"));
  Tensor<float> bad_z(Shape{1, 2, 8, 8});
  CHECK_THROWS_AS(m.decode(bad_z, enc.skips), ValidationError);
}

TEST_CASE("evae: batch of two equals concatenated per-item outputs") {
  Evae<float> m(tiny_cfg(2, 6), 13);
  const auto xl0 = random_image<float>(1, 8, 8, 31);
  const auto xl1 = random_image<float>(1, 8, 8, 32);
  const auto xh0 = random_image<float>(1, 8, 8, 33);
  const auto xh1 = random_image<float>(1, 8, 8, 34);
  const Tensor<float> xl = stack_batch<float>({&xl0, &xl1});
  const Tensor<float> xh = stack_batch<float>({&xh0, &xh1});

  auto enc_b = m.encode_with_skips(xl);
  auto enc_0 = m.encode_with_skips(xl0);
  auto enc_1 = m.encode_with_skips(xl1);
  CHECK(max_abs_diff(batch_item(enc_b.latent, 0), enc_0.latent) < 1e-5f);
  CHECK(max_abs_diff(batch_item(enc_b.latent, 1), enc_1.latent) < 1e-5f);
  CHECK(max_abs_diff(batch_item(enc_b.skips[0], 0), enc_0.skips[0]) < 1e-5f);

  const Tensor<float> rec_b = m.decode(m.encode_sharp(xh), enc_b.skips);
  CHECK(max_abs_diff(batch_item(rec_b, 0), reconstruct(m, xl0, xh0)) < 1e-5f);
  CHECK(max_abs_diff(batch_item(rec_b, 1), reconstruct(m, xl1, xh1)) < 1e-5f);
}

TEST_CASE("evae: encoder 2 with encoder 1's weights reproduces its latent") {
  Evae<float> m(tiny_cfg(4, 4), 14);
  const auto x = random_image<float>(1, 16, 16, 3);
  CHECK(!bit_equal(m.encode_sharp(x), m.encode_with_skips(x).latent));  // different init
  copy_encoder1_to_encoder2(m);
  CHECK(bit_equal(m.encode_sharp(x), m.encode_with_skips(x).latent));
}

TEST_CASE("evae: zeroed skip branches match a skip-free decoder") {
  const EvaeConfig cs = tiny_cfg(4, 4, true);
  const EvaeConfig cf = tiny_cfg(4, 4, false);
  Evae<double> ms(cs, 21);
  Evae<double> mf(cf, 22);

  // Zero every skip-branch conv in the skip model.
  for (Param<double>* p : ms.params.all())
    if (p->name.find(".skip") != std::string::npos)
      std::fill(p->value.data.begin(), p->value.data.end(), 0.0);

  // Give the skip-free decoder the same trunk weights; its fuse convs take
  // the first half of the concat input channels (the upsampled path).
  for (Param<double>* p : mf.params.all()) {
    if (p->name.rfind("dec.", 0) != 0) continue;
    const Param<double>& src = ms.params.at(p->name);
    if (p->value.shape == src.value.shape) {
      p->value = src.value;
    } else {
      REQUIRE(p->name.find(".fuse.w") != std::string::npos);
      const Shape d = p->value.shape;
      for (int64_t oc = 0; oc < d.n; ++oc)
        for (int64_t ic = 0; ic < d.c; ++ic)
          for (int64_t ky = 0; ky < d.h; ++ky)
            for (int64_t kx = 0; kx < d.w; ++kx)
              p->value.at(oc, ic, ky, kx) = src.value.at(oc, ic, ky, kx);
    }
  }

  const auto x = random_image<double>(1, 16, 16, 4);
  auto enc = ms.encode_with_skips(x);
  Tape<double> ts, tf;
  std::vector<Var<double>> sv;
  for (const auto& s : enc.skips) sv.push_back(ts.leaf(s));
  const Tensor<double> out_skip = ms.decode_t(ts, ts.leaf(enc.latent), sv).val();
  const Tensor<double> out_free = mf.decode_t(tf, tf.leaf(enc.latent), {}).val();
  CHECK(max_abs_diff(out_skip, out_free) < 1e-6);
}

TEST_CASE("evae: skips carry information from the blurry input") {
  Evae<float> m(tiny_cfg(2, 6), 15);
  const auto xl = random_image<float>(1, 8, 8, 41);
  const auto xh = random_image<float>(1, 8, 8, 42);
  const Tensor<float> z = m.encode_sharp(xh);

  Tensor<float> xl_pert = xl;
  for (auto& v : xl_pert.data) v = std::min(1.0f, v + 0.05f);
  const Tensor<float> a = m.decode(z, m.encode_with_skips(xl).skips);
  const Tensor<float> b = m.decode(z, m.encode_with_skips(xl_pert).skips);
  CHECK(max_abs_diff(a, b) > 0.0f);
}

TEST_CASE("evae loss: identity, plain-L1 mode, two-term oracle, validation") {
  const auto fe = FeatureExtractor<double>::make();
  const auto x = random_image<double>(1, 8, 8, 51);

  CHECK(evae_loss(fe, x, x, 0.7) == 0.0);

  Tensor<double> offset = x;
  for (auto& v : offset.data) v += 0.1;
  CHECK(evae_loss(fe, offset, x, 0.0) == Catch::Approx(0.1).margin(1e-12));

  const auto y = random_image<double>(1, 8, 8, 52);
  const double want = testref::l1_ref(x, y) + 1.0 * testref::perceptual_ref(fe, x, y);
  CHECK(evae_loss(fe, x, y, 1.0) == Catch::Approx(want).margin(1e-12));

  CHECK_THROWS_AS(evae_loss(fe, x, y, -0.5), ValidationError);
  Tensor<double> small(Shape{1, 3, 4, 4});
  CHECK_THROWS_AS(evae_loss(fe, x, small, 1.0), ValidationError);
}

TEST_CASE("evae: analytic gradients match finite differences (float64)") {
  Evae<double> m(tiny_cfg(2, 4), 23);
  const auto fe = FeatureExtractor<double>::make();
  const auto xl = random_image<double>(1, 8, 8, 61);
  const auto xh = random_image<double>(1, 8, 8, 62);
  const double alpha = 0.5;

  m.params.zero_grad();
  full_loss(m, fe, xl, xh, alpha, /*backward=*/true);

  const std::vector<std::string> names = {"enc1.stem.w",    "enc1.l0.r1.c1.w",
                                          "enc2.head.w",    "enc2.head_norm.gamma",
                                          "dec.l0.fuse.w",  "dec.l0.skip0.w",
                                          "dec.out.b",      "dec.mid.n1.beta"};
  Rng pick(7);
  const double h = 1e-5;
  for (const auto& name : names) {
    Param<double>& p = m.params.at(name);
    for (int s = 0; s < 4; ++s) {
      const size_t j = size_t(pick.below(uint64_t(p.value.data.size())));
      const double keep = p.value.data[j];
      p.value.data[j] = keep + h;
      const double lp = full_loss(m, fe, xl, xh, alpha);
      p.value.data[j] = keep - h;
      const double lm = full_loss(m, fe, xl, xh, alpha);
      p.value.data[j] = keep;
      const double numeric = (lp - lm) / (2 * h);
      const double analytic = p.grad.data[j];
      const double rel = std::abs(analytic - numeric) /
                         std::max({1e-3, std::abs(analytic), std::abs(numeric)});
      INFO(name << "[" << j << "] analytic " << analytic << " numeric " << numeric);
      CHECK(rel < 1e-3);
    }
  }
}

TEST_CASE("evae: training reduces reconstruction error") {
  auto pairs = toy_pairs(12, 16);
  Evae<float> m(tiny_cfg(2, 8), 30);
  EvaeTrainConfig tc;
  tc.iters = 120;
  tc.batch = 2;
  tc.lr = 2e-3;
  tc.seed = 5;

  const double before = recon_mae(m, pairs);
  const auto result = train_evae(m, pairs, tc);
  const double after = recon_mae(m, pairs);
  CHECK(int64_t(result.loss_history.size()) == tc.iters);
  CHECK(after < before);

  CHECK_THROWS_AS(train_evae(m, {}, tc), ValidationError);
}

TEST_CASE("evae: single-pair overfit reaches MAE below 0.005 within 3000 iterations") {
  auto pairs = toy_pairs(1, 16);
  Evae<float> m(tiny_cfg(2, 8), 31);
  EvaeTrainConfig tc;
  tc.batch = 1;
  tc.lr = 3e-3;
  tc.seed = 6;
  tc.alpha_override = 0.0;  // pure L1 for the pixel-error target

  int64_t used = 0;
  double mae = recon_mae(m, pairs);
  while (used < 3000 && mae >= 0.005) {
    tc.iters = 250;
    tc.seed = 6 + uint64_t(used);
    train_evae(m, pairs, tc);
    used += tc.iters;
    mae = recon_mae(m, pairs);
  }
  INFO("MAE " << mae << " after " << used << " iterations");
  CHECK(mae < 0.005);
}

TEST_CASE("evae: checkpoint roundtrip restores outputs exactly") {
  const std::string dir = temp_dir("ckpt");
  const EvaeConfig cfg = tiny_cfg(4, 4);
  Evae<float> a(cfg, 71);
  Evae<float> b(cfg, 72);
  const auto x = random_image<float>(1, 16, 16, 9);
  REQUIRE(!bit_equal(a.encode_sharp(x), b.encode_sharp(x)));

  save_checkpoint(a.params, dir, {{"kind", "evae"}, {"config", cfg.to_json()}});
  load_checkpoint(b.params, dir);
  CHECK(bit_equal(a.encode_sharp(x), b.encode_sharp(x)));
  auto ea = a.encode_with_skips(x);
  auto eb = b.encode_with_skips(x);
  CHECK(bit_equal(a.decode(ea.latent, ea.skips), b.decode(eb.latent, eb.skips)));

  const auto manifest = read_checkpoint_manifest(dir);
  CHECK(manifest.at("extra").at("kind") == "evae");
  CHECK(EvaeConfig::from_json(manifest.at("extra").at("config")).downsample_factor == 4);

  Evae<float> wrong(tiny_cfg(4, 6), 73);
  CHECK_THROWS_AS(load_checkpoint(wrong.params, dir), ValidationError);
  CHECK_THROWS_AS(load_checkpoint(b.params, dir + "_missing"), ValidationError);
  std::filesystem::remove_all(dir);
}
