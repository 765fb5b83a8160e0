#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "mambaseg/losses.hpp"
#include "mambaseg/metrics.hpp"
#include "mambaseg/optim.hpp"
#include "mambaseg/train.hpp"
#include "testutil.hpp"

using namespace mambaseg;
using testutil::test_rng;

// ---- dice + cross-entropy loss -----------------------------------------------------

TEST_CASE("confident correct logits drive the loss to zero") {
  long t = 12, k = 4;
  std::vector<std::uint8_t> labels(static_cast<size_t>(t));
  Tensor logits = Tensor::zeros({t, k});
  for (long i = 0; i < t; ++i) {
    labels[static_cast<size_t>(i)] = static_cast<std::uint8_t>(i % k);
    logits.data()[i * k + (i % k)] = 20.0f;
  }
  Tensor loss = losses::dice_ce(logits, labels);
  CHECK(loss.at(0) < 1e-3f);
}

TEST_CASE("dice_ce matches a direct-summation oracle on a random case") {
  auto rng = test_rng(1);
  long t = 30, k = 3;
  Tensor logits = Tensor::uniform({t, k}, 2.0f, rng, false);
  std::vector<std::uint8_t> labels(static_cast<size_t>(t));
  for (long i = 0; i < t; ++i) labels[static_cast<size_t>(i)] = static_cast<std::uint8_t>(rng() % k);

  // Naive double-precision re-computation of both terms.
  std::vector<double> probs(static_cast<size_t>(t * k));
  double ce = 0.0;
  for (long i = 0; i < t; ++i) {
    double mx = -1e30;
    for (long c = 0; c < k; ++c) mx = std::max(mx, static_cast<double>(logits.at(i * k + c)));
    double z = 0.0;
    for (long c = 0; c < k; ++c) z += std::exp(static_cast<double>(logits.at(i * k + c)) - mx);
    for (long c = 0; c < k; ++c)
      probs[static_cast<size_t>(i * k + c)] =
          std::exp(static_cast<double>(logits.at(i * k + c)) - mx) / z;
    ce -= std::log(probs[static_cast<size_t>(i * k + labels[static_cast<size_t>(i)])]);
  }
  ce /= static_cast<double>(t);
  double dice_sum = 0.0;
  const double eps = 1e-5;
  for (long c = 1; c < k; ++c) {
    double inter = 0.0, psum = 0.0, gsum = 0.0;
    for (long i = 0; i < t; ++i) {
      double p = probs[static_cast<size_t>(i * k + c)];
      double g = labels[static_cast<size_t>(i)] == c ? 1.0 : 0.0;
      inter += p * g;
      psum += p;
      gsum += g;
    }
    dice_sum += (2.0 * inter + eps) / (psum + gsum + eps);
  }
  double want = ce + (1.0 - dice_sum / static_cast<double>(k - 1));
  Tensor got = losses::dice_ce(logits, labels);
  CHECK(got.at(0) == doctest::Approx(want).epsilon(1e-4));
}

TEST_CASE("dice_ce accepts class-major volumes and validates labels") {
  auto rng = test_rng(2);
  Tensor vol = Tensor::uniform({3, 2, 2, 2}, 1.0f, rng, false);
  std::vector<std::uint8_t> labels(8, 1);
  CHECK(losses::dice_ce(vol, labels).at(0) > 0.0f);

  std::vector<std::uint8_t> short_labels(7, 0);
  CHECK_THROWS_AS(losses::dice_ce(vol, short_labels), DimensionError);
  std::vector<std::uint8_t> bad(8, 3);  // class id out of range for k=3
  CHECK_THROWS_AS(losses::dice_ce(vol, bad), ParameterError);
}

TEST_CASE("dice_ce is differentiable in the logits") {
  auto rng = test_rng(3);
  Tensor logits = Tensor::uniform({10, 3}, 1.0f, rng, true);
  std::vector<std::uint8_t> labels(10);
  for (long i = 0; i < 10; ++i) labels[static_cast<size_t>(i)] = static_cast<std::uint8_t>(i % 3);
  float err = testutil::grad_check({logits}, [&] { return losses::dice_ce(logits, labels); }, 1e-3f);
  CHECK(err < 1e-3f);
}

// ---- overlap metrics ------------------------------------------------------------------

TEST_CASE("perfect, disjoint, and half-overlap masks score as computed by hand") {
  std::vector<std::uint8_t> gt(12, 0), pred(12, 0);
  for (int i = 0; i < 4; ++i) gt[static_cast<size_t>(i)] = 1;

  pred = gt;
  auto perfect = metrics::overlap(pred, gt, 2);
  CHECK(perfect[0].dice == doctest::Approx(1.0));
  CHECK(perfect[0].iou == doctest::Approx(1.0));

  std::fill(pred.begin(), pred.end(), 0);
  for (int i = 4; i < 8; ++i) pred[static_cast<size_t>(i)] = 1;
  auto disjoint = metrics::overlap(pred, gt, 2);
  CHECK(disjoint[0].dice == doctest::Approx(0.0));
  CHECK(disjoint[0].iou == doctest::Approx(0.0));

  std::fill(pred.begin(), pred.end(), 0);
  for (int i = 2; i < 6; ++i) pred[static_cast<size_t>(i)] = 1;  // |P|=4, |G|=4, |P^G|=2
  auto half = metrics::overlap(pred, gt, 2);
  CHECK(half[0].dice == doctest::Approx(0.5));
  CHECK(half[0].iou == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("a class absent from both masks scores 1 by convention") {
  std::vector<std::uint8_t> gt(6, 0), pred(6, 0);
  auto r = metrics::overlap(pred, gt, 3);
  REQUIRE(r.size() == 2);
  for (const auto& c : r) {
    CHECK(c.dice == 1.0);
    CHECK(c.iou == 1.0);
  }
}

TEST_CASE("Dice dominates IoU on random masks") {
  auto rng = test_rng(4);
  for (int rep = 0; rep < 30; ++rep) {
    std::vector<std::uint8_t> gt(50), pred(50);
    for (auto& v : gt) v = static_cast<std::uint8_t>(rng() % 3);
    for (auto& v : pred) v = static_cast<std::uint8_t>(rng() % 3);
    for (const auto& c : metrics::overlap(pred, gt, 3)) {
      CHECK(c.dice >= c.iou - 1e-12);
      CHECK(c.dice >= 0.0);
      CHECK(c.dice <= 1.0);
    }
  }
}

// ---- HD95 ------------------------------------------------------------------------------

namespace {

/// Brute-force directed 95th percentile over explicit surface voxel lists.
std::vector<std::array<long, 3>> surface_of(const std::vector<std::uint8_t>& m, long d, long h,
                                            long w, int cls) {
  auto at = [&](long z, long y, long x) {
    if (z < 0 || y < 0 || x < 0 || z >= d || y >= h || x >= w) return false;
    return m[static_cast<size_t>((z * h + y) * w + x)] == cls;
  };
  std::vector<std::array<long, 3>> out;
  for (long z = 0; z < d; ++z)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x)
        if (at(z, y, x) && (!at(z - 1, y, x) || !at(z + 1, y, x) || !at(z, y - 1, x) ||
                            !at(z, y + 1, x) || !at(z, y, x - 1) || !at(z, y, x + 1)))
          out.push_back({z, y, x});
  return out;
}

double directed95_brute(const std::vector<std::array<long, 3>>& from,
                        const std::vector<std::array<long, 3>>& to,
                        std::array<float, 3> sp) {
  std::vector<double> dists;
  for (const auto& a : from) {
    double best = 1e300;
    for (const auto& b : to) {
      double dz = (a[0] - b[0]) * static_cast<double>(sp[0]);
      double dy = (a[1] - b[1]) * static_cast<double>(sp[1]);
      double dx = (a[2] - b[2]) * static_cast<double>(sp[2]);
      best = std::min(best, dz * dz + dy * dy + dx * dx);
    }
    dists.push_back(std::sqrt(best));
  }
  std::sort(dists.begin(), dists.end());
  double idx = 0.95 * static_cast<double>(dists.size() - 1);
  long i0 = static_cast<long>(std::floor(idx));
  long i1 = std::min<long>(i0 + 1, static_cast<long>(dists.size()) - 1);
  double f = idx - static_cast<double>(i0);
  return (1.0 - f) * dists[static_cast<size_t>(i0)] + f * dists[static_cast<size_t>(i1)];
}

}  // namespace

TEST_CASE("HD95 of identical masks is zero") {
  std::vector<std::uint8_t> m(27, 0);
  m[13] = 1;
  m[14] = 1;
  auto r = metrics::hd95(m, m, 3, 3, 3, {1.5f, 1.5f, 1.5f}, 1);
  REQUIRE(r.has_value());
  CHECK(*r == doctest::Approx(0.0));
}

TEST_CASE("two voxels one step apart measure one spacing unit") {
  std::vector<std::uint8_t> a(27, 0), b(27, 0);
  a[13] = 1;  // (1,1,1)
  b[14] = 1;  // (1,1,2): one step along w
  auto r = metrics::hd95(a, b, 3, 3, 3, {1.5f, 1.5f, 1.5f}, 1);
  REQUIRE(r.has_value());
  CHECK(*r == doctest::Approx(1.5));

  std::vector<std::uint8_t> c(27, 0);
  c[16] = 1;  // (1,2,1): one step along h
  auto rh = metrics::hd95(a, c, 3, 3, 3, {1.0f, 2.0f, 1.0f}, 1);
  REQUIRE(rh.has_value());
  CHECK(*rh == doctest::Approx(2.0));
}

TEST_CASE("either mask empty makes HD95 undefined, not an error") {
  std::vector<std::uint8_t> a(8, 0), b(8, 0);
  a[0] = 1;
  CHECK(!metrics::hd95(a, b, 2, 2, 2, {1.0f, 1.0f, 1.0f}, 1).has_value());
  CHECK(!metrics::hd95(b, a, 2, 2, 2, {1.0f, 1.0f, 1.0f}, 1).has_value());
}

TEST_CASE("HD95 agrees with an all-pairs brute force on random small masks") {
  auto rng = test_rng(5);
  std::array<float, 3> sp{1.5f, 1.0f, 2.0f};
  int checked = 0;
  for (int rep = 0; rep < 120; ++rep) {
    long d = 1 + static_cast<long>(rng() % 6);
    long h = 1 + static_cast<long>(rng() % 6);
    long w = 1 + static_cast<long>(rng() % 6);
    std::vector<std::uint8_t> a(static_cast<size_t>(d * h * w)), b(a.size());
    for (auto& v : a) v = rng() % 3 == 0 ? 1 : 0;
    for (auto& v : b) v = rng() % 3 == 0 ? 1 : 0;
    auto got = metrics::hd95(a, b, d, h, w, sp, 1);
    auto sa = surface_of(a, d, h, w, 1), sb = surface_of(b, d, h, w, 1);
    if (sa.empty() || sb.empty()) {
      CHECK(!got.has_value());
      continue;
    }
    REQUIRE(got.has_value());
    double want = std::max(directed95_brute(sa, sb, sp), directed95_brute(sb, sa, sp));
    CHECK(*got == doctest::Approx(want).epsilon(1e-6));
    ++checked;
  }
  CHECK(checked > 40);  // the loop must exercise real comparisons
}

// ---- learning-rate schedule ----------------------------------------------------------

TEST_CASE("warmup-cosine schedule hits its pinned anchor points") {
  optim::TrainConfig cfg;
  cfg.base_lr = 2e-4f;
  cfg.warmup_steps = 50;
  cfg.total_steps = 1050;
  CHECK(optim::lr_at(cfg, 0) == 0.0f);
  CHECK(optim::lr_at(cfg, 50) == doctest::Approx(2e-4f));
  CHECK(optim::lr_at(cfg, 1050) == doctest::Approx(0.0f).epsilon(1e-9));
  // Cosine midpoint: halfway through the decay span.
  CHECK(optim::lr_at(cfg, 550) == doctest::Approx(1e-4f).epsilon(1e-5));

  CHECK_THROWS_AS(optim::lr_at(cfg, -1), ParameterError);
  CHECK_THROWS_AS(optim::lr_at(cfg, 1051), ParameterError);
  cfg.warmup_steps = cfg.total_steps;
  CHECK_THROWS_AS(optim::lr_at(cfg, 10), ParameterError);
}

// ---- gradient clipping -----------------------------------------------------------------

TEST_CASE("clipping rescales to the max norm and reports the original") {
  Tensor a = Tensor::zeros({3}, true);
  Tensor b = Tensor::zeros({2}, true);
  a.ensure_grad();
  b.ensure_grad();
  a.grad_data()[0] = 3.0f;
  b.grad_data()[1] = 4.0f;  // global norm 5
  double pre = optim::clip_global_norm({a, b}, 1.0f);
  CHECK(pre == doctest::Approx(5.0));
  double post = std::sqrt(a.grad_data()[0] * a.grad_data()[0] + b.grad_data()[1] * b.grad_data()[1]);
  CHECK(post == doctest::Approx(1.0).epsilon(1e-6));

  // Under the threshold nothing moves.
  a.grad_data()[0] = 0.3f;
  b.grad_data()[1] = 0.4f;
  pre = optim::clip_global_norm({a, b}, 1.0f);
  CHECK(pre == doctest::Approx(0.5));
  CHECK(a.grad_data()[0] == doctest::Approx(0.3f));
}

// ---- AdamW ------------------------------------------------------------------------------

TEST_CASE("one AdamW step reproduces the closed-form update") {
  Tensor w = Tensor::from({2}, {1.0f, -2.0f}, true);
  w.ensure_grad();
  w.grad_data()[0] = 0.5f;
  w.grad_data()[1] = -1.5f;
  float lr = 0.1f, wd = 0.01f;
  optim::AdamW opt({w}, wd);
  opt.step(lr);

  auto expect = [&](float w0, float g) {
    float m = 0.1f * g, v = 0.001f * g * g;
    float mhat = m / (1.0f - 0.9f), vhat = v / (1.0f - 0.999f);
    return w0 - lr * (mhat / (std::sqrt(vhat) + 1e-8f) + wd * w0);
  };
  CHECK(w.at(0) == doctest::Approx(expect(1.0f, 0.5f)).epsilon(1e-6));
  CHECK(w.at(1) == doctest::Approx(expect(-2.0f, -1.5f)).epsilon(1e-6));
}

TEST_CASE("weight decay is decoupled: zero gradient still shrinks weights") {
  Tensor w = Tensor::from({1}, {2.0f}, true);
  w.ensure_grad();
  optim::AdamW opt({w}, 0.1f);
  opt.step(0.5f);
  CHECK(w.at(0) == doctest::Approx(2.0f - 0.5f * 0.1f * 2.0f));
}

TEST_CASE("trainable_params yields exactly the requires_grad subset in order") {
  nn::ParamRegistry reg;
  std::mt19937_64 rng(1);
  reg.add("a", Tensor::uniform({2}, 1.0f, rng, true));
  reg.add("b", Tensor::uniform({2}, 1.0f, rng, false));
  reg.add("c", Tensor::uniform({2}, 1.0f, rng, true));
  auto tp = optim::trainable_params(reg);
  REQUIRE(tp.size() == 2);
  CHECK(tp[0].impl() == reg.find("a").impl());
  CHECK(tp[1].impl() == reg.find("c").impl());
}

// ---- training loop pieces ----------------------------------------------------------------

namespace {
models::ModelConfig overfit_cfg() {
  models::ModelConfig cfg;
  cfg.kind = models::ModelKind::adapter_conv;
  cfg.img = 24;
  cfg.in_d = 6;
  cfg.patch = 8;
  cfg.d_enc = 64;
  cfg.enc_blocks = 2;
  cfg.enc_heads = 4;
  cfg.seed = 99;
  return cfg;
}

std::vector<train::Sample> tiny_samples(long n) {
  data::PhantomSpec spec = data::scaled_spec(6, 24, 24);
  std::vector<data::LabeledVolume> vols;
  for (long i = 0; i < n; ++i) {
    auto v = data::generate_phantom(spec, 200 + static_cast<unsigned>(i));
    v.image = data::normalize_percentile(v.image);
    vols.push_back(std::move(v));
  }
  return train::to_samples(vols, false);
}
}  // namespace

TEST_CASE("to_samples slices volumes and can drop background-only slices") {
  data::PhantomSpec spec = data::scaled_spec(8, 32, 32);
  auto v = data::generate_phantom(spec, 77);
  std::vector<data::LabeledVolume> vols{v};

  auto whole = train::to_samples(vols, false);
  REQUIRE(whole.size() == 1);
  CHECK(whole[0].input.dim(1) == 8);

  auto all_slices = train::to_samples(vols, true, false);
  CHECK(all_slices.size() == 8);
  for (const auto& s : all_slices) {
    CHECK(s.input.dim(1) == 1);
    CHECK(s.input.dim(2) == 32);
    CHECK(s.labels.size() == 32 * 32);
  }

  auto fg_slices = train::to_samples(vols, true, true);
  CHECK(fg_slices.size() <= all_slices.size());
  for (const auto& s : fg_slices) {
    bool fg = false;
    for (auto l : s.labels) fg = fg || l != 0;
    CHECK(fg);
  }
}

TEST_CASE("repeated steps on one fixed batch crush the loss") {
  models::Model m = models::make_model(overfit_cfg());
  models::freeze_encoder(m);
  auto set = tiny_samples(1);

  optim::TrainConfig cfg;
  cfg.base_lr = 5e-3f;
  cfg.warmup_steps = 5;
  cfg.total_steps = 400;  // steps stay on the high-lr side of the cosine
  optim::AdamW opt(optim::trainable_params(m.params), cfg.weight_decay);
  double first = 0.0, last = 0.0;
  for (long s = 0; s < 150; ++s) {
    auto r = train::train_step(m, set, {0}, opt, cfg, s);
    if (s == 0) {
      first = r.loss;
      CHECK(r.lr == doctest::Approx(cfg.base_lr / 5.0f));  // one warmup step in
    }
    last = r.loss;
  }
  CHECK(last < 0.2 * first);
  CHECK(models::check_frozen(m).ok);
}

TEST_CASE("the reported gradient norm is pre-clip and the stored one post-clip") {
  models::Model m = models::make_model(overfit_cfg());
  models::freeze_encoder(m);
  auto set = tiny_samples(1);
  optim::TrainConfig cfg;
  cfg.clip_norm = 1e-3f;  // force clipping
  optim::AdamW opt(optim::trainable_params(m.params), cfg.weight_decay);
  auto r = train::train_step(m, set, {0}, opt, cfg, 0);
  CHECK(r.grad_norm > 1e-3);
  double post = 0.0;
  for (const auto& p : opt.params())
    if (p.has_grad())
      for (long i = 0; i < p.numel(); ++i)
        post += static_cast<double>(p.grad_data()[i]) * static_cast<double>(p.grad_data()[i]);
  CHECK(std::sqrt(post) <= 1e-3 * (1.0 + 1e-6));
}

TEST_CASE("a poisoned weight aborts the step with NumericError") {
  models::Model m = models::make_model(overfit_cfg());
  models::freeze_encoder(m);
  Tensor w = m.params.find("dec.head.w");
  w.data()[0] = std::numeric_limits<float>::quiet_NaN();
  auto set = tiny_samples(1);
  optim::TrainConfig cfg;
  optim::AdamW opt(optim::trainable_params(m.params), cfg.weight_decay);
  CHECK_THROWS_AS(train::train_step(m, set, {0}, opt, cfg, 0), NumericError);
}

TEST_CASE("evaluate produces a well-formed report and CSV") {
  models::Model m = models::make_model(overfit_cfg());
  data::PhantomSpec spec = data::scaled_spec(6, 24, 24);
  std::vector<data::LabeledVolume> vols;
  for (unsigned s = 0; s < 2; ++s) {
    auto v = data::generate_phantom(spec, 300 + s);
    v.image = data::normalize_percentile(v.image);
    vols.push_back(std::move(v));
  }
  train::EvalReport rep = train::evaluate(m, vols);
  REQUIRE(rep.per_class.size() == 3);
  for (const auto& c : rep.per_class) {
    CHECK(c.dice >= 0.0);
    CHECK(c.dice <= 1.0);
    CHECK(c.iou <= c.dice + 1e-12);
  }
  CHECK(rep.mean_dice >= 0.0);

  std::string csv = train::eval_csv(rep);
  CHECK(csv.rfind("class,dice,iou,hd95_mm\n", 0) == 0);
  CHECK(csv.find("mean,") != std::string::npos);
}

TEST_CASE("run_training executes the epoch layout and saves a checkpoint") {
  std::string ckpt =
      (std::filesystem::temp_directory_path() / "mambaseg_test_run.ckpt").string();
  models::Model m = models::make_model(overfit_cfg());
  models::freeze_encoder(m);
  auto set = tiny_samples(4);

  data::PhantomSpec spec = data::scaled_spec(6, 24, 24);
  std::vector<data::LabeledVolume> evals;
  auto ev = data::generate_phantom(spec, 400);
  ev.image = data::normalize_percentile(ev.image);
  evals.push_back(std::move(ev));

  optim::TrainConfig cfg;
  cfg.batch = 2;
  cfg.base_lr = 1e-3f;
  cfg.warmup_steps = 2;
  train::TrainStats st = train::run_training(m, set, evals, cfg, /*epochs=*/2, /*eval_every=*/1,
                                             ckpt, nullptr);
  CHECK(st.steps == 4);  // ceil(4/2) per epoch * 2 epochs
  CHECK(st.best_epoch >= 0);
  CHECK(std::filesystem::exists(ckpt));

  // The checkpoint must load back into a fresh model of the same config.
  models::Model m2 = models::make_model(overfit_cfg());
  models::load_checkpoint(m2, ckpt);
  std::remove(ckpt.c_str());
}
