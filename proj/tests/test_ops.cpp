#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mambaseg/ops.hpp"
#include "mambaseg/tensor.hpp"
#include "testutil.hpp"

using namespace mambaseg;
using testutil::grad_check;
using testutil::test_rng;

namespace {
Tensor randt(Shape s, std::mt19937_64& rng, float bound = 1.0f, bool rg = true) {
  return Tensor::uniform(std::move(s), bound, rng, rg);
}
}  // namespace

// ---- pinned forward values ---------------------------------------------------

TEST_CASE("matmul on a hand-computed product") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 1}, {1, 1});
  Tensor c = ops::matmul(a, b);
  CHECK(c.at(0) == doctest::Approx(3.0f));
  CHECK(c.at(1) == doctest::Approx(7.0f));
  CHECK_THROWS_AS(ops::matmul(a, Tensor::zeros({3, 1})), DimensionError);
}

TEST_CASE("softmax recovers exact rational probabilities") {
  Tensor x = Tensor::from({1, 2}, {std::log(2.0f), 0.0f});
  Tensor y = ops::softmax_lastdim(x);
  CHECK(y.at(0) == doctest::Approx(2.0f / 3.0f).epsilon(1e-6));
  CHECK(y.at(1) == doctest::Approx(1.0f / 3.0f).epsilon(1e-6));
}

TEST_CASE("cross entropy of uniform logits is log(num classes)") {
  Tensor logits = Tensor::zeros({5, 4});
  Tensor loss = ops::cross_entropy(logits, {0, 1, 2, 3, 0});
  CHECK(loss.at(0) == doctest::Approx(std::log(4.0f)).epsilon(1e-6));
}

TEST_CASE("soft dice on a constructed half-overlap") {
  // Ground truth marks rows 0..3, prediction marks rows 2..5: the classic
  // |P|=|G|=4, |P^G|=2 configuration whose Dice coefficient is 0.5.
  Tensor probs = Tensor::zeros({8, 2});
  std::vector<int> labels(8, 0);
  for (int i = 0; i < 4; ++i) labels[static_cast<size_t>(i)] = 1;
  for (long i = 0; i < 8; ++i) {
    bool pred_fg = i >= 2 && i < 6;
    probs.data()[i * 2 + 0] = pred_fg ? 0.0f : 1.0f;
    probs.data()[i * 2 + 1] = pred_fg ? 1.0f : 0.0f;
  }
  Tensor loss = ops::soft_dice(probs, labels);
  CHECK(loss.at(0) == doctest::Approx(0.5f).epsilon(1e-4));
}

TEST_CASE("3x3x3 box filter counts full neighborhoods in the interior") {
  Tensor x = Tensor::full({1, 5, 5, 5}, 1.0f);
  Tensor w = Tensor::full({1, 27}, 1.0f);
  ops::Conv3dGeom g;
  g.pad[0] = g.pad[1] = g.pad[2] = 1;
  Tensor y = ops::conv3d(x, w, Tensor(), 3, 3, 3, g);
  CHECK(y.shape() == Shape{1, 5, 5, 5});
  auto at = [&](long d, long h, long ww) { return y.at((d * 5 + h) * 5 + ww); };
  CHECK(at(2, 2, 2) == doctest::Approx(27.0f));  // full neighborhood
  CHECK(at(0, 0, 0) == doctest::Approx(8.0f));   // corner sees a 2x2x2 block
  CHECK(at(0, 2, 2) == doctest::Approx(18.0f));  // face
}

TEST_CASE("conv_transpose3d output extent is (n-1)*s + k") {
  auto rng = test_rng(3);
  Tensor x = randt({2, 3, 4, 5}, rng, 1.0f, false);
  Tensor w = randt({2, 3 * 2 * 2 * 2}, rng, 1.0f, false);
  Tensor y = ops::conv_transpose3d(x, w, Tensor(), 3, 2, 2, 2, 2, 2, 2);
  CHECK(y.shape() == Shape{3, 6, 8, 10});
}

TEST_CASE("conv_transpose3d is the adjoint of conv3d") {
  // <conv(x), y> must equal <x, convT(y)> with the shared weight matrix.
  auto rng = test_rng(4);
  long k = 2, s = 2;
  Tensor big = randt({3, 4, 4, 6}, rng, 1.0f, false);
  Tensor w = randt({2, 3 * k * k * k}, rng, 1.0f, false);
  ops::Conv3dGeom g;
  g.stride[0] = g.stride[1] = g.stride[2] = s;
  Tensor down = ops::conv3d(big, w, Tensor(), k, k, k, g);
  auto rng2 = test_rng(5);
  Tensor small = randt(down.shape(), rng2, 1.0f, false);
  Tensor up = ops::conv_transpose3d(small, w, Tensor(), 3, k, k, k, s, s, s);
  CHECK(up.shape() == big.shape());
  double lhs = 0.0, rhs = 0.0;
  for (long i = 0; i < down.numel(); ++i) lhs += static_cast<double>(down.at(i)) * small.at(i);
  for (long i = 0; i < big.numel(); ++i) rhs += static_cast<double>(big.at(i)) * up.at(i);
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-4));
}

TEST_CASE("causal depthwise conv respects sequence boundaries") {
  // Kernel [0, 1] picks the previous element; the first step of every
  // sequence has no history and must read zero.
  Tensor x = Tensor::from({4, 1}, {1, 2, 3, 4});
  Tensor w = Tensor::from({1, 2}, {1, 0});  // w[k=0] hits t-1, w[k=1] hits t
  Tensor y = ops::conv1d_depthwise_causal(x, w, Tensor(), 2);
  CHECK(y.at(0) == doctest::Approx(0.0f));  // seq 0 start
  CHECK(y.at(1) == doctest::Approx(1.0f));
  CHECK(y.at(2) == doctest::Approx(0.0f));  // seq 1 start: no leak from row 1
  CHECK(y.at(3) == doctest::Approx(3.0f));
}

TEST_CASE("patchify3d gathers channel-major patches in grid order") {
  // 1 channel, 1x2x4 volume, patch 1x1x2 -> 4 tokens of 2 values.
  Tensor x = Tensor::from({1, 1, 2, 4}, {0, 1, 2, 3, 4, 5, 6, 7});
  Tensor t = ops::patchify3d(x, 1, 1, 2);
  CHECK(t.shape() == Shape{4, 2});
  CHECK(t.at(0) == 0.0f);
  CHECK(t.at(1) == 1.0f);
  CHECK(t.at(2) == 2.0f);
  CHECK(t.at(5) == 5.0f);
}

TEST_CASE("column statistics over rows") {
  Tensor t = Tensor::from({2, 1}, {1, 3});
  CHECK(ops::mean_rows(t).at(0) == doctest::Approx(2.0f));
  CHECK(ops::max_rows(t).at(0) == doctest::Approx(3.0f));
  CHECK(ops::min_rows(t).at(0) == doctest::Approx(1.0f));
}

// ---- DCT ---------------------------------------------------------------------

TEST_CASE("cosine basis factor at a hand-evaluated point") {
  // n=2, frequency 1, sample 1: cos(pi/2 * 1.5) = -sqrt(2)/2.
  CHECK(ops::dct_basis(2, 1, 1, /*raw=*/true) ==
        doctest::Approx(-std::sqrt(2.0f) / 2.0f).epsilon(1e-6));
  CHECK(ops::dct_basis(4, 0, 2) == doctest::Approx(std::sqrt(0.25f)));
}

TEST_CASE("1D basis rows are orthonormal") {
  for (long n : {2L, 3L, 8L}) {
    for (long k1 = 0; k1 < n; ++k1)
      for (long k2 = 0; k2 < n; ++k2) {
        double dot = 0.0;
        for (long i = 0; i < n; ++i)
          dot += static_cast<double>(ops::dct_basis(n, k1, i)) * ops::dct_basis(n, k2, i);
        CHECK(dot == doctest::Approx(k1 == k2 ? 1.0 : 0.0).epsilon(1e-6));
      }
  }
}

TEST_CASE("dct3/idct3 roundtrip and energy preservation") {
  auto rng = test_rng(11);
  long d = 3, h = 4, w = 5, c = 2;
  Tensor x = randt({d * h * w, c}, rng, 1.0f, false);
  Tensor f = ops::dct3(x, d, h, w);
  Tensor back = ops::idct3(f, d, h, w);
  CHECK(testutil::max_abs_diff(x, back) < 1e-5f);
  double ex = 0.0, ef = 0.0;
  for (long i = 0; i < x.numel(); ++i) {
    ex += static_cast<double>(x.at(i)) * x.at(i);
    ef += static_cast<double>(f.at(i)) * f.at(i);
  }
  CHECK(ex == doctest::Approx(ef).epsilon(1e-5));  // Parseval
}

TEST_CASE("constant volume concentrates in the DC coefficient") {
  long d = 2, h = 2, w = 2;
  Tensor x = Tensor::full({d * h * w, 1}, 1.0f);
  Tensor f = ops::dct3(x, d, h, w);
  // DC = sqrt(1/2)^3 summed over 8 ones = 8/(2*sqrt(2)) = 2*sqrt(2).
  CHECK(f.at(0) == doctest::Approx(2.0f * std::sqrt(2.0f)).epsilon(1e-6));
  for (long i = 1; i < 8; ++i) CHECK(std::abs(f.at(i)) < 1e-6f);
}

// ---- selective scan ------------------------------------------------------------

namespace {
// Naive double-precision reference of the same recurrence.
std::vector<double> scan_reference(const Tensor& u, const Tensor& delta, const Tensor& bsel,
                                   const Tensor& csel, const Tensor& a,
                                   ops::Discretization method, long seq_len) {
  long t = u.dim(0), c = u.dim(1), n = a.dim(1);
  std::vector<double> h(static_cast<size_t>(c * n), 0.0), y(static_cast<size_t>(t * c), 0.0);
  for (long tt = 0; tt < t; ++tt) {
    if (tt % seq_len == 0) std::fill(h.begin(), h.end(), 0.0);
    for (long cc = 0; cc < c; ++cc) {
      double dt = delta.at(tt * c + cc);
      double uv = u.at(tt * c + cc);
      double acc = 0.0;
      for (long nn = 0; nn < n; ++nn) {
        double av = a.at(cc * n + nn);
        double z = dt * av, abar, beta;
        if (method == ops::Discretization::zoh) {
          abar = std::exp(z);
          double phi = std::abs(z) < 1e-12 ? 1.0 : (abar - 1.0) / z;
          beta = dt * phi;
        } else {
          double q = 1.0 - z / 2.0;
          abar = (1.0 + z / 2.0) / q;
          beta = dt / q;
        }
        double& hv = h[static_cast<size_t>(cc * n + nn)];
        hv = abar * hv + beta * bsel.at(tt * n + nn) * uv;
        acc += csel.at(tt * n + nn) * hv;
      }
      y[static_cast<size_t>(tt * c + cc)] = acc;
    }
  }
  return y;
}
}  // namespace

TEST_CASE("single-step scan reproduces closed-form discretizations") {
  // One step, one state: y = beta(delta, a) with B=C=1, u=1.
  Tensor u = Tensor::from({1, 1}, {1.0f});
  Tensor delta = Tensor::from({1, 1}, {0.1f});
  Tensor b = Tensor::from({1, 1}, {1.0f});
  Tensor c = Tensor::from({1, 1}, {1.0f});
  Tensor a = Tensor::from({1, 1}, {-1.0f});
  Tensor yz = ops::selective_scan(u, delta, b, c, a, ops::Discretization::zoh, 1);
  CHECK(yz.at(0) == doctest::Approx(1.0f - std::exp(-0.1f)).epsilon(1e-6));
  Tensor yb = ops::selective_scan(u, delta, b, c, a, ops::Discretization::bilinear, 1);
  CHECK(yb.at(0) == doctest::Approx(0.1f / 1.05f).epsilon(1e-6));
}

TEST_CASE("selective scan matches a double-precision reference") {
  auto rng = test_rng(21);
  long t = 24, c = 3, n = 4, seq_len = 8;
  Tensor u = randt({t, c}, rng, 1.0f, false);
  Tensor delta = Tensor::uniform({t, c}, 0.0f, rng, false);
  for (long i = 0; i < delta.numel(); ++i)
    delta.data()[i] = 0.05f + 0.2f * std::abs(u.at(i));  // positive steps
  Tensor b = randt({t, n}, rng, 1.0f, false);
  Tensor cs = randt({t, n}, rng, 1.0f, false);
  Tensor a = Tensor::zeros({c, n});
  for (long i = 0; i < a.numel(); ++i) a.data()[i] = -0.2f - 0.3f * static_cast<float>(i % n);
  for (auto method : {ops::Discretization::zoh, ops::Discretization::bilinear}) {
    Tensor y = ops::selective_scan(u, delta, b, cs, a, method, seq_len);
    auto ref = scan_reference(u, delta, b, cs, a, method, seq_len);
    for (long i = 0; i < y.numel(); ++i)
      CHECK(y.at(i) == doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(2e-4));
  }
}

TEST_CASE("state resets at sequence boundaries") {
  auto rng = test_rng(22);
  long t = 6, c = 2, n = 3;
  Tensor u = randt({t, c}, rng, 1.0f, false);
  Tensor delta = Tensor::full({t, c}, 0.1f);
  Tensor b = randt({t, n}, rng, 1.0f, false);
  Tensor cs = randt({t, n}, rng, 1.0f, false);
  Tensor a = Tensor::uniform({c, n}, 0.5f, rng, false);
  for (long i = 0; i < a.numel(); ++i) a.data()[i] = -std::abs(a.at(i)) - 0.1f;
  // Duplicate the first sequence into the second slot.
  for (long i = 0; i < 3 * c; ++i) u.data()[3 * c + i] = u.at(i);
  for (long i = 0; i < 3 * n; ++i) {
    b.data()[3 * n + i] = b.at(i);
    cs.data()[3 * n + i] = cs.at(i);
  }
  Tensor y = ops::selective_scan(u, delta, b, cs, a, ops::Discretization::zoh, 3);
  for (long i = 0; i < 3 * c; ++i)
    CHECK(y.at(i) == doctest::Approx(y.at(3 * c + i)).epsilon(1e-6));
}

// ---- gradient checks ------------------------------------------------------------

TEST_CASE("gradients: elementwise and activations") {
  auto rng = test_rng(31);
  Tensor x = randt({3, 4}, rng);
  Tensor y = randt({3, 4}, rng);
  CHECK(grad_check({x, y}, [&] { return ops::sum_all(ops::mul(ops::add(x, y), ops::sub(x, y))); },
                   1e-2f) < 1e-3f);
  CHECK(grad_check({x}, [&] { return ops::sum_all(ops::gelu(x)); }, 1e-2f) < 1e-3f);
  CHECK(grad_check({x}, [&] { return ops::sum_all(ops::silu(x)); }, 1e-2f) < 1e-3f);
  CHECK(grad_check({x}, [&] { return ops::sum_all(ops::sigmoid(x)); }, 1e-2f) < 1e-3f);
  CHECK(grad_check({x}, [&] { return ops::sum_all(ops::softplus(x)); }, 1e-2f) < 1e-3f);
  CHECK(grad_check({x}, [&] { return ops::mean_all(ops::mul(x, x)); }, 1e-2f) < 1e-3f);
}

TEST_CASE("gradients: relu away from the kink") {
  Tensor x = Tensor::from({4}, {-2.0f, -0.5f, 0.5f, 2.0f}, true);
  CHECK(grad_check({x}, [&] { return ops::sum_all(ops::mul(ops::relu(x), x)); }, 1e-3f) < 1e-3f);
}

TEST_CASE("gradients: broadcast helpers") {
  auto rng = test_rng(32);
  Tensor x = randt({3, 4}, rng);
  Tensor v = randt({4}, rng);
  CHECK(grad_check({x, v}, [&] { return ops::sum_all(ops::mul(ops::add_rowvec(x, v), x)); },
                   1e-2f) < 1e-3f);
  CHECK(grad_check({x, v}, [&] { return ops::sum_all(ops::mul(ops::mul_rowvec(x, v), x)); },
                   1e-2f) < 1e-3f);
}

TEST_CASE("gradients: matmul family") {
  auto rng = test_rng(33);
  Tensor a = randt({3, 4}, rng);
  Tensor b = randt({4, 2}, rng);
  Tensor c = randt({5, 4}, rng);
  CHECK(grad_check({a, b}, [&] { return ops::sum_all(ops::mul(ops::matmul(a, b), ops::matmul(a, b))); },
                   1e-2f) < 1e-3f);
  CHECK(grad_check({a, c}, [&] { return ops::sum_all(ops::mul(ops::matmul_nt(a, c), ops::matmul_nt(a, c))); },
                   1e-2f) < 1e-3f);
  CHECK(grad_check({a}, [&] { return ops::sum_all(ops::mul(ops::transpose(a), ops::transpose(a))); },
                   1e-2f) < 1e-3f);
}

TEST_CASE("gradients: reductions and shape ops") {
  auto rng = test_rng(34);
  Tensor x = randt({4, 3}, rng);
  CHECK(grad_check({x}, [&] { return ops::sum_all(ops::mul(ops::mean_rows(x), ops::mean_rows(x))); },
                   1e-2f) < 1e-3f);
  CHECK(grad_check({x}, [&] { return ops::sum_all(ops::mul(ops::max_rows(x), ops::max_rows(x))); },
                   1e-3f) < 1e-3f);
  CHECK(grad_check({x}, [&] { return ops::sum_all(ops::mul(ops::min_rows(x), ops::min_rows(x))); },
                   1e-3f) < 1e-3f);
  std::vector<long> idx{2, 0, 1, 2};
  CHECK(grad_check({x}, [&] {
          Tensor s = ops::select_rows(x, idx);
          return ops::sum_all(ops::mul(s, s));
        }, 1e-2f) < 1e-3f);
  std::vector<long> sc{3, 1, 0, 5};
  CHECK(grad_check({x}, [&] {
          Tensor s = ops::scatter_rows(x, sc, 6);
          return ops::sum_all(ops::mul(s, s));
        }, 1e-2f) < 1e-3f);
  CHECK(grad_check({x}, [&] {
          Tensor s = ops::concat_cols({ops::slice_cols(x, 1, 3), ops::slice_cols(x, 0, 1)});
          Tensor r = ops::concat_rows({ops::slice_rows(s, 2, 4), ops::slice_rows(s, 0, 2)});
          Tensor q = ops::reshape(r, {3, 4});
          return ops::sum_all(ops::mul(q, q));
        }, 1e-2f) < 1e-3f);
}

TEST_CASE("gradients: softmax, layer norm, losses") {
  auto rng = test_rng(35);
  Tensor x = randt({3, 5}, rng);
  CHECK(grad_check({x}, [&] {
          Tensor p = ops::softmax_lastdim(x);
          return ops::sum_all(ops::mul(p, x));
        }, 1e-2f) < 1e-3f);
  Tensor gamma = randt({5}, rng), beta = randt({5}, rng);
  CHECK(grad_check({x, gamma, beta}, [&] {
          Tensor y = ops::layer_norm(x, gamma, beta);
          return ops::sum_all(ops::mul(y, y));
        }, 1e-2f) < 2e-3f);
  std::vector<int> labels{0, 3, 2};
  CHECK(grad_check({x}, [&] { return ops::cross_entropy(x, labels); }, 1e-2f) < 1e-3f);
  CHECK(grad_check({x}, [&] {
          return ops::soft_dice(ops::softmax_lastdim(x), labels, 1e-2f);
        }, 1e-2f) < 1e-3f);
}

TEST_CASE("gradients: convolution ops") {
  auto rng = test_rng(36);
  Tensor x = randt({2, 3, 4, 4}, rng, 0.5f);
  Tensor w = randt({3, 2 * 2 * 2 * 2}, rng, 0.5f);
  Tensor bias = randt({3}, rng, 0.5f);
  ops::Conv3dGeom g;
  g.stride[1] = 2;
  g.pad[0] = 1;
  CHECK(grad_check({x, w, bias}, [&] {
          Tensor y = ops::conv3d(x, w, bias, 2, 2, 2, g);
          return ops::sum_all(ops::mul(y, y));
        }, 1e-2f) < 1e-3f);

  Tensor xt = randt({2, 2, 3, 3}, rng, 0.5f);
  Tensor wt = randt({2, 3 * 2 * 2 * 2}, rng, 0.5f);
  Tensor bt = randt({3}, rng, 0.5f);
  CHECK(grad_check({xt, wt, bt}, [&] {
          Tensor y = ops::conv_transpose3d(xt, wt, bt, 3, 2, 2, 2, 2, 2, 2);
          return ops::sum_all(ops::mul(y, y));
        }, 1e-2f) < 1e-3f);

  Tensor xd = randt({2, 3, 4, 4}, rng, 0.5f);
  Tensor wd = randt({2, 27}, rng, 0.5f);
  CHECK(grad_check({xd, wd}, [&] {
          Tensor y = ops::conv3d_depthwise(xd, wd, 1);
          return ops::sum_all(ops::mul(y, y));
        }, 1e-2f) < 1e-3f);
  CHECK(grad_check({xd, wd}, [&] {
          Tensor y = ops::conv3d_depthwise(xd, wd, 2);
          return ops::sum_all(ops::mul(y, y));
        }, 1e-2f) < 1e-3f);

  Tensor xc = randt({6, 3}, rng, 0.5f);
  Tensor wc = randt({3, 4}, rng, 0.5f);
  Tensor bc = randt({3}, rng, 0.5f);
  CHECK(grad_check({xc, wc, bc}, [&] {
          Tensor y = ops::conv1d_depthwise_causal(xc, wc, bc, 3);
          return ops::sum_all(ops::mul(y, y));
        }, 1e-2f) < 1e-3f);

  Tensor xp = randt({2, 2, 4, 4}, rng, 0.5f);
  CHECK(grad_check({xp}, [&] {
          Tensor y = ops::patchify3d(xp, 1, 2, 2);
          return ops::sum_all(ops::mul(y, y));
        }, 1e-2f) < 1e-3f);
}

TEST_CASE("gradients: DCT pair") {
  auto rng = test_rng(37);
  Tensor x = randt({2 * 3 * 2, 2}, rng, 0.5f);
  CHECK(grad_check({x}, [&] {
          Tensor f = ops::dct3(x, 2, 3, 2);
          return ops::sum_all(ops::mul(f, f));
        }, 1e-2f) < 1e-3f);
  CHECK(grad_check({x}, [&] {
          Tensor f = ops::idct3(x, 2, 3, 2);
          return ops::sum_all(ops::mul(f, f));
        }, 1e-2f) < 1e-3f);
}

TEST_CASE("gradients: selective scan, both discretizations") {
  auto rng = test_rng(38);
  long t = 6, c = 2, n = 3;
  Tensor u = randt({t, c}, rng, 0.8f);
  Tensor delta = Tensor::zeros({t, c}, true);
  for (long i = 0; i < delta.numel(); ++i)
    delta.data()[i] = 0.1f + 0.05f * static_cast<float>(i % 5);
  Tensor b = randt({t, n}, rng, 0.8f);
  Tensor cs = randt({t, n}, rng, 0.8f);
  Tensor a = Tensor::zeros({c, n}, true);
  for (long i = 0; i < a.numel(); ++i) a.data()[i] = -0.3f - 0.2f * static_cast<float>(i % n);
  for (auto method : {ops::Discretization::zoh, ops::Discretization::bilinear}) {
    float err = grad_check({u, delta, b, cs, a}, [&] {
      Tensor y = ops::selective_scan(u, delta, b, cs, a, method, 3);
      return ops::sum_all(ops::mul(y, y));
    }, 1e-2f);
    CHECK(err < 1e-3f);
  }
}

TEST_CASE("selective scan rejects inconsistent arguments") {
  Tensor u = Tensor::zeros({4, 2});
  Tensor d = Tensor::zeros({4, 2});
  Tensor b = Tensor::zeros({4, 3});
  Tensor c = Tensor::zeros({4, 3});
  Tensor a = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(ops::selective_scan(u, d, b, c, a, ops::Discretization::zoh, 3),
                  DimensionError);  // 4 % 3 != 0
  CHECK_THROWS_AS(ops::selective_scan(u, d, b, c, Tensor::zeros({3, 3}),
                                      ops::Discretization::zoh, 2),
                  DimensionError);  // A rows != channels
}
