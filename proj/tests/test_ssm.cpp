#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mambaseg/ops.hpp"
#include "mambaseg/ssm.hpp"
#include "testutil.hpp"

using namespace mambaseg;
using testutil::test_rng;

// ---- discretization on closed-form scalar cases --------------------------------

TEST_CASE("bilinear discretization of the zero matrix is the identity") {
  Eigen::MatrixXf a = Eigen::MatrixXf::Zero(3, 3);
  Eigen::VectorXf b = Eigen::VectorXf::Ones(3);
  ssm::Discrete d = ssm::discretize(a, b, 0.1f, ops::Discretization::bilinear);
  CHECK((d.abar - Eigen::MatrixXf::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-6f);
  CHECK((d.bbar - 0.1f * b).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("scalar a=-1, delta=0.1 matches closed forms for both methods") {
  Eigen::MatrixXf a(1, 1);
  a << -1.0f;
  Eigen::VectorXf b(1);
  b << 1.0f;

  ssm::Discrete bil = ssm::discretize(a, b, 0.1f, ops::Discretization::bilinear);
  CHECK(bil.abar(0, 0) == doctest::Approx(0.95f / 1.05f).epsilon(1e-5));

  ssm::Discrete zoh = ssm::discretize(a, b, 0.1f, ops::Discretization::zoh);
  CHECK(zoh.abar(0, 0) == doctest::Approx(std::exp(-0.1f)).epsilon(1e-5));
  // exact ZOH input matrix: (e^{a delta} - 1)/a * b
  CHECK(zoh.bbar(0) == doctest::Approx((std::exp(-0.1f) - 1.0f) / -1.0f).epsilon(1e-5));
}

// ---- sequential scan oracles -----------------------------------------------------

TEST_CASE("hand recurrence abar=0.5: y = [1, 1.5, 1.75]") {
  ssm::Discrete d;
  d.abar = Eigen::MatrixXf::Constant(1, 1, 0.5f);
  d.bbar = Eigen::VectorXf::Ones(1);
  Eigen::RowVectorXf c = Eigen::RowVectorXf::Ones(1);
  Eigen::VectorXf u(3);
  u << 1.0f, 1.0f, 1.0f;
  Eigen::VectorXf y = ssm::scan_sequential(d, c, 0.0f, u);
  CHECK(y(0) == doctest::Approx(1.0f));
  CHECK(y(1) == doctest::Approx(1.5f));
  CHECK(y(2) == doctest::Approx(1.75f));
}

TEST_CASE("abar=0 is memoryless; abar=bbar=1 integrates") {
  ssm::Discrete d;
  d.abar = Eigen::MatrixXf::Zero(1, 1);
  d.bbar = Eigen::VectorXf::Constant(1, 2.0f);
  Eigen::RowVectorXf c = Eigen::RowVectorXf::Constant(1, 3.0f);
  Eigen::VectorXf u(4);
  u << 1.0f, -2.0f, 0.5f, 4.0f;
  Eigen::VectorXf y = ssm::scan_sequential(d, c, 0.0f, u);
  for (long k = 0; k < 4; ++k) CHECK(y(k) == doctest::Approx(6.0f * u(k)));

  d.abar(0, 0) = 1.0f;
  d.bbar(0) = 1.0f;
  c(0) = 1.0f;
  y = ssm::scan_sequential(d, c, 0.0f, u);
  float run = 0.0f;
  for (long k = 0; k < 4; ++k) {
    run += u(k);
    CHECK(y(k) == doctest::Approx(run));
  }
}

TEST_CASE("the d skip adds d*u to every output") {
  ssm::Discrete d;
  d.abar = Eigen::MatrixXf::Zero(2, 2);
  d.bbar = Eigen::VectorXf::Zero(2);
  Eigen::RowVectorXf c = Eigen::RowVectorXf::Ones(2);
  Eigen::VectorXf u(3);
  u << 1.0f, 2.0f, 3.0f;
  Eigen::VectorXf y = ssm::scan_sequential(d, c, 0.5f, u);
  for (long k = 0; k < 3; ++k) CHECK(y(k) == doctest::Approx(0.5f * u(k)));
}

// ---- low-level recurrence: parallel == sequential ---------------------------------

TEST_CASE("parallel recurrence reproduces prefix sums") {
  std::vector<float> a(16, 1.0f), b(16), hs(16), hp(16);
  for (int i = 0; i < 16; ++i) b[static_cast<size_t>(i)] = static_cast<float>(i + 1);
  ssm::recurrence_sequential(a.data(), b.data(), 16, hs.data());
  ssm::recurrence_parallel(a.data(), b.data(), 16, hp.data());
  for (int i = 0; i < 16; ++i) {
    CHECK(hs[static_cast<size_t>(i)] == doctest::Approx((i + 1) * (i + 2) / 2.0f));
    CHECK(hp[static_cast<size_t>(i)] == doctest::Approx(hs[static_cast<size_t>(i)]));
  }
}

TEST_CASE("parallel recurrence equals sequential on random coefficients") {
  auto rng = test_rng(3);
  std::uniform_real_distribution<float> uni(-1.0f, 1.0f);
  for (int rep = 0; rep < 50; ++rep) {
    long t = 1 + static_cast<long>(rng() % 200);
    std::vector<float> a(static_cast<size_t>(t)), b(static_cast<size_t>(t));
    std::vector<float> hs(static_cast<size_t>(t)), hp(static_cast<size_t>(t));
    for (long i = 0; i < t; ++i) {
      a[static_cast<size_t>(i)] = 0.98f * uni(rng);
      b[static_cast<size_t>(i)] = uni(rng);
    }
    ssm::recurrence_sequential(a.data(), b.data(), t, hs.data());
    ssm::recurrence_parallel(a.data(), b.data(), t, hp.data());
    for (long i = 0; i < t; ++i)
      CHECK(std::abs(hs[static_cast<size_t>(i)] - hp[static_cast<size_t>(i)]) < 1e-5f);
  }
}

// ---- selective scan ---------------------------------------------------------------

namespace {
ssm::SelectiveInputs random_inputs(long t, long c, long n, std::mt19937_64& rng,
                                   ops::Discretization method) {
  std::uniform_real_distribution<float> uni(-1.0f, 1.0f);
  ssm::SelectiveInputs in;
  in.u = Eigen::MatrixXf::NullaryExpr(t, c, [&] { return uni(rng); });
  in.delta = Eigen::MatrixXf::NullaryExpr(t, c, [&] { return 0.02f + 0.6f * std::abs(uni(rng)); });
  in.b = Eigen::MatrixXf::NullaryExpr(t, n, [&] { return uni(rng); });
  in.c = Eigen::MatrixXf::NullaryExpr(t, n, [&] { return uni(rng); });
  in.a = Eigen::MatrixXf::NullaryExpr(c, n, [&] { return -0.05f - std::abs(uni(rng)); });
  in.method = method;
  return in;
}
}  // namespace

TEST_CASE("selective scan: L=1 equals one sequential step; zero input gives zero") {
  auto rng = test_rng(4);
  ssm::SelectiveInputs in = random_inputs(1, 3, 4, rng, ops::Discretization::zoh);
  Eigen::MatrixXf seq = ssm::selective_scan_ref(in, false);
  Eigen::MatrixXf par = ssm::selective_scan_ref(in, true);
  CHECK((seq - par).cwiseAbs().maxCoeff() == 0.0f);

  in.u.setZero();
  CHECK(ssm::selective_scan_ref(in, true).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("selective scan with constant parameters degenerates to the fixed scan") {
  auto rng = test_rng(5);
  std::uniform_real_distribution<float> uni(-1.0f, 1.0f);
  long t = 24, n = 3;
  ssm::SelectiveInputs in = random_inputs(t, 1, n, rng, ops::Discretization::zoh);
  // Force every step to share one parameter set.
  for (long k = 1; k < t; ++k) {
    in.delta.row(k) = in.delta.row(0);
    in.b.row(k) = in.b.row(0);
    in.c.row(k) = in.c.row(0);
  }
  Eigen::MatrixXf y = ssm::selective_scan_ref(in, true);

  Eigen::MatrixXf a = in.a.row(0).asDiagonal();
  ssm::Discrete d = ssm::discretize(a, in.b.row(0).transpose(), in.delta(0, 0),
                                    ops::Discretization::zoh);
  Eigen::VectorXf yref = ssm::scan_sequential(d, in.c.row(0), 0.0f, in.u.col(0));
  CHECK((y.col(0) - yref).cwiseAbs().maxCoeff() < 1e-5f);
}

TEST_CASE("parallel equals sequential over many random selective cases") {
  auto rng = test_rng(6);
  float worst = 0.0f;
  for (int rep = 0; rep < 200; ++rep) {
    long t = 1 + static_cast<long>(rng() % 96);
    long c = 1 + static_cast<long>(rng() % 3);
    long n = 1 + static_cast<long>(rng() % 8);
    auto method = rep % 2 == 0 ? ops::Discretization::zoh : ops::Discretization::bilinear;
    ssm::SelectiveInputs in = random_inputs(t, c, n, rng, method);
    Eigen::MatrixXf seq = ssm::selective_scan_ref(in, false);
    Eigen::MatrixXf par = ssm::selective_scan_ref(in, true);
    worst = std::max(worst, (seq - par).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-5f);
}

// ---- differentiable scan wrapper ---------------------------------------------------

TEST_CASE("autodiff selective scan matches the reference forward") {
  auto rng = test_rng(7);
  long t = 12, c = 2, n = 3;
  ssm::SelectiveInputs in = random_inputs(t, c, n, rng, ops::Discretization::zoh);

  auto to_tensor = [](const Eigen::MatrixXf& m) {
    Tensor out = Tensor::zeros({m.rows(), m.cols()});
    out.mat(m.rows(), m.cols()) = m;
    return out;
  };
  Tensor y = ops::selective_scan(to_tensor(in.u), to_tensor(in.delta), to_tensor(in.b),
                                 to_tensor(in.c), to_tensor(in.a), ops::Discretization::zoh, t);
  Eigen::MatrixXf yref = ssm::selective_scan_ref(in, true);
  float worst = 0.0f;
  for (long i = 0; i < t; ++i)
    for (long j = 0; j < c; ++j)
      worst = std::max(worst, std::abs(y.mat(t, c)(i, j) - yref(i, j)));
  CHECK(worst < 1e-5f);
}

TEST_CASE("sequence boundaries reset the scan state") {
  auto rng = test_rng(8);
  long t = 8, c = 1, n = 2;
  ssm::SelectiveInputs in = random_inputs(t, c, n, rng, ops::Discretization::zoh);
  auto to_tensor = [](const Eigen::MatrixXf& m) {
    Tensor out = Tensor::zeros({m.rows(), m.cols()});
    out.mat(m.rows(), m.cols()) = m;
    return out;
  };
  Tensor u = to_tensor(in.u), delta = to_tensor(in.delta), b = to_tensor(in.b),
         cc = to_tensor(in.c), a = to_tensor(in.a);

  // One length-8 sequence vs two independent length-4 halves.
  Tensor whole = ops::selective_scan(u, delta, b, cc, a, ops::Discretization::zoh, 8);
  Tensor halves = ops::selective_scan(u, delta, b, cc, a, ops::Discretization::zoh, 4);

  // First half agrees; the second half must differ because the state restarts
  // (vanishing probability of agreement otherwise).
  float first = 0.0f, second = 0.0f;
  for (long i = 0; i < 4; ++i) first = std::max(first, std::abs(whole.at(i) - halves.at(i)));
  for (long i = 4; i < 8; ++i) second = std::max(second, std::abs(whole.at(i) - halves.at(i)));
  CHECK(first == 0.0f);
  CHECK(second > 1e-7f);

  // And each half equals a fresh scan of just that half.
  auto block = [&](const Eigen::MatrixXf& m, long r0) { return m.middleRows(r0, 4).eval(); };
  Tensor lower = ops::selective_scan(to_tensor(block(in.u, 4)), to_tensor(block(in.delta, 4)),
                                     to_tensor(block(in.b, 4)), to_tensor(block(in.c, 4)), a,
                                     ops::Discretization::zoh, 4);
  for (long i = 0; i < 4; ++i) CHECK(halves.at(4 + i) == doctest::Approx(lower.at(i)));
}

TEST_CASE("selective scan gradients match finite differences") {
  auto rng = test_rng(9);
  long t = 6, c = 2, n = 2;
  std::uniform_real_distribution<float> uni(-0.8f, 0.8f);
  auto rnd = [&](Shape s) {
    Tensor x = Tensor::uniform(std::move(s), 0.8f, rng, true);
    return x;
  };
  Tensor u = rnd({t, c});
  Tensor delta = Tensor::uniform({t, c}, 0.3f, rng, true);
  delta.arr() += 0.45f;  // keep steps positive and away from zero
  delta.set_requires_grad(true);
  Tensor b = rnd({t, n}), cc = rnd({t, n});
  Tensor a = Tensor::uniform({c, n}, 0.5f, rng, true);
  a.arr() = -a.arr().abs() - 0.1f;
  a.set_requires_grad(true);

  for (auto method : {ops::Discretization::zoh, ops::Discretization::bilinear}) {
    float err = testutil::grad_check(
        {u, delta, b, cc, a},
        [&] { return ops::sum_all(ops::selective_scan(u, delta, b, cc, a, method, t)); }, 1e-3f);
    CHECK(err < 1e-3f);
  }
}
