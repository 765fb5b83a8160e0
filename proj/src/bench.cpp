#include "mambaseg/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include "mambaseg/ops.hpp"

namespace mambaseg::bench {

namespace {

constexpr long kNState = 8;

double median_ms(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class F>
double time_ms(F&& fn) {
  auto t0 = std::chrono::steady_clock::now();
  fn();
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

/// Slope of the least-squares fit of log(t) against log(L).
double fit_exponent(const std::vector<long>& ls, const std::vector<double>& ts) {
  double n = static_cast<double>(ls.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t i = 0; i < ls.size(); ++i) {
    double x = std::log(static_cast<double>(ls[i]));
    double y = std::log(std::max(ts[i], 1e-9));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace

BenchReport bench_scaling(const std::vector<long>& lengths, long d_model, long repeats) {
  if (lengths.empty() || d_model <= 0) throw ParameterError("bench: empty lengths or bad width");
  if (repeats < 3) throw ParameterError("bench: need at least 3 repeats for a median");
  if (!std::is_sorted(lengths.begin(), lengths.end()))
    throw ParameterError("bench: lengths must be ascending");

  BenchReport r;
  r.lengths = lengths;
  std::mt19937_64 rng(42);

  for (long l : lengths) {
    Tensor u = Tensor::uniform({l, d_model}, 1.0f, rng);
    Tensor delta = Tensor::uniform({l, d_model}, 0.05f, rng);
    delta.arr() += 0.06f;  // keep step sizes positive
    Tensor bsel = Tensor::uniform({l, kNState}, 1.0f, rng);
    Tensor csel = Tensor::uniform({l, kNState}, 1.0f, rng);
    Tensor a = Tensor::uniform({d_model, kNState}, 1.0f, rng);
    a.arr() = -(a.arr().abs() + 0.1f);

    Tensor q = Tensor::uniform({l, d_model}, 1.0f, rng);
    Tensor k = Tensor::uniform({l, d_model}, 1.0f, rng);
    Tensor v = Tensor::uniform({l, d_model}, 1.0f, rng);
    float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(d_model));

    std::vector<double> scan_times, attn_times;
    volatile float sink = 0.0f;
    for (long rep = 0; rep < repeats; ++rep) {
      scan_times.push_back(time_ms([&] {
        Tensor y = ops::selective_scan(u, delta, bsel, csel, a, ops::Discretization::zoh, l);
        sink = sink + y.at(0);
      }));
      attn_times.push_back(time_ms([&] {
        // Full self-attention: L x L scores, softmax, value mix.
        Eigen::MatrixXf scores = q.mat2d() * k.mat2d().transpose() * inv_sqrt;
        Eigen::VectorXf rowmax = scores.rowwise().maxCoeff();
        scores = (scores.colwise() - rowmax).array().exp().matrix();
        Eigen::VectorXf rowsum = scores.rowwise().sum();
        scores.array().colwise() /= rowsum.array();
        Eigen::MatrixXf out = scores * v.mat2d();
        sink = sink + out(0, 0);
      }));
    }
    r.scan_ms.push_back(median_ms(scan_times));
    r.attn_ms.push_back(median_ms(attn_times));
  }

  for (size_t i = 1; i < r.lengths.size(); ++i) {
    r.scan_ratio.push_back(r.scan_ms[i] / std::max(r.scan_ms[i - 1], 1e-9));
    r.attn_ratio.push_back(r.attn_ms[i] / std::max(r.attn_ms[i - 1], 1e-9));
  }
  if (r.lengths.size() >= 2) {
    r.scan_exponent = fit_exponent(r.lengths, r.scan_ms);
    r.attn_exponent = fit_exponent(r.lengths, r.attn_ms);
  }
  return r;
}

std::string bench_csv(const BenchReport& r) {
  std::ostringstream os;
  os << "length,scan_ms,attn_ms,scan_ratio,attn_ratio\n";
  for (size_t i = 0; i < r.lengths.size(); ++i) {
    os << r.lengths[i] << ',' << r.scan_ms[i] << ',' << r.attn_ms[i] << ',';
    if (i > 0) os << r.scan_ratio[i - 1];
    os << ',';
    if (i > 0) os << r.attn_ratio[i - 1];
    os << '\n';
  }
  return os.str();
}

}  // namespace mambaseg::bench
