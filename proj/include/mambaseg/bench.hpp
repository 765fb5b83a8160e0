#pragma once

#include <string>
#include <vector>

#include "mambaseg/tensor.hpp"

namespace mambaseg::bench {

struct BenchReport {
  std::vector<long> lengths;
  std::vector<double> scan_ms;   // median wall time per length
  std::vector<double> attn_ms;
  std::vector<double> scan_ratio;  // time[i] / time[i-1] for doubled lengths
  std::vector<double> attn_ratio;
  double scan_exponent = 0.0;  // least-squares slope of log t vs log L
  double attn_exponent = 0.0;
};

/// Times the selective scan against full self-attention at equal width over
/// the given (ascending) sequence lengths; repeats >= 3 runs per point,
/// reporting the median.
BenchReport bench_scaling(const std::vector<long>& lengths, long d_model, long repeats);

/// Fixed-header CSV (length,scan_ms,attn_ms,scan_ratio,attn_ratio).
std::string bench_csv(const BenchReport& r);

}  // namespace mambaseg::bench
