#pragma once

#include <string>
#include <vector>

#include "mambaseg/nn.hpp"
#include "mambaseg/ops.hpp"

namespace mambaseg::mfgc {

enum class FreqSet {
  full,  // every frequency of the d*h*w grid
  low2,  // the low-frequency corner: kd,kh,kw < min(2, extent)
};

struct MfgcConfig {
  long channels = 0;
  long d = 0, h = 0, w = 0;  // token grid
  FreqSet freq_set = FreqSet::full;
  long gate_hidden = 0;  // 0 -> max(1, channels/2)

  long hidden() const { return gate_hidden > 0 ? gate_hidden : std::max(1L, channels / 2); }
};

/// Multi-frequency gated convolution: per-channel 3D DCT, gather of the
/// selected frequencies, a channel gate driven by mean/max/min pooling over
/// the frequency axis through a shared two-layer MLP, then inverse DCT.
struct Mfgc {
  MfgcConfig cfg;
  std::vector<long> freq_rows;  // frequency-major rows to gather
  nn::Linear w1;                // channels -> hidden, no bias
  nn::Linear wr;                // hidden -> channels, no bias
};

Mfgc make_mfgc(nn::ParamRegistry& reg, const std::string& prefix, const MfgcConfig& cfg,
               std::mt19937_64& rng);

/// tokens: [d*h*w, channels] voxel-major rows -> same shape.
Tensor mfgc_forward(const Mfgc& m, const Tensor& tokens);

/// The gate alone (sigma of the pooled MLP sum) for a gathered coefficient
/// block [K, channels]; exposed for testing.
Tensor mfgc_gate(const Mfgc& m, const Tensor& coeffs);

}  // namespace mambaseg::mfgc
