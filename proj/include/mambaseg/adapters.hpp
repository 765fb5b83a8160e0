#pragma once

#include <string>

#include "mambaseg/mamba.hpp"
#include "mambaseg/mfgc.hpp"
#include "mambaseg/nn.hpp"

namespace mambaseg::adapters {

enum class LocalPath {
  conv,  // multi-scale depthwise 3x3x3 convolutions (dilations 1 and 2)
  mfgc,  // multi-frequency gated convolution
};

struct AdapterConfig {
  long d_model = 0;    // token width of the host block
  long d_adapter = 0;  // bottleneck width; 0 -> d_model/8
  long d = 0, h = 0, w = 0;  // token grid the sequence maps onto
  LocalPath local = LocalPath::mfgc;
  mfgc::FreqSet freq_set = mfgc::FreqSet::full;
  long n_state = 8;
  long expand = 2;
  long d_conv = 4;
  ops::Discretization method = ops::Discretization::zoh;

  long bottleneck() const { return d_adapter > 0 ? d_adapter : std::max(1L, d_model / 8); }
};

/// Volume-aware bottleneck adapter. Tokens are projected down, reinterpreted
/// on their (d, h, w) grid, and processed by two parallel branches: a global
/// branch of tri-plane state-space scans (separate block per plane) and a
/// local branch (depthwise convs or MFGC). The branches are concatenated,
/// fused per token, and projected back up through a zero-initialized layer,
/// so at initialization the adapter contributes exactly nothing.
struct TpAdapter {
  AdapterConfig cfg;
  nn::Linear down;  // d_model -> bottleneck, no bias
  mamba::MambaBlock plane_blocks[3];
  mamba::ScanOrder plane_orders[3];
  // local = conv
  Tensor conv_w1, conv_w2;  // [bottleneck, 27] each, dilations 1 and 2
  // local = mfgc
  mfgc::Mfgc freq;
  nn::Linear fuse;  // 2*bottleneck -> bottleneck, no bias (1x1x1 conv)
  nn::Linear up;    // bottleneck -> d_model, no bias, zero-initialized
};

TpAdapter make_adapter(nn::ParamRegistry& reg, const std::string& prefix,
                       const AdapterConfig& cfg, std::mt19937_64& rng);

/// tokens: [d*h*w, d_model] -> residual of the same shape (caller adds it).
Tensor adapter_forward(const TpAdapter& a, const Tensor& tokens);

/// {C, d, h, w} volume view of grid tokens and back; pure reshapes.
Tensor tokens_to_volume(const Tensor& tokens, long d, long h, long w);
Tensor volume_to_tokens(const Tensor& vol);

}  // namespace mambaseg::adapters
