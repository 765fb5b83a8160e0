#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "mambaseg/nn.hpp"
#include "mambaseg/ops.hpp"

namespace mambaseg::mamba {

struct MambaConfig {
  long d_model = 0;
  long n_state = 8;   // per-channel state size N
  long expand = 2;    // inner width = expand * d_model
  long d_conv = 4;    // causal depthwise conv width
  long dt_rank = 0;   // 0 selects max(1, d_model/16)
  ops::Discretization method = ops::Discretization::zoh;
  float dt_min = 0.01f;  // softplus(dt_bias) lands in [dt_min, dt_max]
  float dt_max = 0.1f;

  long inner() const { return expand * d_model; }
  long rank() const { return dt_rank > 0 ? dt_rank : std::max(1L, d_model / 16); }
};

/// One selective-state-space block: gated projection, causal depthwise conv,
/// input-dependent (delta, B, C), diagonal A = -exp(a_log), skip D, SiLU gate.
struct MambaBlock {
  MambaConfig cfg;
  nn::Linear in_proj;   // d -> 2*inner (value | gate)
  Tensor conv_w;        // [inner, d_conv]
  Tensor conv_b;        // [inner]
  nn::Linear x_proj;    // inner -> rank + 2*N
  nn::Linear dt_proj;   // rank -> inner, with bias
  Tensor a_log;         // [inner, N]
  Tensor dskip;         // [inner]
  nn::Linear out_proj;  // inner -> d
};

MambaBlock make_mamba_block(nn::ParamRegistry& reg, const std::string& prefix,
                            const MambaConfig& cfg, std::mt19937_64& rng);

/// tokens: [T, d] with T a multiple of seq_len; each seq_len chunk is an
/// independent sequence (conv window and scan state reset at boundaries).
Tensor mamba_forward(const MambaBlock& blk, const Tensor& tokens, long seq_len);

/// A traversal order over a token grid: perm[i] = source row of output row i;
/// inv is the inverse permutation; the permuted rows form n_seq sequences of
/// seq_len steps.
struct ScanOrder {
  std::vector<long> perm;
  std::vector<long> inv;
  long seq_len = 0;
  long n_seq = 0;
};

ScanOrder make_order(std::vector<long> perm, long seq_len);

// 2D orders over an h x w grid of row-major tokens (one sequence each).
ScanOrder order_row_major(long h, long w, bool reverse);
ScanOrder order_col_major(long h, long w, bool reverse);

// Tri-plane orders over a (d, h, w) grid of depth-major tokens: sequences of
// in-plane tokens for axial (d slices), coronal (w slices), sagittal (h
// slices) traversals.
ScanOrder order_axial(long d, long h, long w);
ScanOrder order_coronal(long d, long h, long w);
ScanOrder order_sagittal(long d, long h, long w);

/// Runs the block over tokens permuted into the given order, then restores
/// the original layout.
Tensor scan_with_order(const MambaBlock& blk, const Tensor& tokens, const ScanOrder& order);

/// Four directional passes (row fwd/rev, column fwd/rev) through one shared
/// block, batched as four sequences, merged by arithmetic mean.
Tensor cross_scan_2d(const MambaBlock& blk, const Tensor& tokens, long h, long w);

}  // namespace mambaseg::mamba
