#pragma once

#include <functional>
#include <string>

#include "mambaseg/nn.hpp"
#include "mambaseg/ops.hpp"

namespace mambaseg::fusion {

/// Low-rank additive update of a frozen linear layer:
///   y = x W + b + (alpha/rank) * (x down) up
/// `up` starts at zero so the wrapped layer is exactly the frozen one at
/// initialization.
struct LoraPair {
  Tensor down;  // [d_in, rank]
  Tensor up;    // [rank, d_out]
  float scale = 1.0f;
};

LoraPair make_lora(nn::ParamRegistry& reg, const std::string& prefix, long d_in, long d_out,
                   long rank, float alpha, std::mt19937_64& rng);

/// Applies `base` plus the low-rank update; `lora` may be default (no-op).
Tensor lora_linear(const nn::Linear& base, const LoraPair& lora, const Tensor& x);

// ---- cross-branch attention -------------------------------------------------

struct CbaConfig {
  long d_query = 0;  // width of the querying (state-space) branch
  long d_ctx = 0;    // width of the context (encoder) branch
  long heads = 4;
  long d_head = 16;
};

/// Multi-head scaled dot-product attention where queries come from one
/// branch and keys/values from the other; the result is projected back to
/// the context width so it can be added to the context features. No biases.
struct Cba {
  CbaConfig cfg;
  nn::Linear wq;  // d_query -> heads*d_head
  nn::Linear wk;  // d_ctx   -> heads*d_head
  nn::Linear wv;  // d_ctx   -> heads*d_head
  nn::Linear wo;  // heads*d_head -> d_ctx
};

Cba make_cba(nn::ParamRegistry& reg, const std::string& prefix, const CbaConfig& cfg,
             std::mt19937_64& rng);

/// [L, d_query] queries against [L, d_ctx] keys/values -> [L, d_ctx].
Tensor cross_branch_attention(const Cba& cba, const Tensor& f_query, const Tensor& f_ctx);

/// Elementwise residual combination of two equal-shape feature maps.
Tensor residual_fuse(const Tensor& a, const Tensor& b);

// ---- transformer encoder block ------------------------------------------------

struct VitBlockConfig {
  long d = 0;
  long heads = 4;
  long mlp_ratio = 4;
  long lora_rank = 0;  // 0 disables LoRA on the q/k/v projections
  float lora_alpha = 0.0f;  // 0 -> alpha = rank
};

/// Pre-norm residual block: x + MSA(LN(x)), then x + MLP(LN(x)).
struct VitBlock {
  VitBlockConfig cfg;
  Tensor ln1_g, ln1_b;
  nn::Linear wq, wk, wv, wo;
  LoraPair lora_q, lora_k, lora_v;  // empty tensors when LoRA is off
  Tensor ln2_g, ln2_b;
  nn::Linear fc1, fc2;
};

VitBlock make_vit_block(nn::ParamRegistry& reg, const std::string& prefix,
                        const VitBlockConfig& cfg, std::mt19937_64& rng);

/// Optional residual branches attached after the attention and MLP
/// sub-blocks; each receives the current activations and returns a tensor to
/// add.
using ResidualHook = std::function<Tensor(const Tensor&)>;

/// tokens: [T, d]; attention is restricted to independent contiguous
/// segments of seg_len rows (seg_len == T gives full attention).
Tensor vit_block_forward(const VitBlock& blk, const Tensor& tokens, long seg_len,
                         const ResidualHook& after_msa = {}, const ResidualHook& after_mlp = {});

/// Multi-head attention over each row segment independently.
Tensor segmented_attention(const Tensor& q, const Tensor& k, const Tensor& v, long heads,
                           long seg_len);

}  // namespace mambaseg::fusion
