#include "mambaseg/fusion.hpp"

#include <cmath>

namespace mambaseg::fusion {

LoraPair make_lora(nn::ParamRegistry& reg, const std::string& prefix, long d_in, long d_out,
                   long rank, float alpha, std::mt19937_64& rng) {
  if (rank <= 0) throw ParameterError("lora: rank must be positive");
  if (alpha <= 0.0f) alpha = static_cast<float>(rank);
  LoraPair p;
  // down gets a small random init, up starts at zero: the update is inert
  // until training moves it.
  p.down = reg.add(prefix + ".down",
                   Tensor::uniform({d_in, rank}, 1.0f / std::sqrt(static_cast<float>(rank)), rng,
                                   true));
  p.up = reg.add(prefix + ".up", Tensor::zeros({rank, d_out}, true));
  p.scale = alpha / static_cast<float>(rank);
  return p;
}

Tensor lora_linear(const nn::Linear& base, const LoraPair& lora, const Tensor& x) {
  Tensor y = base(x);
  if (!lora.down.defined()) return y;
  Tensor update = ops::matmul(ops::matmul(x, lora.down), lora.up);
  return ops::add(y, ops::scale(update, lora.scale));
}

Cba make_cba(nn::ParamRegistry& reg, const std::string& prefix, const CbaConfig& cfg,
             std::mt19937_64& rng) {
  if (cfg.d_query <= 0 || cfg.d_ctx <= 0 || cfg.heads <= 0 || cfg.d_head <= 0)
    throw ParameterError("cba: invalid configuration");
  Cba c;
  c.cfg = cfg;
  long dh = cfg.heads * cfg.d_head;
  c.wq = nn::make_linear(reg, prefix + ".wq", cfg.d_query, dh, false, rng);
  c.wk = nn::make_linear(reg, prefix + ".wk", cfg.d_ctx, dh, false, rng);
  c.wv = nn::make_linear(reg, prefix + ".wv", cfg.d_ctx, dh, false, rng);
  c.wo = nn::make_linear(reg, prefix + ".wo", dh, cfg.d_ctx, false, rng);
  return c;
}

Tensor segmented_attention(const Tensor& q, const Tensor& k, const Tensor& v, long heads,
                           long seg_len) {
  long tq = q.dim(0), tk = k.dim(0), dh_total = q.dim(1);
  if (k.dim(1) != dh_total || v.dim(1) != dh_total)
    throw DimensionError("segmented_attention: projection widths differ");
  if (dh_total % heads != 0)
    throw DimensionError("segmented_attention: width not divisible by heads");
  if (seg_len <= 0 || tq % seg_len != 0 || tk % seg_len != 0 || tq / seg_len != tk / seg_len)
    throw DimensionError("segmented_attention: segment layout mismatch");
  long dh = dh_total / heads;
  long nseg = tq / seg_len, tkseg = tk / nseg;
  float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));

  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  for (long h = 0; h < heads; ++h) {
    Tensor qh = ops::slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = ops::slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = ops::slice_cols(v, h * dh, (h + 1) * dh);
    std::vector<Tensor> segs;
    segs.reserve(static_cast<size_t>(nseg));
    for (long s = 0; s < nseg; ++s) {
      Tensor qs = ops::slice_rows(qh, s * seg_len, (s + 1) * seg_len);
      Tensor ks = ops::slice_rows(kh, s * tkseg, (s + 1) * tkseg);
      Tensor vs = ops::slice_rows(vh, s * tkseg, (s + 1) * tkseg);
      Tensor scores = ops::scale(ops::matmul_nt(qs, ks), inv_sqrt);
      segs.push_back(ops::matmul(ops::softmax_lastdim(scores), vs));
    }
    head_outs.push_back(nseg == 1 ? segs[0] : ops::concat_rows(segs));
  }
  return heads == 1 ? head_outs[0] : ops::concat_cols(head_outs);
}

Tensor cross_branch_attention(const Cba& cba, const Tensor& f_query, const Tensor& f_ctx) {
  if (f_query.dim(1) != cba.cfg.d_query || f_ctx.dim(1) != cba.cfg.d_ctx)
    throw DimensionError("cross_branch_attention: branch widths do not match config");
  if (f_query.dim(0) != f_ctx.dim(0))
    throw DimensionError("cross_branch_attention: branch token counts differ");
  Tensor q = cba.wq(f_query), k = cba.wk(f_ctx), v = cba.wv(f_ctx);
  // One segment: every query token attends over the full context.
  Tensor mixed = segmented_attention(q, k, v, cba.cfg.heads, f_query.dim(0));
  return cba.wo(mixed);
}

Tensor residual_fuse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("residual_fuse: shapes differ");
  return ops::add(a, b);
}

VitBlock make_vit_block(nn::ParamRegistry& reg, const std::string& prefix,
                        const VitBlockConfig& cfg, std::mt19937_64& rng) {
  if (cfg.d <= 0 || cfg.heads <= 0 || cfg.d % cfg.heads != 0)
    throw ParameterError("vit_block: width must be divisible by heads");
  VitBlock b;
  b.cfg = cfg;
  b.ln1_g = reg.add(prefix + ".ln1.g", Tensor::full({cfg.d}, 1.0f, true));
  b.ln1_b = reg.add(prefix + ".ln1.b", Tensor::zeros({cfg.d}, true));
  b.wq = nn::make_linear(reg, prefix + ".wq", cfg.d, cfg.d, true, rng);
  b.wk = nn::make_linear(reg, prefix + ".wk", cfg.d, cfg.d, true, rng);
  b.wv = nn::make_linear(reg, prefix + ".wv", cfg.d, cfg.d, true, rng);
  b.wo = nn::make_linear(reg, prefix + ".wo", cfg.d, cfg.d, true, rng);
  if (cfg.lora_rank > 0) {
    b.lora_q = make_lora(reg, prefix + ".lora_q", cfg.d, cfg.d, cfg.lora_rank, cfg.lora_alpha, rng);
    b.lora_k = make_lora(reg, prefix + ".lora_k", cfg.d, cfg.d, cfg.lora_rank, cfg.lora_alpha, rng);
    b.lora_v = make_lora(reg, prefix + ".lora_v", cfg.d, cfg.d, cfg.lora_rank, cfg.lora_alpha, rng);
  }
  b.ln2_g = reg.add(prefix + ".ln2.g", Tensor::full({cfg.d}, 1.0f, true));
  b.ln2_b = reg.add(prefix + ".ln2.b", Tensor::zeros({cfg.d}, true));
  b.fc1 = nn::make_linear(reg, prefix + ".fc1", cfg.d, cfg.d * cfg.mlp_ratio, true, rng);
  b.fc2 = nn::make_linear(reg, prefix + ".fc2", cfg.d * cfg.mlp_ratio, cfg.d, true, rng);
  return b;
}

Tensor vit_block_forward(const VitBlock& blk, const Tensor& tokens, long seg_len,
                         const ResidualHook& after_msa, const ResidualHook& after_mlp) {
  Tensor x = tokens;
  {
    Tensor normed = ops::layer_norm(x, blk.ln1_g, blk.ln1_b);
    Tensor q = lora_linear(blk.wq, blk.lora_q, normed);
    Tensor k = lora_linear(blk.wk, blk.lora_k, normed);
    Tensor v = lora_linear(blk.wv, blk.lora_v, normed);
    Tensor attn = segmented_attention(q, k, v, blk.cfg.heads, seg_len);
    x = ops::add(x, blk.wo(attn));
    if (after_msa) x = ops::add(x, after_msa(x));
  }
  {
    Tensor normed = ops::layer_norm(x, blk.ln2_g, blk.ln2_b);
    Tensor hidden = ops::gelu(blk.fc1(normed));
    x = ops::add(x, blk.fc2(hidden));
    if (after_mlp) x = ops::add(x, after_mlp(x));
  }
  return x;
}

}  // namespace mambaseg::fusion
