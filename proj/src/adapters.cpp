#include "mambaseg/adapters.hpp"

#include <cmath>

namespace mambaseg::adapters {

Tensor tokens_to_volume(const Tensor& tokens, long d, long h, long w) {
  if (tokens.ndim() != 2 || tokens.dim(0) != d * h * w)
    throw DimensionError("tokens_to_volume: expected " + std::to_string(d * h * w) +
                         " rows, got " + shape_str(tokens.shape()));
  long c = tokens.dim(1);
  // [T, C] -> [C, T]; rows of the transpose are already depth-major volumes.
  return ops::reshape(ops::transpose(tokens), {c, d, h, w});
}

Tensor volume_to_tokens(const Tensor& vol) {
  if (vol.ndim() != 4) throw DimensionError("volume_to_tokens: expected {C,D,H,W}");
  long c = vol.dim(0), t = vol.dim(1) * vol.dim(2) * vol.dim(3);
  return ops::transpose(ops::reshape(vol, {c, t}));
}

TpAdapter make_adapter(nn::ParamRegistry& reg, const std::string& prefix,
                       const AdapterConfig& cfg, std::mt19937_64& rng) {
  if (cfg.d_model <= 0 || cfg.d <= 0 || cfg.h <= 0 || cfg.w <= 0)
    throw ParameterError("adapter: model width and grid extents must be positive");
  long bn = cfg.bottleneck();
  TpAdapter a;
  a.cfg = cfg;
  a.down = nn::make_linear(reg, prefix + ".down", cfg.d_model, bn, false, rng);

  mamba::MambaConfig mc;
  mc.d_model = bn;
  mc.n_state = cfg.n_state;
  mc.expand = cfg.expand;
  mc.d_conv = cfg.d_conv;
  mc.dt_rank = 1;  // low-rank step head keeps the adapter within budget
  mc.method = cfg.method;
  const char* plane_names[3] = {".axial", ".coronal", ".sagittal"};
  a.plane_orders[0] = mamba::order_axial(cfg.d, cfg.h, cfg.w);
  a.plane_orders[1] = mamba::order_coronal(cfg.d, cfg.h, cfg.w);
  a.plane_orders[2] = mamba::order_sagittal(cfg.d, cfg.h, cfg.w);
  for (int p = 0; p < 3; ++p)
    a.plane_blocks[p] = mamba::make_mamba_block(reg, prefix + plane_names[p], mc, rng);

  if (cfg.local == LocalPath::conv) {
    float bound = 1.0f / std::sqrt(27.0f);
    a.conv_w1 = reg.add(prefix + ".local.w1", Tensor::uniform({bn, 27}, bound, rng, true));
    a.conv_w2 = reg.add(prefix + ".local.w2", Tensor::uniform({bn, 27}, bound, rng, true));
  } else {
    mfgc::MfgcConfig fc;
    fc.channels = bn;
    fc.freq_set = cfg.freq_set;
    fc.d = cfg.d;
    fc.h = cfg.h;
    fc.w = cfg.w;
    a.freq = mfgc::make_mfgc(reg, prefix + ".local", fc, rng);
  }

  a.fuse = nn::make_linear(reg, prefix + ".fuse", 2 * bn, bn, false, rng);
  a.up.w = reg.add(prefix + ".up.w", Tensor::zeros({bn, cfg.d_model}, true));
  return a;
}

Tensor adapter_forward(const TpAdapter& a, const Tensor& tokens) {
  const AdapterConfig& cfg = a.cfg;
  long t = cfg.d * cfg.h * cfg.w;
  if (tokens.ndim() != 2 || tokens.dim(0) != t || tokens.dim(1) != cfg.d_model)
    throw DimensionError("adapter_forward: expected [" + std::to_string(t) + "," +
                         std::to_string(cfg.d_model) + "], got " + shape_str(tokens.shape()));

  Tensor z = ops::gelu(a.down(tokens));

  // Global branch: tri-plane scans averaged (unshared weights across planes).
  Tensor global;
  for (int p = 0; p < 3; ++p) {
    Tensor y = mamba::scan_with_order(a.plane_blocks[p], z, a.plane_orders[p]);
    global = global.defined() ? ops::add(global, y) : y;
  }
  global = ops::scale(global, 1.0f / 3.0f);

  // Local branch: volumetric context at two dilations, or frequency gating.
  Tensor local;
  if (cfg.local == LocalPath::conv) {
    Tensor vol = tokens_to_volume(z, cfg.d, cfg.h, cfg.w);
    Tensor c1 = ops::conv3d_depthwise(vol, a.conv_w1, 1);
    Tensor c2 = ops::conv3d_depthwise(vol, a.conv_w2, 2);
    local = volume_to_tokens(ops::add(c1, c2));
  } else {
    local = mfgc_forward(a.freq, z);
  }

  Tensor fused = ops::gelu(a.fuse(ops::concat_cols({global, local})));
  return ops::matmul(fused, a.up.w);
}

}  // namespace mambaseg::adapters
