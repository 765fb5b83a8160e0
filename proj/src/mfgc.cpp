#include "mambaseg/mfgc.hpp"

namespace mambaseg::mfgc {

Mfgc make_mfgc(nn::ParamRegistry& reg, const std::string& prefix, const MfgcConfig& cfg,
               std::mt19937_64& rng) {
  if (cfg.channels <= 0 || cfg.d <= 0 || cfg.h <= 0 || cfg.w <= 0)
    throw ParameterError("mfgc: channels and grid extents must be positive");
  Mfgc m;
  m.cfg = cfg;
  long kd = cfg.freq_set == FreqSet::full ? cfg.d : std::min(2L, cfg.d);
  long kh = cfg.freq_set == FreqSet::full ? cfg.h : std::min(2L, cfg.h);
  long kw = cfg.freq_set == FreqSet::full ? cfg.w : std::min(2L, cfg.w);
  m.freq_rows.reserve(static_cast<size_t>(kd * kh * kw));
  for (long a = 0; a < kd; ++a)
    for (long b = 0; b < kh; ++b)
      for (long c = 0; c < kw; ++c)
        m.freq_rows.push_back((a * cfg.h + b) * cfg.w + c);
  m.w1 = nn::make_linear(reg, prefix + ".gate.w1", cfg.channels, cfg.hidden(), false, rng);
  m.wr = nn::make_linear(reg, prefix + ".gate.wr", cfg.hidden(), cfg.channels, false, rng);
  return m;
}

Tensor mfgc_gate(const Mfgc& m, const Tensor& coeffs) {
  // M = sigma( sum over {mean,max,min} pools of Wr(GELU(W1 z_pool)) ).
  Tensor pools[3] = {ops::mean_rows(coeffs), ops::max_rows(coeffs), ops::min_rows(coeffs)};
  Tensor s;
  for (Tensor& p : pools) {
    Tensor branch = m.wr(ops::gelu(m.w1(p)));
    s = s.defined() ? ops::add(s, branch) : branch;
  }
  return ops::sigmoid(s);
}

Tensor mfgc_forward(const Mfgc& m, const Tensor& tokens) {
  const MfgcConfig& cfg = m.cfg;
  long t = cfg.d * cfg.h * cfg.w;
  if (tokens.ndim() != 2 || tokens.dim(0) != t || tokens.dim(1) != cfg.channels)
    throw DimensionError("mfgc_forward: expected [" + std::to_string(t) + "," +
                         std::to_string(cfg.channels) + "], got " + shape_str(tokens.shape()));
  Tensor freq = ops::dct3(tokens, cfg.d, cfg.h, cfg.w);
  Tensor z = ops::select_rows(freq, m.freq_rows);
  Tensor gate = mfgc_gate(m, z);
  Tensor gated = ops::mul_rowvec(z, gate);
  // Frequencies outside the selected set are dropped (zeroed) on the way back.
  Tensor spread = ops::scatter_rows(gated, m.freq_rows, t);
  return ops::idct3(spread, cfg.d, cfg.h, cfg.w);
}

}  // namespace mambaseg::mfgc
