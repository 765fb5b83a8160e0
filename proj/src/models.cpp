#include "mambaseg/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace mambaseg::models {

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "dual_branch") return ModelKind::dual_branch;
  if (s == "adapter_conv") return ModelKind::adapter_conv;
  if (s == "adapter_mfgc") return ModelKind::adapter_mfgc;
  if (s == "adapter_lora") return ModelKind::adapter_lora;
  throw ConfigError("unknown model kind: " + s);
}

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::dual_branch: return "dual_branch";
    case ModelKind::adapter_conv: return "adapter_conv";
    case ModelKind::adapter_mfgc: return "adapter_mfgc";
    case ModelKind::adapter_lora: return "adapter_lora";
  }
  throw ParameterError("invalid model kind");
}

namespace {
bool is_pow2(long v) { return v > 0 && (v & (v - 1)) == 0; }
}  // namespace

void validate(const ModelConfig& cfg) {
  if (cfg.n_classes < 2) throw ConfigError("model: n_classes must be >= 2");
  if (cfg.proj_width < -1) throw ConfigError("model: proj_width must be -1, 0, or positive");
  if (cfg.img <= 0 || cfg.patch <= 0 || cfg.img % cfg.patch != 0)
    throw ConfigError("model: patch must tile the image extent");
  if (!is_pow2(cfg.patch)) throw ConfigError("model: patch must be a power of two");
  if (cfg.d_enc <= 0 || cfg.enc_blocks <= 0) throw ConfigError("model: encoder shape invalid");
  if (cfg.enc_heads <= 0 || cfg.d_enc % cfg.enc_heads != 0)
    throw ConfigError("model: enc_heads must divide d_enc");
  if (cfg.is_adapter()) {
    if (cfg.in_d <= 0) throw ConfigError("model: in_d must be positive");
  } else {
    if (cfg.stem_patch <= 0 || cfg.img % cfg.stem_patch != 0 || !is_pow2(cfg.stem_patch))
      throw ConfigError("model: stem_patch must be a power of two tiling the image");
    // The fused token grid must agree between the two branches.
    if (cfg.img / cfg.stem_patch / 2 != cfg.img / cfg.patch)
      throw ConfigError("model: stem_patch/merge grid must match the encoder patch grid");
  }
}

namespace {

// Each stage doubles the in-plane extents with a kernel-2 stride-2 transposed
// conv followed by GELU; a final 1x1x1 conv maps to class logits. Depth is
// carried through unchanged (adapter inputs arrive at full depth).
Decoder make_decoder(nn::ParamRegistry& reg, const ModelConfig& cfg, long width_in,
                     std::mt19937_64& rng) {
  Decoder dec;
  long n_up = 0;
  for (long p = cfg.patch; p > 1; p /= 2) ++n_up;
  long cin = width_in;
  for (long i = 0; i < n_up; ++i) {
    DecoderStage st;
    long cout = std::max(16L, cin / 2);
    st.cout = cout;
    long kvol = cout * st.k[0] * st.k[1] * st.k[2];
    std::string pfx = "dec.s" + std::to_string(i);
    st.up_w = reg.add(pfx + ".up.w",
                      Tensor::kaiming({cin, kvol}, cin * st.k[1] * st.k[2], rng));
    st.up_b = reg.add(pfx + ".up.b", Tensor::zeros({cout}, true));
    dec.stages.push_back(st);
    cin = cout;
  }
  dec.head_w = reg.add("dec.head.w", Tensor::kaiming({cfg.n_classes, cin}, cin, rng));
  dec.head_b = reg.add("dec.head.b", Tensor::zeros({cfg.n_classes}, true));
  return dec;
}

Tensor decode(const Decoder& dec, const Tensor& volume) {
  Tensor x = volume;
  for (const DecoderStage& st : dec.stages)
    x = ops::gelu(ops::conv_transpose3d(x, st.up_w, st.up_b, st.cout, st.k[0], st.k[1], st.k[2],
                                        st.s[0], st.s[1], st.s[2]));
  return ops::conv3d(x, dec.head_w, dec.head_b, 1, 1, 1, {});
}

Encoder make_encoder(nn::ParamRegistry& reg, const ModelConfig& cfg, long n_tokens,
                     std::mt19937_64& rng) {
  Encoder enc;
  long in_dim = cfg.patch * cfg.patch;  // single input channel
  enc.embed = nn::make_linear(reg, "enc.embed", in_dim, cfg.d_enc, true, rng);
  enc.pos = reg.add("enc.pos", Tensor::uniform({n_tokens, cfg.d_enc}, 0.02f, rng, true));
  fusion::VitBlockConfig bc;
  bc.d = cfg.d_enc;
  bc.heads = cfg.enc_heads;
  bc.mlp_ratio = cfg.mlp_ratio;
  bc.lora_rank = cfg.kind == ModelKind::adapter_lora ? cfg.lora_rank : 0;
  for (long i = 0; i < cfg.enc_blocks; ++i)
    enc.blocks.push_back(fusion::make_vit_block(reg, "enc.b" + std::to_string(i), bc, rng));
  enc.ln_g = reg.add("enc.ln.g", Tensor::full({cfg.d_enc}, 1.0f, true));
  enc.ln_b = reg.add("enc.ln.b", Tensor::zeros({cfg.d_enc}, true));
  if (cfg.proj_width != 0)
    enc.proj = nn::make_linear(reg, "enc.proj", cfg.d_enc, cfg.enc_out_width(), true, rng);
  return enc;
}

Tensor merge_2x2(const nn::Linear& merge, const Tensor& tokens, long gh, long gw) {
  std::vector<long> i00, i01, i10, i11;
  for (long h = 0; h < gh; h += 2)
    for (long w = 0; w < gw; w += 2) {
      i00.push_back(h * gw + w);
      i01.push_back(h * gw + w + 1);
      i10.push_back((h + 1) * gw + w);
      i11.push_back((h + 1) * gw + w + 1);
    }
  Tensor cat = ops::concat_cols({ops::select_rows(tokens, i00), ops::select_rows(tokens, i01),
                                 ops::select_rows(tokens, i10), ops::select_rows(tokens, i11)});
  return merge(cat);
}

Tensor encoder_tokens(const Model& m, const Tensor& input, long pd) {
  const ModelConfig& cfg = m.cfg;
  Tensor tok = ops::patchify3d(input, pd, cfg.patch, cfg.patch);
  tok = m.enc.embed(tok);
  return ops::add(tok, m.enc.pos);
}

Tensor forward_dual(const Model& m, const Tensor& input) {
  const ModelConfig& cfg = m.cfg;
  if (input.ndim() != 4 || input.dim(0) != 1 || input.dim(1) != 1 || input.dim(2) != cfg.img ||
      input.dim(3) != cfg.img)
    throw DimensionError("dual_branch forward: expected {1,1," + std::to_string(cfg.img) + "," +
                         std::to_string(cfg.img) + "}, got " + shape_str(input.shape()));

  // Context branch: full-attention transformer over patch tokens.
  long t = cfg.enc_tokens_per_slice();
  Tensor x = encoder_tokens(m, input, 1);
  for (const auto& blk : m.enc.blocks) x = fusion::vit_block_forward(blk, x, t);
  x = ops::layer_norm(x, m.enc.ln_g, m.enc.ln_b);
  Tensor f_enc = m.enc.proj.w.defined() ? m.enc.proj(x) : x;

  // Specialist branch: cross-scan state-space stages with a 2x2 merge.
  long gs = cfg.img / cfg.stem_patch;
  Tensor s = ops::patchify3d(input, 1, cfg.stem_patch, cfg.stem_patch);
  s = m.spec.stem(s);
  for (const auto& sb : m.spec.stage1) {
    Tensor normed = ops::layer_norm(s, sb.ln_g, sb.ln_b);
    s = ops::add(s, mamba::cross_scan_2d(sb.blk, normed, gs, gs));
  }
  s = merge_2x2(m.spec.merge, s, gs, gs);
  long gm = gs / 2;
  for (const auto& sb : m.spec.stage2) {
    Tensor normed = ops::layer_norm(s, sb.ln_g, sb.ln_b);
    s = ops::add(s, mamba::cross_scan_2d(sb.blk, normed, gm, gm));
  }
  Tensor f_mamba = ops::layer_norm(s, m.spec.ln_g, m.spec.ln_b);

  Tensor f_cba = fusion::cross_branch_attention(m.cba, f_mamba, f_enc);
  Tensor fused = fusion::residual_fuse(f_enc, f_cba);
  Tensor vol = adapters::tokens_to_volume(fused, 1, gm, gm);
  return decode(m.dec, vol);
}

Tensor forward_adapter(const Model& m, const Tensor& input) {
  const ModelConfig& cfg = m.cfg;
  if (input.ndim() != 4 || input.dim(0) != 1 || input.dim(1) != cfg.in_d ||
      input.dim(2) != cfg.img || input.dim(3) != cfg.img)
    throw DimensionError("adapter forward: expected {1," + std::to_string(cfg.in_d) + "," +
                         std::to_string(cfg.img) + "," + std::to_string(cfg.img) + "}, got " +
                         shape_str(input.shape()));

  long seg = cfg.enc_tokens_per_slice();  // per-slice attention groups
  Tensor x = encoder_tokens(m, input, 1);
  std::vector<Tensor> block_outs;
  for (size_t i = 0; i < m.enc.blocks.size(); ++i) {
    const adapters::TpAdapter& amsa = m.msa_adapters[i];
    const adapters::TpAdapter& amlp = m.mlp_adapters[i];
    x = fusion::vit_block_forward(
        m.enc.blocks[i], x, seg,
        [&amsa](const Tensor& h) { return adapters::adapter_forward(amsa, h); },
        [&amlp](const Tensor& h) { return adapters::adapter_forward(amlp, h); });
    block_outs.push_back(x);
  }
  // Aggregate the two deepest representations.
  Tensor agg = block_outs.size() >= 2
                   ? ops::add(block_outs.back(), block_outs[block_outs.size() - 2])
                   : block_outs.back();
  agg = ops::layer_norm(agg, m.enc.ln_g, m.enc.ln_b);
  if (m.enc.proj.w.defined()) agg = m.enc.proj(agg);
  Tensor vol = adapters::tokens_to_volume(agg, cfg.in_d, cfg.img / cfg.patch, cfg.img / cfg.patch);
  return decode(m.dec, vol);
}

}  // namespace

Tensor Model::forward(const Tensor& input) const {
  return cfg.is_adapter() ? forward_adapter(*this, input) : forward_dual(*this, input);
}

Model make_model(const ModelConfig& cfg) {
  validate(cfg);
  Model m;
  m.cfg = cfg;
  std::mt19937_64 rng(cfg.seed);

  long slices = cfg.is_adapter() ? cfg.in_d : 1;
  long n_tokens = slices * cfg.enc_tokens_per_slice();
  m.enc = make_encoder(m.params, cfg, n_tokens, rng);

  if (cfg.kind == ModelKind::dual_branch) {
    Specialist& sp = m.spec;
    sp.stem = nn::make_linear(m.params, "spec.stem", cfg.stem_patch * cfg.stem_patch,
                              cfg.d_mamba, true, rng);
    mamba::MambaConfig mc;
    mc.n_state = cfg.n_state;
    mc.expand = cfg.expand;
    mc.d_conv = cfg.d_conv;
    mc.method = cfg.method;
    for (long i = 0; i < cfg.stage_blocks; ++i) {
      SpecStageBlock sb;
      std::string pfx = "spec.s1." + std::to_string(i);
      sb.ln_g = m.params.add(pfx + ".ln.g", Tensor::full({cfg.d_mamba}, 1.0f, true));
      sb.ln_b = m.params.add(pfx + ".ln.b", Tensor::zeros({cfg.d_mamba}, true));
      mc.d_model = cfg.d_mamba;
      sb.blk = mamba::make_mamba_block(m.params, pfx, mc, rng);
      sp.stage1.push_back(std::move(sb));
    }
    long d2 = 2 * cfg.d_mamba;
    sp.merge = nn::make_linear(m.params, "spec.merge", 4 * cfg.d_mamba, d2, true, rng);
    for (long i = 0; i < cfg.stage_blocks; ++i) {
      SpecStageBlock sb;
      std::string pfx = "spec.s2." + std::to_string(i);
      sb.ln_g = m.params.add(pfx + ".ln.g", Tensor::full({d2}, 1.0f, true));
      sb.ln_b = m.params.add(pfx + ".ln.b", Tensor::zeros({d2}, true));
      mc.d_model = d2;
      sb.blk = mamba::make_mamba_block(m.params, pfx, mc, rng);
      sp.stage2.push_back(std::move(sb));
    }
    sp.ln_g = m.params.add("spec.ln.g", Tensor::full({d2}, 1.0f, true));
    sp.ln_b = m.params.add("spec.ln.b", Tensor::zeros({d2}, true));

    fusion::CbaConfig cc;
    cc.d_query = d2;
    cc.d_ctx = cfg.enc_out_width();
    cc.heads = cfg.cba_heads;
    cc.d_head = cfg.cba_d_head;
    m.cba = fusion::make_cba(m.params, "fuse", cc, rng);
    m.dec = make_decoder(m.params, cfg, cfg.enc_out_width(), rng);
  } else {
    adapters::AdapterConfig ac;
    ac.d_model = cfg.d_enc;
    ac.d_adapter = cfg.d_adapter;
    ac.d = cfg.in_d;
    ac.h = cfg.img / cfg.patch;
    ac.w = cfg.img / cfg.patch;
    ac.local = cfg.kind == ModelKind::adapter_mfgc ? adapters::LocalPath::mfgc
                                                   : adapters::LocalPath::conv;
    ac.freq_set = cfg.freq_set;
    ac.n_state = cfg.n_state;
    ac.expand = cfg.expand;
    ac.d_conv = cfg.d_conv;
    ac.method = cfg.method;
    for (long i = 0; i < cfg.enc_blocks; ++i) {
      std::string p = "ad.b" + std::to_string(i);
      m.msa_adapters.push_back(adapters::make_adapter(m.params, p + ".msa", ac, rng));
      m.mlp_adapters.push_back(adapters::make_adapter(m.params, p + ".mlp", ac, rng));
    }
    m.dec = make_decoder(m.params, cfg, cfg.enc_out_width(), rng);

    // Budget: each adapter stays within 10% of its host block's parameters.
    for (long i = 0; i < cfg.enc_blocks; ++i) {
      long bp = encoder_block_param_count(m, i);
      for (const char* side : {".msa.", ".mlp."}) {
        std::string pfx = "ad.b" + std::to_string(i) + side;
        long ap = 0;
        for (const auto& p : m.params.items())
          if (p.name.compare(0, pfx.size(), pfx) == 0) ap += p.t.numel();
        if (ap * 10 > bp)
          throw ParameterError("adapter budget exceeded on block " + std::to_string(i) + ": " +
                               std::to_string(ap) + " vs host " + std::to_string(bp));
      }
    }
  }
  return m;
}

namespace {
bool name_has_prefix(const std::string& name, const std::string& prefix) {
  return name.size() >= prefix.size() && name.compare(0, prefix.size(), prefix) == 0;
}
}  // namespace

long adapter_param_count(const Model& m, long block_index) {
  std::string pfx = "ad.b" + std::to_string(block_index) + ".";
  long n = 0;
  for (const auto& p : m.params.items())
    if (name_has_prefix(p.name, pfx)) n += p.t.numel();
  return n;
}

long encoder_block_param_count(const Model& m, long block_index) {
  std::string pfx = "enc.b" + std::to_string(block_index) + ".";
  long n = 0;
  for (const auto& p : m.params.items())
    if (name_has_prefix(p.name, pfx) && p.name.find(".lora_") == std::string::npos)
      n += p.t.numel();
  return n;
}

void freeze_encoder(Model& m) {
  m.frozen_names.clear();
  m.freeze_hashes.clear();
  for (auto& p : m.params.items()) {
    bool enc_side = name_has_prefix(p.name, "enc.");
    bool exempt = name_has_prefix(p.name, "enc.proj.") || p.name.find(".lora_") != std::string::npos;
    if (enc_side && !exempt) {
      p.t.set_requires_grad(false);
      m.frozen_names.push_back(p.name);
      m.freeze_hashes.emplace_back(p.name, nn::hash_tensor(p.t));
    }
  }
}

FreezeReport check_frozen(const Model& m) {
  FreezeReport r;
  for (const auto& [name, expected] : m.freeze_hashes) {
    Tensor t = m.params.find(name);
    if (nn::hash_tensor(t) != expected) {
      r.ok = false;
      r.changed.push_back(name);
    }
  }
  long total = m.params.total_count();
  r.trainable_ratio = total == 0 ? 1.0
                                 : static_cast<double>(m.params.trainable_count()) /
                                       static_cast<double>(total);
  return r;
}

// ---- checkpoint I/O -----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'S', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("checkpoint: truncated file");
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  if (s.size() > 0xffff) throw FormatError("checkpoint: name too long");
  put<std::uint16_t>(os, static_cast<std::uint16_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  auto len = get<std::uint16_t>(is);
  std::string s(len, '\0');
  is.read(s.data(), len);
  if (!is) throw FormatError("checkpoint: truncated file");
  return s;
}

}  // namespace

void save_checkpoint(const Model& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("checkpoint: cannot open for writing: " + path);
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);
  put<std::uint64_t>(os, m.params.items().size());
  std::uint64_t offset = 0;
  for (const auto& p : m.params.items()) {
    put_string(os, p.name);
    put<std::uint8_t>(os, p.t.requires_grad() ? 1 : 0);
    put<std::uint8_t>(os, static_cast<std::uint8_t>(p.t.ndim()));
    for (long i = 0; i < p.t.ndim(); ++i) put<std::uint32_t>(os, static_cast<std::uint32_t>(p.t.dim(i)));
    put<std::uint64_t>(os, offset);
    offset += static_cast<std::uint64_t>(p.t.numel());
  }
  put<std::uint64_t>(os, offset);  // payload length in floats
  for (const auto& p : m.params.items())
    os.write(reinterpret_cast<const char*>(p.t.data()),
             static_cast<std::streamsize>(sizeof(float) * p.t.numel()));
  put<std::uint64_t>(os, m.freeze_hashes.size());
  for (const auto& [name, hash] : m.freeze_hashes) {
    put_string(os, name);
    put<std::uint64_t>(os, hash);
  }
  if (!os) throw FormatError("checkpoint: write failed: " + path);
}

void load_checkpoint(Model& m, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic");
  if (get<std::uint32_t>(is) != kVersion) throw FormatError("checkpoint: unsupported version");
  auto n_params = get<std::uint64_t>(is);
  if (n_params != m.params.items().size())
    throw FormatError("checkpoint: parameter count mismatch");
  struct Entry {
    std::string name;
    bool requires_grad;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  entries.reserve(n_params);
  for (std::uint64_t i = 0; i < n_params; ++i) {
    Entry e;
    e.name = get_string(is);
    e.requires_grad = get<std::uint8_t>(is) != 0;
    auto nd = get<std::uint8_t>(is);
    for (int k = 0; k < nd; ++k) e.shape.push_back(static_cast<long>(get<std::uint32_t>(is)));
    e.offset = get<std::uint64_t>(is);
    entries.push_back(std::move(e));
  }
  auto payload_len = get<std::uint64_t>(is);
  std::vector<float> payload(payload_len);
  is.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(sizeof(float) * payload_len));
  if (!is) throw FormatError("checkpoint: truncated payload");

  for (const Entry& e : entries) {
    Tensor t = m.params.find(e.name);  // throws ParameterError when missing
    if (t.shape() != e.shape)
      throw FormatError("checkpoint: shape mismatch for " + e.name);
    if (e.offset + static_cast<std::uint64_t>(t.numel()) > payload_len)
      throw FormatError("checkpoint: payload overrun for " + e.name);
    std::copy(payload.begin() + static_cast<long>(e.offset),
              payload.begin() + static_cast<long>(e.offset) + t.numel(), t.data());
    t.set_requires_grad(e.requires_grad);
  }

  auto n_hashes = get<std::uint64_t>(is);
  m.frozen_names.clear();
  m.freeze_hashes.clear();
  for (std::uint64_t i = 0; i < n_hashes; ++i) {
    std::string name = get_string(is);
    auto hash = get<std::uint64_t>(is);
    Tensor t = m.params.find(name);
    if (nn::hash_tensor(t) != hash)
      throw FormatError("checkpoint: frozen parameter hash mismatch for " + name);
    m.frozen_names.push_back(name);
    m.freeze_hashes.emplace_back(name, hash);
  }
}

}  // namespace mambaseg::models
