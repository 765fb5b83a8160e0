#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mambaseg/adapters.hpp"
#include "mambaseg/fusion.hpp"
#include "mambaseg/mamba.hpp"
#include "mambaseg/nn.hpp"

namespace mambaseg::models {

enum class ModelKind {
  dual_branch,    // 2D: transformer encoder + state-space branch, fused
  adapter_conv,   // 3D: frozen encoder with volume adapters, conv local path
  adapter_mfgc,   // 3D: same with frequency-gated local path
  adapter_lora,   // 3D: conv local path plus LoRA on the frozen q/k/v
};

ModelKind model_kind_from_string(const std::string& s);
std::string to_string(ModelKind k);

struct ModelConfig {
  ModelKind kind = ModelKind::dual_branch;
  long n_classes = 4;

  // transformer encoder
  long d_enc = 64;
  long enc_blocks = 4;
  long enc_heads = 4;
  long patch = 8;
  long mlp_ratio = 4;
  // Trainable per-token projection after the (frozen) encoder:
  // -1 -> width d_enc, 0 -> no projection, >0 -> that width.
  long proj_width = -1;

  // dual-branch specialist
  long d_mamba = 32;
  long stem_patch = 4;
  long stage_blocks = 2;

  // adapter_lora: rank of the low-rank updates on the frozen q/k/v
  long lora_rank = 4;

  // cross-branch attention
  long cba_heads = 4;
  long cba_d_head = 16;

  // state-space settings shared by every block
  long n_state = 8;
  long expand = 2;
  long d_conv = 4;
  ops::Discretization method = ops::Discretization::zoh;

  // adapter bottleneck (0 -> d_enc/8) and local path selection via `kind`
  long d_adapter = 0;
  mfgc::FreqSet freq_set = mfgc::FreqSet::full;

  // input extents: dual_branch consumes {1,1,img,img}; adapter models
  // consume {1,in_d,img,img}
  long img = 64;
  long in_d = 16;

  unsigned seed = 1234;

  bool is_adapter() const { return kind != ModelKind::dual_branch; }
  long enc_tokens_per_slice() const { return (img / patch) * (img / patch); }
  long enc_out_width() const { return proj_width == 0 ? d_enc : (proj_width < 0 ? d_enc : proj_width); }
};

/// Raises ConfigError when the field values are inconsistent.
void validate(const ModelConfig& cfg);

struct SpecStageBlock {
  Tensor ln_g, ln_b;
  mamba::MambaBlock blk;
};

struct Specialist {
  nn::Linear stem;
  std::vector<SpecStageBlock> stage1, stage2;
  nn::Linear merge;  // 2x2 token merge: 4*d_mamba -> 2*d_mamba
  Tensor ln_g, ln_b;
};

struct Encoder {
  nn::Linear embed;
  Tensor pos;
  std::vector<fusion::VitBlock> blocks;
  Tensor ln_g, ln_b;
  nn::Linear proj;  // unused when proj_width == 0
};

struct DecoderStage {
  Tensor up_w, up_b;  // conv_transpose weights [Cin, Cout*k3]
  long cout = 0;
  long k[3] = {1, 2, 2};  // kernel 2, stride 2 in-plane; depth untouched
  long s[3] = {1, 2, 2};
};

struct Decoder {
  std::vector<DecoderStage> stages;
  Tensor head_w, head_b;  // 1x1x1 conv to class logits
};

struct Model {
  ModelConfig cfg;
  nn::ParamRegistry params;

  Encoder enc;
  Specialist spec;  // dual_branch only
  fusion::Cba cba;  // dual_branch only
  std::vector<adapters::TpAdapter> msa_adapters, mlp_adapters;  // adapter kinds
  Decoder dec;

  std::vector<std::string> frozen_names;
  std::vector<std::pair<std::string, std::uint64_t>> freeze_hashes;

  /// dual_branch: {1,1,img,img} -> {n_classes,1,img,img};
  /// adapter kinds: {1,in_d,img,img} -> {n_classes,in_d,img,img}.
  Tensor forward(const Tensor& input) const;
};

Model make_model(const ModelConfig& cfg);

/// Marks the encoder backbone non-trainable and snapshots value hashes.
/// LoRA pairs, adapters, the optional projection, and the decoder stay
/// trainable.
void freeze_encoder(Model& m);

struct FreezeReport {
  bool ok = true;
  std::vector<std::string> changed;  // frozen params whose bytes moved
  double trainable_ratio = 1.0;      // trainable / total parameter count
};
FreezeReport check_frozen(const Model& m);

/// Binary checkpoint: "MSCK" magic, version, named shape table with payload
/// offsets, float32 little-endian payload, then the freeze-hash table.
void save_checkpoint(const Model& m, const std::string& path);
void load_checkpoint(Model& m, const std::string& path);

/// Parameters owned by the adapters of one host block (for budget checks).
long adapter_param_count(const Model& m, long block_index);
long encoder_block_param_count(const Model& m, long block_index);

}  // namespace mambaseg::models
