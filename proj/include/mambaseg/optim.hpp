#pragma once

#include <vector>

#include "mambaseg/nn.hpp"
#include "mambaseg/tensor.hpp"

namespace mambaseg::optim {

struct TrainConfig {
  float base_lr = 2e-4f;
  long warmup_steps = 50;
  long total_steps = 1000;
  float clip_norm = 1.0f;
  long batch = 4;
  float weight_decay = 0.01f;
  unsigned seed = 0;
};

/// Linear warmup 0 -> base_lr over warmup_steps, then cosine base_lr -> 0 at
/// total_steps. Continuous at the junction; steps outside [0, total] throw.
float lr_at(const TrainConfig& cfg, long step);

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the pre-clip norm. Parameters without gradients are skipped.
double clip_global_norm(const std::vector<Tensor>& params, float max_norm);

/// Decoupled-weight-decay Adam over a fixed parameter list (the trainable
/// subset of a registry). Moments are kept per parameter; `step` consumes
/// the current gradients.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, float weight_decay, float beta1 = 0.9f, float beta2 = 0.999f,
        float eps = 1e-8f);

  void step(float lr);
  long steps_taken() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  float wd_, b1_, b2_, eps_;
  long t_ = 0;
};

/// The requires_grad subset of a registry, in registry order.
std::vector<Tensor> trainable_params(const nn::ParamRegistry& reg);

}  // namespace mambaseg::optim
