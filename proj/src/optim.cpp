#include "mambaseg/optim.hpp"

#include <cmath>

namespace mambaseg::optim {

float lr_at(const TrainConfig& cfg, long step) {
  if (cfg.warmup_steps < 0 || cfg.warmup_steps >= cfg.total_steps)
    throw ParameterError("lr_at: need 0 <= warmup_steps < total_steps");
  if (cfg.clip_norm <= 0.0f) throw ParameterError("lr_at: clip_norm must be positive");
  if (step < 0 || step > cfg.total_steps) throw ParameterError("lr_at: step out of range");
  if (step <= cfg.warmup_steps)
    return cfg.warmup_steps == 0
               ? cfg.base_lr
               : cfg.base_lr * static_cast<float>(step) / static_cast<float>(cfg.warmup_steps);
  double progress = static_cast<double>(step - cfg.warmup_steps) /
                    static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return static_cast<float>(cfg.base_lr * 0.5 * (1.0 + std::cos(M_PI * progress)));
}

double clip_global_norm(const std::vector<Tensor>& params, float max_norm) {
  if (max_norm <= 0.0f) throw ParameterError("clip: max_norm must be positive");
  double sq = 0.0;
  for (const Tensor& p : params) {
    if (!p.has_grad()) continue;
    const float* g = p.grad_data();
    for (long i = 0; i < p.numel(); ++i) sq += static_cast<double>(g[i]) * g[i];
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm) {
    float scale = static_cast<float>(max_norm / norm);
    for (const Tensor& p : params) {
      if (!p.has_grad()) continue;
      Tensor t = p;  // views share storage; mutate through a non-const handle
      t.grad_arr() *= scale;
    }
  }
  return norm;
}

AdamW::AdamW(std::vector<Tensor> params, float weight_decay, float beta1, float beta2, float eps)
    : params_(std::move(params)), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    m_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
    v_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
  }
}

void AdamW::step(float lr) {
  ++t_;
  float bc1 = 1.0f - std::pow(b1_, static_cast<float>(t_));
  float bc2 = 1.0f - std::pow(b2_, static_cast<float>(t_));
  for (size_t j = 0; j < params_.size(); ++j) {
    Tensor p = params_[j];
    if (!p.has_grad()) continue;
    float* w = p.data();
    const float* g = p.grad_data();
    float* m = m_[j].data();
    float* v = v_[j].data();
    for (long i = 0; i < p.numel(); ++i) {
      m[i] = b1_ * m[i] + (1.0f - b1_) * g[i];
      v[i] = b2_ * v[i] + (1.0f - b2_) * g[i] * g[i];
      float mhat = m[i] / bc1;
      float vhat = v[i] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w[i]);
    }
  }
}

std::vector<Tensor> trainable_params(const nn::ParamRegistry& reg) {
  std::vector<Tensor> out;
  for (const auto& p : reg.items())
    if (p.t.requires_grad()) out.push_back(p.t);
  return out;
}

}  // namespace mambaseg::optim
