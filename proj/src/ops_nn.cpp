#include <cmath>

#include "op_common.hpp"

namespace mambaseg::ops {

Tensor softmax_lastdim(const Tensor& t) {
  check_2d(t, "softmax_lastdim");
  long r = t.dim(0), c = t.dim(1);
  Tensor out = Tensor::zeros(t.shape());
  ConstMatView tm = t.mat(r, c);
  MatView om = out.mat(r, c);
  for (long i = 0; i < r; ++i) {
    float m = tm.row(i).maxCoeff();
    om.row(i) = (tm.row(i).array() - m).exp().matrix();
    om.row(i) /= om.row(i).sum();
  }
  Rec rec;
  if (rec.on(t)) {
    auto ti = t.impl(), oi = out.impl();
    rec.tape->record({ti}, oi, [ti, oi, r, c] {
      auto y = vmat(oi, r, c);
      auto go = gmat(oi, r, c);
      auto gt = gmat(ti, r, c);
      for (long i = 0; i < r; ++i) {
        float dot = go.row(i).dot(y.row(i));
        gt.row(i).array() += (go.row(i).array() - dot) * y.row(i).array();
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& t, const Tensor& gamma, const Tensor& beta, float eps) {
  check_2d(t, "layer_norm");
  long r = t.dim(0), c = t.dim(1);
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("layer_norm: gamma/beta size must match last dim " + std::to_string(c));
  Tensor out = Tensor::zeros(t.shape());
  // Cache per-row mean and 1/std for backward.
  auto mu = std::make_shared<std::vector<float>>(static_cast<size_t>(r));
  auto rstd = std::make_shared<std::vector<float>>(static_cast<size_t>(r));
  ConstMatView tm = t.mat(r, c);
  MatView om = out.mat(r, c);
  Eigen::Map<const Eigen::ArrayXf> g(gamma.data(), c), b(beta.data(), c);
  float invc = 1.0f / static_cast<float>(c);
  for (long i = 0; i < r; ++i) {
    float m = tm.row(i).mean();
    float var = (tm.row(i).array() - m).square().sum() * invc;
    float rs = 1.0f / std::sqrt(var + eps);
    (*mu)[static_cast<size_t>(i)] = m;
    (*rstd)[static_cast<size_t>(i)] = rs;
    om.row(i) = (((tm.row(i).array() - m) * rs) * g.transpose() + b.transpose()).matrix();
  }
  Rec rec;
  if (rec.any({&t, &gamma, &beta})) {
    auto ti = t.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
    bool nt = rec.on(t), ng = rec.on(gamma), nb = rec.on(beta);
    rec.tape->record({ti, gi, bi}, oi, [ti, gi, bi, oi, nt, ng, nb, mu, rstd, r, c, invc] {
      auto x = vmat(ti, r, c);
      auto go = gmat(oi, r, c);
      Eigen::Map<const Eigen::ArrayXf> gam(gi->value.data(), c);
      for (long i = 0; i < r; ++i) {
        float m = (*mu)[static_cast<size_t>(i)];
        float rs = (*rstd)[static_cast<size_t>(i)];
        Eigen::ArrayXf xhat = (x.row(i).array() - m).transpose() * rs;
        Eigen::ArrayXf dy = go.row(i).transpose().array();
        if (ng) Eigen::Map<Eigen::ArrayXf>(gi->grad.data(), c) += dy * xhat;
        if (nb) Eigen::Map<Eigen::ArrayXf>(bi->grad.data(), c) += dy;
        if (nt) {
          Eigen::ArrayXf dxhat = dy * gam;
          float s1 = dxhat.sum();
          float s2 = (dxhat * xhat).sum();
          gmat(ti, r, c).row(i).array() +=
              (rs * (dxhat - invc * s1 - xhat * (invc * s2))).transpose();
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  check_2d(logits, "cross_entropy");
  long r = logits.dim(0), c = logits.dim(1);
  if (r != static_cast<long>(labels.size()))
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(r) + " rows");
  ConstMatView lm = logits.mat(r, c);
  // Keep probabilities for the backward pass.
  auto probs = std::make_shared<std::vector<float>>(static_cast<size_t>(r * c));
  MatView pm(probs->data(), r, c);
  double total = 0.0;
  for (long i = 0; i < r; ++i) {
    int lab = labels[static_cast<size_t>(i)];
    if (lab < 0 || lab >= c)
      throw DimensionError("cross_entropy: label " + std::to_string(lab) + " out of range");
    float m = lm.row(i).maxCoeff();
    pm.row(i) = (lm.row(i).array() - m).exp().matrix();
    float z = pm.row(i).sum();
    pm.row(i) /= z;
    total += std::log(z) + m - lm(i, lab);
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(r)));
  Rec rec;
  if (rec.on(logits)) {
    auto li = logits.impl(), oi = out.impl();
    auto labs = std::make_shared<std::vector<int>>(labels);
    rec.tape->record({li}, oi, [li, oi, probs, labs, r, c] {
      float s = oi->grad[0] / static_cast<float>(r);
      auto gl = gmat(li, r, c);
      ConstMatView pm2(probs->data(), r, c);
      for (long i = 0; i < r; ++i) {
        gl.row(i) += pm2.row(i) * s;
        gl(i, (*labs)[static_cast<size_t>(i)]) -= s;
      }
    });
  }
  return out;
}

Tensor soft_dice(const Tensor& probs, const std::vector<int>& labels, float eps) {
  check_2d(probs, "soft_dice");
  long r = probs.dim(0), c = probs.dim(1);
  if (c < 2) throw DimensionError("soft_dice: need at least 2 classes");
  if (r != static_cast<long>(labels.size()))
    throw DimensionError("soft_dice: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(r) + " rows");
  ConstMatView pm = probs.mat(r, c);
  long nfg = c - 1;
  std::vector<double> inter(static_cast<size_t>(nfg), 0.0), psum(static_cast<size_t>(nfg), 0.0),
      gsum(static_cast<size_t>(nfg), 0.0);
  for (long i = 0; i < r; ++i) {
    int lab = labels[static_cast<size_t>(i)];
    if (lab < 0 || lab >= c)
      throw DimensionError("soft_dice: label " + std::to_string(lab) + " out of range");
    for (long k = 1; k < c; ++k) {
      double p = pm(i, k);
      psum[static_cast<size_t>(k - 1)] += p;
      if (lab == k) {
        inter[static_cast<size_t>(k - 1)] += p;
        gsum[static_cast<size_t>(k - 1)] += 1.0;
      }
    }
  }
  double dice_mean = 0.0;
  for (long k = 0; k < nfg; ++k)
    dice_mean += (2.0 * inter[static_cast<size_t>(k)] + eps) /
                 (psum[static_cast<size_t>(k)] + gsum[static_cast<size_t>(k)] + eps);
  dice_mean /= static_cast<double>(nfg);
  Tensor out = Tensor::scalar(static_cast<float>(1.0 - dice_mean));
  Rec rec;
  if (rec.on(probs)) {
    auto pi = probs.impl(), oi = out.impl();
    auto labs = std::make_shared<std::vector<int>>(labels);
    auto is = std::make_shared<std::vector<double>>(inter);
    auto ps = std::make_shared<std::vector<double>>(psum);
    auto gs = std::make_shared<std::vector<double>>(gsum);
    rec.tape->record({pi}, oi, [pi, oi, labs, is, ps, gs, r, c, nfg, eps] {
      float up = oi->grad[0];
      auto gp = gmat(pi, r, c);
      // d dice_k / d p[i,k] = (2*[g=k]*(P+G+eps) - (2I+eps)) / (P+G+eps)^2
      for (long k = 1; k < c; ++k) {
        double denom = (*ps)[static_cast<size_t>(k - 1)] + (*gs)[static_cast<size_t>(k - 1)] + eps;
        double num = 2.0 * (*is)[static_cast<size_t>(k - 1)] + eps;
        float coef_bg = static_cast<float>(-num / (denom * denom));
        float coef_fg = static_cast<float>((2.0 * denom - num) / (denom * denom));
        float s = -up / static_cast<float>(nfg);
        for (long i = 0; i < r; ++i) {
          bool fg = (*labs)[static_cast<size_t>(i)] == k;
          gp(i, k) += s * (fg ? coef_fg : coef_bg);
        }
      }
    });
  }
  return out;
}

}  // namespace mambaseg::ops
