#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mambaseg/ops.hpp"
#include "mambaseg/tensor.hpp"

namespace mambaseg::nn {

struct Param {
  std::string name;
  Tensor t;
};

/// Ordered, named registry of model parameters. Insertion order is the
/// canonical order for optimizers and checkpoints.
class ParamRegistry {
 public:
  Tensor add(std::string name, Tensor t);
  const std::vector<Param>& items() const { return params_; }
  std::vector<Param>& items() { return params_; }
  Tensor find(const std::string& name) const;
  bool contains(const std::string& name) const;
  long total_count() const;
  long trainable_count() const;

 private:
  std::vector<Param> params_;
};

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // undefined when the layer has no bias

  Tensor operator()(const Tensor& x) const {
    Tensor y = ops::matmul(x, w);
    return b.defined() ? ops::add_rowvec(y, b) : y;
  }
  long in_dim() const { return w.dim(0); }
  long out_dim() const { return w.dim(1); }
};

/// Fan-in uniform weight init; bias (when present) starts at zero.
Linear make_linear(ParamRegistry& reg, const std::string& name, long in, long out, bool bias,
                   std::mt19937_64& rng);

/// Numerically-stable inverse of softplus: x such that log(1+e^x) = y.
float inv_softplus(float y);

/// FNV-1a 64-bit hash over raw bytes; used for parameter freeze snapshots.
std::uint64_t fnv1a(const void* data, std::size_t len);
std::uint64_t hash_tensor(const Tensor& t);

}  // namespace mambaseg::nn
