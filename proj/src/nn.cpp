#include "mambaseg/nn.hpp"

#include <cmath>

namespace mambaseg::nn {

Tensor ParamRegistry::add(std::string name, Tensor t) {
  if (contains(name)) throw ParameterError("duplicate parameter name: " + name);
  params_.push_back(Param{std::move(name), t});
  return t;
}

Tensor ParamRegistry::find(const std::string& name) const {
  for (const Param& p : params_)
    if (p.name == name) return p.t;
  throw ParameterError("unknown parameter: " + name);
}

bool ParamRegistry::contains(const std::string& name) const {
  for (const Param& p : params_)
    if (p.name == name) return true;
  return false;
}

long ParamRegistry::total_count() const {
  long n = 0;
  for (const Param& p : params_) n += p.t.numel();
  return n;
}

long ParamRegistry::trainable_count() const {
  long n = 0;
  for (const Param& p : params_)
    if (p.t.requires_grad()) n += p.t.numel();
  return n;
}

Linear make_linear(ParamRegistry& reg, const std::string& name, long in, long out, bool bias,
                   std::mt19937_64& rng) {
  Linear l;
  l.w = reg.add(name + ".w", Tensor::kaiming({in, out}, in, rng));
  if (bias) l.b = reg.add(name + ".b", Tensor::zeros({out}, true));
  return l;
}

float inv_softplus(float y) {
  if (y <= 0.0f) throw ParameterError("inv_softplus: argument must be positive");
  // x = y + log(1 - e^{-y}), stable for both small and large y.
  return static_cast<float>(y + std::log(-std::expm1(-static_cast<double>(y))));
}

std::uint64_t fnv1a(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t hash_tensor(const Tensor& t) {
  return fnv1a(t.data(), sizeof(float) * static_cast<std::size_t>(t.numel()));
}

}  // namespace mambaseg::nn
