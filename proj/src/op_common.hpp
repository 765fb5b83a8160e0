#pragma once

#include "mambaseg/ops.hpp"
#include "mambaseg/tensor.hpp"

namespace mambaseg::ops {

/// Per-op recording context: resolves once at op entry which inputs need
/// gradients, so backward closures capture plain bools.
struct Rec {
  GradTape* tape = GradTape::active();
  bool on(const Tensor& t) const { return tape != nullptr && t.defined() && wants_grad(t.impl(), tape); }
  bool any(std::initializer_list<const Tensor*> ts) const {
    for (const Tensor* t : ts)
      if (on(*t)) return true;
    return false;
  }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline void check_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2)
    throw DimensionError(std::string(op) + ": expected 2D tensor, got " + shape_str(t.shape()));
}

inline ArrView garr(const std::shared_ptr<TensorImpl>& t) {
  return ArrView(t->grad.data(), static_cast<long>(t->grad.size()));
}
inline ConstArrView varr(const std::shared_ptr<TensorImpl>& t) {
  return ConstArrView(t->value.data(), static_cast<long>(t->value.size()));
}
inline MatView gmat(const std::shared_ptr<TensorImpl>& t, long r, long c) {
  return MatView(t->grad.data(), r, c);
}
inline ConstMatView vmat(const std::shared_ptr<TensorImpl>& t, long r, long c) {
  return ConstMatView(t->value.data(), r, c);
}

}  // namespace mambaseg::ops
