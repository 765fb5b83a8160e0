#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mambaseg/errors.hpp"

namespace mambaseg {

using Shape = std::vector<long>;

long numel_of(const Shape& s);
std::string shape_str(const Shape& s);

class GradTape;

/// Allocator pinning every buffer to one alignment class. Heap layout must
/// not influence which vectorized kernels Eigen picks, or repeated runs of
/// the same computation stop being bit-identical.
template <class T>
struct AlignedAlloc {
  using value_type = T;
  static constexpr std::size_t alignment = 64;

  AlignedAlloc() = default;
  template <class U>
  AlignedAlloc(const AlignedAlloc<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(alignment)));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t(alignment));
  }
  template <class U>
  bool operator==(const AlignedAlloc<U>&) const {
    return true;
  }
};

using FloatBuf = std::vector<float, AlignedAlloc<float>>;

/// Dense row-major float32 tensor with an optional gradient buffer.
/// Value storage is flat; shape carries the logical extents.
struct TensorImpl {
  Shape shape;
  FloatBuf value;
  FloatBuf grad;  // empty until a backward pass allocates it
  bool requires_grad = false;
  GradTape* tape = nullptr;  // tape that recorded the op producing this tensor

  long numel() const { return static_cast<long>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
  }
};

using MatView = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatView =
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ArrView = Eigen::Map<Eigen::ArrayXf>;
using ConstArrView = Eigen::Map<const Eigen::ArrayXf>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float v);
  /// U(-bound, bound); pass the model RNG for reproducibility.
  static Tensor uniform(Shape shape, float bound, std::mt19937_64& rng, bool requires_grad = false);
  /// Kaiming-style fan-in uniform init: U(+-sqrt(6/fan_in)).
  static Tensor kaiming(Shape shape, long fan_in, std::mt19937_64& rng, bool requires_grad = true);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  long ndim() const { return static_cast<long>(impl_->shape.size()); }
  long dim(long i) const { return impl_->shape[static_cast<size_t>(i)]; }
  long numel() const { return impl_->numel(); }

  float* data() { return impl_->value.data(); }
  const float* data() const { return impl_->value.data(); }
  float at(long i) const { return impl_->value[static_cast<size_t>(i)]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  bool has_grad() const { return !impl_->grad.empty(); }
  float* grad_data() { return impl_->grad.data(); }
  const float* grad_data() const { return impl_->grad.data(); }
  void ensure_grad() { impl_->ensure_grad(); }
  void zero_grad() {
    if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
  }

  ArrView arr() { return ArrView(data(), numel()); }
  ConstArrView arr() const { return ConstArrView(data(), numel()); }
  ArrView grad_arr() { return ArrView(grad_data(), numel()); }

  /// 2D matrix view; the tensor is reinterpreted as rows x cols (row-major).
  MatView mat(long rows, long cols) { return MatView(data(), rows, cols); }
  ConstMatView mat(long rows, long cols) const { return ConstMatView(data(), rows, cols); }
  /// Matrix view of a tensor whose logical shape already is 2D.
  MatView mat2d();
  ConstMatView mat2d() const;
  /// Rows = dim(0), cols = everything else (channel-major view of volumes).
  MatView mat_rowmajor0();
  ConstMatView mat_rowmajor0() const;

  bool all_finite() const;

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of executed differentiable operations. Replaying the tape
/// in reverse propagates gradients to every requires_grad leaf exactly once
/// per backward() call (grads are zeroed first, then accumulated).
class GradTape {
 public:
  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;
  ~GradTape();

  static GradTape* active();

  /// RAII activation. Tapes do not nest: activating while another tape is
  /// active is a logic error.
  class Scope {
   public:
    explicit Scope(GradTape& t);
    ~Scope();
    Scope(const Scope&) = delete;

   private:
    GradTape* prev_;
  };

  void record(std::vector<std::shared_ptr<TensorImpl>> inputs, std::shared_ptr<TensorImpl> output,
              std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = 1 and replays all entries in reverse.
  void backward(const Tensor& loss);

  size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    std::function<void()> fn;
  };
  std::vector<Entry> entries_;
};

/// True when an active tape exists and any input participates in it.
bool grad_tracking(std::initializer_list<const Tensor*> inputs);

/// True when gradients must be accumulated into this tensor during backward:
/// it is a trainable leaf or an intermediate of the given tape.
inline bool wants_grad(const std::shared_ptr<TensorImpl>& t, const GradTape* tape) {
  return t->requires_grad || t->tape == tape;
}

}  // namespace mambaseg
