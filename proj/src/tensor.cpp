#include "mambaseg/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace mambaseg {

long numel_of(const Shape& s) {
  long n = 1;
  for (long d : s) {
    if (d < 0) throw DimensionError("negative extent in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  long n = numel_of(shape);
  impl->shape = std::move(shape);
  impl->value.assign(static_cast<size_t>(n), 0.0f);
  impl->requires_grad = requires_grad;
  return Tensor(impl);
}

Tensor Tensor::full(Shape shape, float v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl()->value.begin(), t.impl()->value.end(), v);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<float> data, bool requires_grad) {
  long n = numel_of(shape);
  if (n != static_cast<long>(data.size()))
    throw DimensionError("from(): shape " + shape_str(shape) + " needs " + std::to_string(n) +
                         " values, got " + std::to_string(data.size()));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->value.assign(data.begin(), data.end());
  impl->requires_grad = requires_grad;
  return Tensor(impl);
}

Tensor Tensor::scalar(float v) { return from({1}, {v}); }

Tensor Tensor::uniform(Shape shape, float bound, std::mt19937_64& rng, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (auto& v : t.impl()->value) v = dist(rng);
  return t;
}

Tensor Tensor::kaiming(Shape shape, long fan_in, std::mt19937_64& rng, bool requires_grad) {
  if (fan_in <= 0) throw ParameterError("kaiming(): fan_in must be positive");
  float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
  return uniform(std::move(shape), bound, rng, requires_grad);
}

MatView Tensor::mat2d() {
  if (ndim() != 2) throw DimensionError("mat2d(): tensor is " + shape_str(shape()));
  return mat(dim(0), dim(1));
}

ConstMatView Tensor::mat2d() const {
  if (ndim() != 2) throw DimensionError("mat2d(): tensor is " + shape_str(shape()));
  return mat(dim(0), dim(1));
}

MatView Tensor::mat_rowmajor0() {
  if (ndim() < 1) throw DimensionError("mat_rowmajor0(): scalar tensor");
  long rows = dim(0);
  long cols = rows == 0 ? 0 : numel() / rows;
  return mat(rows, cols);
}

ConstMatView Tensor::mat_rowmajor0() const {
  if (ndim() < 1) throw DimensionError("mat_rowmajor0(): scalar tensor");
  long rows = dim(0);
  long cols = rows == 0 ? 0 : numel() / rows;
  return mat(rows, cols);
}

bool Tensor::all_finite() const {
  for (float v : impl_->value)
    if (!std::isfinite(v)) return false;
  return true;
}

namespace {
GradTape* g_active_tape = nullptr;
}

GradTape* GradTape::active() { return g_active_tape; }

GradTape::~GradTape() {
  // Break tape back-pointers so dangling GradTape* can never be dereferenced.
  for (auto& e : entries_) {
    if (e.output) e.output->tape = nullptr;
  }
}

GradTape::Scope::Scope(GradTape& t) : prev_(g_active_tape) {
  if (prev_ != nullptr) throw Error("GradTape::Scope: a tape is already active");
  g_active_tape = &t;
}

GradTape::Scope::~Scope() { g_active_tape = prev_; }

void GradTape::record(std::vector<std::shared_ptr<TensorImpl>> inputs,
                      std::shared_ptr<TensorImpl> output, std::function<void()> backward) {
  output->tape = this;
  entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(backward)});
}

void GradTape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw DimensionError("backward(): loss must be a scalar tensor");
  if (loss.impl()->tape != this) throw Error("backward(): loss was not produced on this tape");

  // Zero the grad of everything the tape touched, then seed the loss.
  std::unordered_set<TensorImpl*> seen;
  auto prime = [&](const std::shared_ptr<TensorImpl>& t) {
    if (!t || !seen.insert(t.get()).second) return;
    if (wants_grad(t, this)) {
      t->ensure_grad();
      std::fill(t->grad.begin(), t->grad.end(), 0.0f);
    }
  };
  for (auto& e : entries_) {
    for (auto& in : e.inputs) prime(in);
    prime(e.output);
  }
  loss.impl()->grad[0] = 1.0f;

  // Execution order is a valid topological order, so the reverse replay
  // visits every node after all of its consumers.
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
}

bool grad_tracking(std::initializer_list<const Tensor*> inputs) {
  GradTape* tape = GradTape::active();
  if (!tape) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && wants_grad(t->impl(), tape)) return true;
  }
  return false;
}

}  // namespace mambaseg
