#include <cmath>

#include "op_common.hpp"

namespace mambaseg::ops {

// ---- elementwise -----------------------------------------------------------

namespace {

constexpr float kInvSqrt2 = 0.70710678118654752f;
constexpr float kInvSqrt2Pi = 0.39894228040143268f;

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& t, const char* /*name*/, Fwd fwd, Bwd bwd) {
  Tensor out = Tensor::zeros(t.shape());
  fwd(t, out);
  Rec rec;
  if (rec.on(t)) {
    auto ti = t.impl(), oi = out.impl();
    rec.tape->record({ti}, oi, [ti, oi, bwd] { bwd(ti, oi); });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  out.arr() = a.arr() + b.arr();
  Rec rec;
  if (rec.any({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    bool na = rec.on(a), nb = rec.on(b);
    rec.tape->record({ai, bi}, oi, [ai, bi, oi, na, nb] {
      if (na) garr(ai) += garr(oi);
      if (nb) garr(bi) += garr(oi);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  out.arr() = a.arr() - b.arr();
  Rec rec;
  if (rec.any({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    bool na = rec.on(a), nb = rec.on(b);
    rec.tape->record({ai, bi}, oi, [ai, bi, oi, na, nb] {
      if (na) garr(ai) += garr(oi);
      if (nb) garr(bi) -= garr(oi);
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  out.arr() = a.arr() * b.arr();
  Rec rec;
  if (rec.any({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    bool na = rec.on(a), nb = rec.on(b);
    rec.tape->record({ai, bi}, oi, [ai, bi, oi, na, nb] {
      if (na) garr(ai) += garr(oi) * varr(bi);
      if (nb) garr(bi) += garr(oi) * varr(ai);
    });
  }
  return out;
}

Tensor scale(const Tensor& t, float s) {
  return unary_op(
      t, "scale", [s](const Tensor& in, Tensor& out) { out.arr() = in.arr() * s; },
      [s](const std::shared_ptr<TensorImpl>& ti, const std::shared_ptr<TensorImpl>& oi) {
        garr(ti) += garr(oi) * s;
      });
}

Tensor add_scalar(const Tensor& t, float s) {
  return unary_op(
      t, "add_scalar", [s](const Tensor& in, Tensor& out) { out.arr() = in.arr() + s; },
      [](const std::shared_ptr<TensorImpl>& ti, const std::shared_ptr<TensorImpl>& oi) {
        garr(ti) += garr(oi);
      });
}

Tensor neg(const Tensor& t) { return scale(t, -1.0f); }

Tensor relu(const Tensor& t) {
  return unary_op(
      t, "relu", [](const Tensor& in, Tensor& out) { out.arr() = in.arr().max(0.0f); },
      [](const std::shared_ptr<TensorImpl>& ti, const std::shared_ptr<TensorImpl>& oi) {
        garr(ti) += garr(oi) * (varr(ti) > 0.0f).cast<float>();
      });
}

Tensor gelu(const Tensor& t) {
  return unary_op(
      t, "gelu",
      [](const Tensor& in, Tensor& out) {
        const float* x = in.data();
        float* y = out.data();
        for (long i = 0; i < in.numel(); ++i)
          y[i] = 0.5f * x[i] * (1.0f + std::erf(x[i] * kInvSqrt2));
      },
      [](const std::shared_ptr<TensorImpl>& ti, const std::shared_ptr<TensorImpl>& oi) {
        const float* x = ti->value.data();
        const float* go = oi->grad.data();
        float* gx = ti->grad.data();
        for (size_t i = 0; i < ti->value.size(); ++i) {
          float cdf = 0.5f * (1.0f + std::erf(x[i] * kInvSqrt2));
          float pdf = kInvSqrt2Pi * std::exp(-0.5f * x[i] * x[i]);
          gx[i] += go[i] * (cdf + x[i] * pdf);
        }
      });
}

Tensor silu(const Tensor& t) {
  return unary_op(
      t, "silu",
      [](const Tensor& in, Tensor& out) {
        auto x = in.arr();
        out.arr() = x / (1.0f + (-x).exp());
      },
      [](const std::shared_ptr<TensorImpl>& ti, const std::shared_ptr<TensorImpl>& oi) {
        auto x = varr(ti);
        Eigen::ArrayXf s = 1.0f / (1.0f + (-x).exp());
        garr(ti) += garr(oi) * s * (1.0f + x * (1.0f - s));
      });
}

Tensor sigmoid(const Tensor& t) {
  Tensor out = Tensor::zeros(t.shape());
  out.arr() = 1.0f / (1.0f + (-t.arr()).exp());
  Rec rec;
  if (rec.on(t)) {
    auto ti = t.impl(), oi = out.impl();
    rec.tape->record({ti}, oi, [ti, oi] {
      auto s = varr(oi);
      garr(ti) += garr(oi) * s * (1.0f - s);
    });
  }
  return out;
}

Tensor exp(const Tensor& t) {
  Tensor out = Tensor::zeros(t.shape());
  out.arr() = t.arr().exp();
  Rec rec;
  if (rec.on(t)) {
    auto ti = t.impl(), oi = out.impl();
    rec.tape->record({ti}, oi, [ti, oi] { garr(ti) += garr(oi) * varr(oi); });
  }
  return out;
}

Tensor softplus(const Tensor& t) {
  return unary_op(
      t, "softplus",
      [](const Tensor& in, Tensor& out) {
        auto x = in.arr();
        out.arr() = x.max(0.0f) + ((-x.abs()).exp() + 1.0f).log();
      },
      [](const std::shared_ptr<TensorImpl>& ti, const std::shared_ptr<TensorImpl>& oi) {
        garr(ti) += garr(oi) / (1.0f + (-varr(ti)).exp());
      });
}

// ---- broadcasting over the last dimension ----------------------------------

namespace {
void check_rowvec(const Tensor& t, const Tensor& v, const char* op) {
  check_2d(t, op);
  long c = t.dim(1);
  if (v.numel() != c)
    throw DimensionError(std::string(op) + ": vector has " + std::to_string(v.numel()) +
                         " values, need " + std::to_string(c));
}
}  // namespace

Tensor add_rowvec(const Tensor& t, const Tensor& v) {
  check_rowvec(t, v, "add_rowvec");
  long r = t.dim(0), c = t.dim(1);
  Tensor out = Tensor::zeros(t.shape());
  ConstMatView tm = t.mat(r, c);
  out.mat(r, c) = tm.rowwise() + Eigen::Map<const Eigen::RowVectorXf>(v.data(), c);
  Rec rec;
  if (rec.any({&t, &v})) {
    auto ti = t.impl(), vi = v.impl(), oi = out.impl();
    bool nt = rec.on(t), nv = rec.on(v);
    rec.tape->record({ti, vi}, oi, [ti, vi, oi, nt, nv, r, c] {
      if (nt) garr(ti) += garr(oi);
      if (nv)
        Eigen::Map<Eigen::RowVectorXf>(vi->grad.data(), c) += gmat(oi, r, c).colwise().sum();
    });
  }
  return out;
}

Tensor mul_rowvec(const Tensor& t, const Tensor& v) {
  check_rowvec(t, v, "mul_rowvec");
  long r = t.dim(0), c = t.dim(1);
  Tensor out = Tensor::zeros(t.shape());
  out.mat(r, c).array() = t.mat(r, c).array().rowwise() *
                          Eigen::Map<const Eigen::Array<float, 1, Eigen::Dynamic>>(v.data(), c);
  Rec rec;
  if (rec.any({&t, &v})) {
    auto ti = t.impl(), vi = v.impl(), oi = out.impl();
    bool nt = rec.on(t), nv = rec.on(v);
    rec.tape->record({ti, vi}, oi, [ti, vi, oi, nt, nv, r, c] {
      auto go = gmat(oi, r, c);
      if (nt)
        gmat(ti, r, c).array() +=
            go.array().rowwise() *
            Eigen::Map<const Eigen::Array<float, 1, Eigen::Dynamic>>(vi->value.data(), c);
      if (nv)
        Eigen::Map<Eigen::RowVectorXf>(vi->grad.data(), c) +=
            (go.array() * vmat(ti, r, c).array()).colwise().sum().matrix();
    });
  }
  return out;
}

// ---- reductions -------------------------------------------------------------

Tensor sum_all(const Tensor& t) {
  Tensor out = Tensor::scalar(t.arr().sum());
  Rec rec;
  if (rec.on(t)) {
    auto ti = t.impl(), oi = out.impl();
    rec.tape->record({ti}, oi, [ti, oi] { garr(ti) += oi->grad[0]; });
  }
  return out;
}

Tensor mean_all(const Tensor& t) {
  if (t.numel() == 0) throw DimensionError("mean_all: empty tensor");
  float inv = 1.0f / static_cast<float>(t.numel());
  Tensor out = Tensor::scalar(t.arr().sum() * inv);
  Rec rec;
  if (rec.on(t)) {
    auto ti = t.impl(), oi = out.impl();
    rec.tape->record({ti}, oi, [ti, oi, inv] { garr(ti) += oi->grad[0] * inv; });
  }
  return out;
}

Tensor mean_rows(const Tensor& t) {
  check_2d(t, "mean_rows");
  long r = t.dim(0), c = t.dim(1);
  if (r == 0) throw DimensionError("mean_rows: zero rows");
  Tensor out = Tensor::zeros({1, c});
  out.mat(1, c) = t.mat(r, c).colwise().mean();
  Rec rec;
  if (rec.on(t)) {
    auto ti = t.impl(), oi = out.impl();
    float inv = 1.0f / static_cast<float>(r);
    rec.tape->record({ti}, oi, [ti, oi, r, c, inv] {
      gmat(ti, r, c).rowwise() += gmat(oi, 1, c).row(0) * inv;
    });
  }
  return out;
}

namespace {

template <bool IsMax>
Tensor extreme_rows(const Tensor& t, const char* name) {
  check_2d(t, name);
  long r = t.dim(0), c = t.dim(1);
  if (r == 0) throw DimensionError(std::string(name) + ": zero rows");
  Tensor out = Tensor::zeros({1, c});
  // argmin/argmax per column; ties resolve to the first row so backward
  // routes the gradient to exactly one element.
  auto idx = std::make_shared<std::vector<long>>(static_cast<size_t>(c));
  ConstMatView tm = t.mat(r, c);
  for (long j = 0; j < c; ++j) {
    long best = 0;
    for (long i = 1; i < r; ++i) {
      if (IsMax ? tm(i, j) > tm(best, j) : tm(i, j) < tm(best, j)) best = i;
    }
    (*idx)[static_cast<size_t>(j)] = best;
    out.data()[j] = tm(best, j);
  }
  Rec rec;
  if (rec.on(t)) {
    auto ti = t.impl(), oi = out.impl();
    rec.tape->record({ti}, oi, [ti, oi, idx, r, c] {
      auto gt = gmat(ti, r, c);
      for (long j = 0; j < c; ++j) gt((*idx)[static_cast<size_t>(j)], j) += oi->grad[j];
    });
  }
  return out;
}

}  // namespace

Tensor max_rows(const Tensor& t) { return extreme_rows<true>(t, "max_rows"); }
Tensor min_rows(const Tensor& t) { return extreme_rows<false>(t, "min_rows"); }

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  long m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dims " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  Tensor out = Tensor::zeros({m, n});
  out.mat(m, n).noalias() = a.mat(m, k) * b.mat(k, n);
  Rec rec;
  if (rec.any({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    bool na = rec.on(a), nb = rec.on(b);
    rec.tape->record({ai, bi}, oi, [ai, bi, oi, na, nb, m, k, n] {
      auto go = gmat(oi, m, n);
      if (na) gmat(ai, m, k).noalias() += go * vmat(bi, k, n).transpose();
      if (nb) gmat(bi, k, n).noalias() += vmat(ai, m, k).transpose() * go;
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul_nt");
  check_2d(b, "matmul_nt");
  long m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw DimensionError("matmul_nt: inner dims " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  Tensor out = Tensor::zeros({m, n});
  out.mat(m, n).noalias() = a.mat(m, k) * b.mat(n, k).transpose();
  Rec rec;
  if (rec.any({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    bool na = rec.on(a), nb = rec.on(b);
    rec.tape->record({ai, bi}, oi, [ai, bi, oi, na, nb, m, k, n] {
      auto go = gmat(oi, m, n);
      if (na) gmat(ai, m, k).noalias() += go * vmat(bi, n, k);
      if (nb) gmat(bi, n, k).noalias() += go.transpose() * vmat(ai, m, k);
    });
  }
  return out;
}

Tensor transpose(const Tensor& t) {
  check_2d(t, "transpose");
  long r = t.dim(0), c = t.dim(1);
  Tensor out = Tensor::zeros({c, r});
  out.mat(c, r) = t.mat(r, c).transpose();
  Rec rec;
  if (rec.on(t)) {
    auto ti = t.impl(), oi = out.impl();
    rec.tape->record({ti}, oi,
                     [ti, oi, r, c] { gmat(ti, r, c) += gmat(oi, c, r).transpose(); });
  }
  return out;
}

// ---- shape ------------------------------------------------------------------

Tensor reshape(const Tensor& t, Shape shape) {
  if (numel_of(shape) != t.numel())
    throw DimensionError("reshape: " + shape_str(t.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
  Tensor out = Tensor::zeros(std::move(shape));
  std::copy(t.data(), t.data() + t.numel(), out.data());
  Rec rec;
  if (rec.on(t)) {
    auto ti = t.impl(), oi = out.impl();
    rec.tape->record({ti}, oi, [ti, oi] { garr(ti) += garr(oi); });
  }
  return out;
}

Tensor select_rows(const Tensor& t, const std::vector<long>& idx) {
  check_2d(t, "select_rows");
  long r = t.dim(0), c = t.dim(1);
  long ro = static_cast<long>(idx.size());
  Tensor out = Tensor::zeros({ro, c});
  ConstMatView tm = t.mat(r, c);
  MatView om = out.mat(ro, c);
  for (long i = 0; i < ro; ++i) {
    long src = idx[static_cast<size_t>(i)];
    if (src < 0 || src >= r)
      throw DimensionError("select_rows: index " + std::to_string(src) + " out of range");
    om.row(i) = tm.row(src);
  }
  Rec rec;
  if (rec.on(t)) {
    auto ti = t.impl(), oi = out.impl();
    auto ix = std::make_shared<std::vector<long>>(idx);
    rec.tape->record({ti}, oi, [ti, oi, ix, r, c, ro] {
      auto gt = gmat(ti, r, c);
      auto go = gmat(oi, ro, c);
      for (long i = 0; i < ro; ++i) gt.row((*ix)[static_cast<size_t>(i)]) += go.row(i);
    });
  }
  return out;
}

Tensor scatter_rows(const Tensor& t, const std::vector<long>& idx, long rows) {
  check_2d(t, "scatter_rows");
  long r = t.dim(0), c = t.dim(1);
  if (r != static_cast<long>(idx.size()))
    throw DimensionError("scatter_rows: index count " + std::to_string(idx.size()) +
                         " != rows " + std::to_string(r));
  Tensor out = Tensor::zeros({rows, c});
  ConstMatView tm = t.mat(r, c);
  MatView om = out.mat(rows, c);
  std::vector<char> used(static_cast<size_t>(rows), 0);
  for (long i = 0; i < r; ++i) {
    long dst = idx[static_cast<size_t>(i)];
    if (dst < 0 || dst >= rows)
      throw DimensionError("scatter_rows: index " + std::to_string(dst) + " out of range");
    if (used[static_cast<size_t>(dst)]++)
      throw DimensionError("scatter_rows: duplicate destination " + std::to_string(dst));
    om.row(dst) = tm.row(i);
  }
  Rec rec;
  if (rec.on(t)) {
    auto ti = t.impl(), oi = out.impl();
    auto ix = std::make_shared<std::vector<long>>(idx);
    rec.tape->record({ti}, oi, [ti, oi, ix, r, c, rows] {
      auto gt = gmat(ti, r, c);
      auto go = gmat(oi, rows, c);
      for (long i = 0; i < r; ++i) gt.row(i) += go.row((*ix)[static_cast<size_t>(i)]);
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& t, long r0, long r1) {
  check_2d(t, "slice_rows");
  long r = t.dim(0), c = t.dim(1);
  if (r0 < 0 || r1 > r || r0 > r1)
    throw DimensionError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) +
                         ") of " + std::to_string(r) + " rows");
  long ro = r1 - r0;
  Tensor out = Tensor::zeros({ro, c});
  out.mat(ro, c) = t.mat(r, c).middleRows(r0, ro);
  Rec rec;
  if (rec.on(t)) {
    auto ti = t.impl(), oi = out.impl();
    rec.tape->record({ti}, oi, [ti, oi, r0, r, c, ro] {
      gmat(ti, r, c).middleRows(r0, ro) += gmat(oi, ro, c);
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& t, long c0, long c1) {
  check_2d(t, "slice_cols");
  long r = t.dim(0), c = t.dim(1);
  if (c0 < 0 || c1 > c || c0 > c1)
    throw DimensionError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") of " + std::to_string(c) + " cols");
  long co = c1 - c0;
  Tensor out = Tensor::zeros({r, co});
  out.mat(r, co) = t.mat(r, c).middleCols(c0, co);
  Rec rec;
  if (rec.on(t)) {
    auto ti = t.impl(), oi = out.impl();
    rec.tape->record({ti}, oi, [ti, oi, c0, r, c, co] {
      gmat(ti, r, c).middleCols(c0, co) += gmat(oi, r, co);
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& ts) {
  if (ts.empty()) throw DimensionError("concat_rows: empty list");
  long c = ts[0].dim(1), rtot = 0;
  for (const Tensor& t : ts) {
    check_2d(t, "concat_rows");
    if (t.dim(1) != c) throw DimensionError("concat_rows: column mismatch");
    rtot += t.dim(0);
  }
  Tensor out = Tensor::zeros({rtot, c});
  MatView om = out.mat(rtot, c);
  long off = 0;
  for (const Tensor& t : ts) {
    om.middleRows(off, t.dim(0)) = t.mat(t.dim(0), c);
    off += t.dim(0);
  }
  Rec rec;
  bool any = false;
  for (const Tensor& t : ts) any = any || rec.on(t);
  if (any) {
    std::vector<std::shared_ptr<TensorImpl>> ins;
    std::vector<char> need;
    std::vector<long> rows;
    for (const Tensor& t : ts) {
      ins.push_back(t.impl());
      need.push_back(rec.on(t) ? 1 : 0);
      rows.push_back(t.dim(0));
    }
    auto oi = out.impl();
    rec.tape->record(ins, oi, [ins, oi, need, rows, rtot, c] {
      auto go = gmat(oi, rtot, c);
      long pos = 0;
      for (size_t i = 0; i < ins.size(); ++i) {
        if (need[i]) gmat(ins[i], rows[i], c) += go.middleRows(pos, rows[i]);
        pos += rows[i];
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& ts) {
  if (ts.empty()) throw DimensionError("concat_cols: empty list");
  long r = ts[0].dim(0), ctot = 0;
  for (const Tensor& t : ts) {
    check_2d(t, "concat_cols");
    if (t.dim(0) != r) throw DimensionError("concat_cols: row mismatch");
    ctot += t.dim(1);
  }
  Tensor out = Tensor::zeros({r, ctot});
  MatView om = out.mat(r, ctot);
  long off = 0;
  for (const Tensor& t : ts) {
    om.middleCols(off, t.dim(1)) = t.mat(r, t.dim(1));
    off += t.dim(1);
  }
  Rec rec;
  bool any = false;
  for (const Tensor& t : ts) any = any || rec.on(t);
  if (any) {
    std::vector<std::shared_ptr<TensorImpl>> ins;
    std::vector<char> need;
    std::vector<long> cols;
    for (const Tensor& t : ts) {
      ins.push_back(t.impl());
      need.push_back(rec.on(t) ? 1 : 0);
      cols.push_back(t.dim(1));
    }
    auto oi = out.impl();
    rec.tape->record(ins, oi, [ins, oi, need, cols, r, ctot] {
      auto go = gmat(oi, r, ctot);
      long pos = 0;
      for (size_t i = 0; i < ins.size(); ++i) {
        if (need[i]) gmat(ins[i], r, cols[i]) += go.middleCols(pos, cols[i]);
        pos += cols[i];
      }
    });
  }
  return out;
}

}  // namespace mambaseg::ops
