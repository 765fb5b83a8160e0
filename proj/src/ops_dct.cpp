#include <cmath>

#include "op_common.hpp"

namespace mambaseg::ops {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using StridedMap =
    Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0,
               Eigen::OuterStride<>>;
using ConstStridedMap =
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0,
               Eigen::OuterStride<>>;

RowMat basis_matrix(long n) {
  RowMat m(n, n);
  for (long k = 0; k < n; ++k)
    for (long i = 0; i < n; ++i)
      m(k, i) = ops::dct_basis(n, k, i);
  return m;
}

// Applies the 1D transform along one spatial axis of a [D*H*W, C] buffer.
// `bases` enumerates the first row of every 1D fiber, `stride` is the row
// distance between consecutive fiber elements.
void apply_axis(const float* in, float* out, const RowMat& m, const std::vector<long>& bases,
                long stride, long c) {
  long n = m.rows();
  for (long b : bases) {
    ConstStridedMap src(in + b * c, n, c, Eigen::OuterStride<>(stride * c));
    StridedMap dst(out + b * c, n, c, Eigen::OuterStride<>(stride * c));
    dst.noalias() = m * src;
  }
}

struct Dct3Plan {
  long d, h, w, c;
  RowMat md, mh, mw;
  std::vector<long> bases_d, bases_h, bases_w;

  Dct3Plan(long d_, long h_, long w_, long c_)
      : d(d_), h(h_), w(w_), c(c_), md(basis_matrix(d_)), mh(basis_matrix(h_)),
        mw(basis_matrix(w_)) {
    bases_d.reserve(static_cast<size_t>(h * w));
    for (long hh = 0; hh < h; ++hh)
      for (long ww = 0; ww < w; ++ww) bases_d.push_back(hh * w + ww);
    bases_h.reserve(static_cast<size_t>(d * w));
    for (long dd = 0; dd < d; ++dd)
      for (long ww = 0; ww < w; ++ww) bases_h.push_back(dd * h * w + ww);
    bases_w.reserve(static_cast<size_t>(d * h));
    for (long dd = 0; dd < d; ++dd)
      for (long hh = 0; hh < h; ++hh) bases_w.push_back((dd * h + hh) * w);
  }

  void run(const float* in, float* out, bool inverse) const {
    std::vector<float> tmp(static_cast<size_t>(d * h * w * c));
    // Orthonormal basis: the inverse is the transpose.
    RowMat td = inverse ? md.transpose() : md;
    RowMat th = inverse ? mh.transpose() : mh;
    RowMat tw = inverse ? mw.transpose() : mw;
    apply_axis(in, tmp.data(), td, bases_d, h * w, c);
    apply_axis(tmp.data(), out, th, bases_h, w, c);
    std::copy(out, out + d * h * w * c, tmp.data());
    apply_axis(tmp.data(), out, tw, bases_w, 1, c);
  }
};

Tensor dct3_impl(const Tensor& t, long d, long h, long w, bool inverse, const char* name) {
  check_2d(t, name);
  long c = t.dim(1);
  if (t.dim(0) != d * h * w)
    throw DimensionError(std::string(name) + ": rows " + std::to_string(t.dim(0)) +
                         " != D*H*W = " + std::to_string(d * h * w));
  auto plan = std::make_shared<Dct3Plan>(d, h, w, c);
  Tensor out = Tensor::zeros(t.shape());
  plan->run(t.data(), out.data(), inverse);
  Rec rec;
  if (rec.on(t)) {
    auto ti = t.impl(), oi = out.impl();
    rec.tape->record({ti}, oi, [ti, oi, plan, inverse] {
      // Adjoint of an orthonormal transform is its inverse.
      std::vector<float> g(ti->grad.size());
      plan->run(oi->grad.data(), g.data(), !inverse);
      garr(ti) += ConstArrView(g.data(), static_cast<long>(g.size()));
    });
  }
  return out;
}

}  // namespace

float dct_basis(long n, long k, long i, bool raw) {
  if (n <= 0 || k < 0 || k >= n || i < 0 || i >= n)
    throw DimensionError("dct_basis: indices out of range");
  double v = std::cos(M_PI / static_cast<double>(n) * (static_cast<double>(i) + 0.5) *
                      static_cast<double>(k));
  if (!raw) v *= std::sqrt((k == 0 ? 1.0 : 2.0) / static_cast<double>(n));
  return static_cast<float>(v);
}

Tensor dct3(const Tensor& t, long d, long h, long w) {
  return dct3_impl(t, d, h, w, false, "dct3");
}

Tensor idct3(const Tensor& t, long d, long h, long w) {
  return dct3_impl(t, d, h, w, true, "idct3");
}

}  // namespace mambaseg::ops
