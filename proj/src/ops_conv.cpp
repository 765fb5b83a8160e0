#include <cmath>

#include "op_common.hpp"

namespace mambaseg::ops {

namespace {

// Geometry of a 3D convolution: image extents (D,H,W), kernel, stride, pad,
// dilation, and the derived output extents. im2col/col2im are adjoint linear
// maps between image space {C, D*H*W} and column space {C*k3, Do*Ho*Wo}.
struct Geom3 {
  long C, D, H, W;
  long kd, kh, kw;
  long sd, sh, sw;
  long pd, ph, pw;
  long dd, dh, dw;
  long Do, Ho, Wo;

  static long out_extent(long n, long k, long s, long p, long dil) {
    long span = n + 2 * p - dil * (k - 1) - 1;
    if (span < 0 || s <= 0) throw DimensionError("conv3d: kernel does not fit input");
    return span / s + 1;
  }

  Geom3(long c, long d, long h, long w, long kd_, long kh_, long kw_, const Conv3dGeom& g)
      : C(c), D(d), H(h), W(w), kd(kd_), kh(kh_), kw(kw_), sd(g.stride[0]), sh(g.stride[1]),
        sw(g.stride[2]), pd(g.pad[0]), ph(g.pad[1]), pw(g.pad[2]), dd(g.dil[0]), dh(g.dil[1]),
        dw(g.dil[2]) {
    Do = out_extent(D, kd, sd, pd, dd);
    Ho = out_extent(H, kh, sh, ph, dh);
    Wo = out_extent(W, kw, sw, pw, dw);
  }

  long cols_rows() const { return C * kd * kh * kw; }
  long cols_cols() const { return Do * Ho * Wo; }
};

// cols[((c*kd+zd)*kh+zh)*kw+zw, (od*Ho+oh)*Wo+ow] =
//   x[c, od*sd-pd+zd*dd, oh*sh-ph+zh*dh, ow*sw-pw+zw*dw]  (0 outside).
void im2col(const float* x, const Geom3& g, float* cols) {
  const long ncol = g.cols_cols();
  long row = 0;
  for (long c = 0; c < g.C; ++c) {
    const float* xc = x + c * g.D * g.H * g.W;
    for (long zd = 0; zd < g.kd; ++zd)
      for (long zh = 0; zh < g.kh; ++zh)
        for (long zw = 0; zw < g.kw; ++zw, ++row) {
          float* dst = cols + row * ncol;
          for (long od = 0; od < g.Do; ++od) {
            long id = od * g.sd - g.pd + zd * g.dd;
            for (long oh = 0; oh < g.Ho; ++oh) {
              long ih = oh * g.sh - g.ph + zh * g.dh;
              float* drow = dst + (od * g.Ho + oh) * g.Wo;
              if (id < 0 || id >= g.D || ih < 0 || ih >= g.H) {
                std::fill(drow, drow + g.Wo, 0.0f);
                continue;
              }
              const float* src = xc + (id * g.H + ih) * g.W;
              long iw0 = -g.pw + zw * g.dw;
              for (long ow = 0; ow < g.Wo; ++ow) {
                long iw = iw0 + ow * g.sw;
                drow[ow] = (iw >= 0 && iw < g.W) ? src[iw] : 0.0f;
              }
            }
          }
        }
  }
}

// Adjoint of im2col: scatter-add column entries back into image space.
void col2im(const float* cols, const Geom3& g, float* x) {
  const long ncol = g.cols_cols();
  long row = 0;
  for (long c = 0; c < g.C; ++c) {
    float* xc = x + c * g.D * g.H * g.W;
    for (long zd = 0; zd < g.kd; ++zd)
      for (long zh = 0; zh < g.kh; ++zh)
        for (long zw = 0; zw < g.kw; ++zw, ++row) {
          const float* src = cols + row * ncol;
          for (long od = 0; od < g.Do; ++od) {
            long id = od * g.sd - g.pd + zd * g.dd;
            if (id < 0 || id >= g.D) continue;
            for (long oh = 0; oh < g.Ho; ++oh) {
              long ih = oh * g.sh - g.ph + zh * g.dh;
              if (ih < 0 || ih >= g.H) continue;
              const float* srow = src + (od * g.Ho + oh) * g.Wo;
              float* drow = xc + (id * g.H + ih) * g.W;
              long iw0 = -g.pw + zw * g.dw;
              for (long ow = 0; ow < g.Wo; ++ow) {
                long iw = iw0 + ow * g.sw;
                if (iw >= 0 && iw < g.W) drow[iw] += srow[ow];
              }
            }
          }
        }
  }
}

void check_volume(const Tensor& x, const char* op) {
  if (x.ndim() != 4)
    throw DimensionError(std::string(op) + ": expected {C,D,H,W}, got " + shape_str(x.shape()));
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, long kd, long kh, long kw,
              const Conv3dGeom& geom) {
  check_volume(x, "conv3d");
  check_2d(w, "conv3d");
  Geom3 g(x.dim(0), x.dim(1), x.dim(2), x.dim(3), kd, kh, kw, geom);
  long cout = w.dim(0);
  if (w.dim(1) != g.cols_rows())
    throw DimensionError("conv3d: weight cols " + std::to_string(w.dim(1)) + " != Cin*k3 " +
                         std::to_string(g.cols_rows()));
  if (bias.defined() && bias.numel() != cout)
    throw DimensionError("conv3d: bias size != Cout");

  std::vector<float> cols(static_cast<size_t>(g.cols_rows() * g.cols_cols()));
  im2col(x.data(), g, cols.data());
  Tensor out = Tensor::zeros({cout, g.Do, g.Ho, g.Wo});
  {
    MatView om = out.mat(cout, g.cols_cols());
    om.noalias() = w.mat2d() * ConstMatView(cols.data(), g.cols_rows(), g.cols_cols());
    if (bias.defined())
      om.colwise() += Eigen::Map<const Eigen::VectorXf>(bias.data(), cout);
  }

  Rec rec;
  if (rec.any({&x, &w, &bias})) {
    auto xi = x.impl(), wi = w.impl(), oi = out.impl();
    auto bi = bias.defined() ? bias.impl() : nullptr;
    bool nx = rec.on(x), nw = rec.on(w), nb = bias.defined() && rec.on(bias);
    std::vector<std::shared_ptr<TensorImpl>> ins{xi, wi};
    if (bi) ins.push_back(bi);
    rec.tape->record(ins, oi, [xi, wi, bi, oi, nx, nw, nb, g, cout] {
      ConstMatView go(oi->grad.data(), cout, g.cols_cols());
      if (nb)
        Eigen::Map<Eigen::VectorXf>(bi->grad.data(), cout) += go.rowwise().sum();
      if (nw || nx) {
        std::vector<float> cols2(static_cast<size_t>(g.cols_rows() * g.cols_cols()));
        if (nw) {
          im2col(xi->value.data(), g, cols2.data());
          gmat(wi, cout, g.cols_rows()).noalias() +=
              go * ConstMatView(cols2.data(), g.cols_rows(), g.cols_cols()).transpose();
        }
        if (nx) {
          MatView dcols(cols2.data(), g.cols_rows(), g.cols_cols());
          dcols.noalias() = vmat(wi, cout, g.cols_rows()).transpose() * go;
          col2im(cols2.data(), g, xi->grad.data());
        }
      }
    });
  }
  return out;
}

Tensor conv_transpose3d(const Tensor& x, const Tensor& w, const Tensor& bias, long cout, long kd,
                        long kh, long kw, long sd, long sh, long sw) {
  check_volume(x, "conv_transpose3d");
  check_2d(w, "conv_transpose3d");
  long cin = x.dim(0), di = x.dim(1), hi = x.dim(2), wi_ = x.dim(3);
  if (w.dim(0) != cin || w.dim(1) != cout * kd * kh * kw)
    throw DimensionError("conv_transpose3d: weight must be [Cin, Cout*k3], got " +
                         shape_str(w.shape()));
  if (bias.defined() && bias.numel() != cout)
    throw DimensionError("conv_transpose3d: bias size != Cout");
  long dout = (di - 1) * sd + kd, hout = (hi - 1) * sh + kh, wout = (wi_ - 1) * sw + kw;
  // The adjoint view: a forward conv from the (big) output back to the input.
  Conv3dGeom cg;
  cg.stride[0] = sd;
  cg.stride[1] = sh;
  cg.stride[2] = sw;
  Geom3 g(cout, dout, hout, wout, kd, kh, kw, cg);
  if (g.Do != di || g.Ho != hi || g.Wo != wi_)
    throw DimensionError("conv_transpose3d: geometry mismatch");

  long ni = di * hi * wi_;
  std::vector<float> cols(static_cast<size_t>(g.cols_rows() * ni));
  MatView cm(cols.data(), g.cols_rows(), ni);
  cm.noalias() = w.mat2d().transpose() * x.mat(cin, ni);
  Tensor out = Tensor::zeros({cout, dout, hout, wout});
  col2im(cols.data(), g, out.data());
  if (bias.defined()) {
    MatView om = out.mat(cout, dout * hout * wout);
    om.colwise() += Eigen::Map<const Eigen::VectorXf>(bias.data(), cout);
  }

  Rec rec;
  if (rec.any({&x, &w, &bias})) {
    auto xi = x.impl(), wim = w.impl(), oi = out.impl();
    auto bi = bias.defined() ? bias.impl() : nullptr;
    bool nx = rec.on(x), nw = rec.on(w), nb = bias.defined() && rec.on(bias);
    std::vector<std::shared_ptr<TensorImpl>> ins{xi, wim};
    if (bi) ins.push_back(bi);
    rec.tape->record(ins, oi, [xi, wim, bi, oi, nx, nw, nb, g, cin, cout, ni, dout, hout, wout] {
      if (nb)
        Eigen::Map<Eigen::VectorXf>(bi->grad.data(), cout) +=
            ConstMatView(oi->grad.data(), cout, dout * hout * wout).rowwise().sum();
      if (nx || nw) {
        std::vector<float> dcols(static_cast<size_t>(g.cols_rows() * ni));
        im2col(oi->grad.data(), g, dcols.data());
        ConstMatView dcm(dcols.data(), g.cols_rows(), ni);
        if (nx) gmat(xi, cin, ni).noalias() += vmat(wim, cin, g.cols_rows()) * dcm;
        if (nw) gmat(wim, cin, g.cols_rows()).noalias() += vmat(xi, cin, ni) * dcm.transpose();
      }
    });
  }
  return out;
}

Tensor conv3d_depthwise(const Tensor& x, const Tensor& w, long dilation) {
  check_volume(x, "conv3d_depthwise");
  check_2d(w, "conv3d_depthwise");
  long c = x.dim(0), d = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (w.dim(0) != c || w.dim(1) != 27)
    throw DimensionError("conv3d_depthwise: weight must be [C, 27], got " + shape_str(w.shape()));
  if (dilation < 1) throw ParameterError("conv3d_depthwise: dilation must be >= 1");
  Tensor out = Tensor::zeros(x.shape());

  // y[c,od,oh,ow] = sum_z w[c,z] * x[c, od+(zd-1)*dil, oh+(zh-1)*dil, ow+(zw-1)*dil]
  auto apply = [c, d, h, wd, dilation](const float* src, const float* ker, float* dst,
                                       bool transposed) {
    for (long ch = 0; ch < c; ++ch) {
      const float* xc = src + ch * d * h * wd;
      float* yc = dst + ch * d * h * wd;
      for (long zd = 0; zd < 3; ++zd)
        for (long zh = 0; zh < 3; ++zh)
          for (long zw = 0; zw < 3; ++zw) {
            float kv = ker[ch * 27 + (zd * 3 + zh) * 3 + zw];
            if (kv == 0.0f) continue;
            long od_ = (zd - 1) * dilation, oh_ = (zh - 1) * dilation, ow_ = (zw - 1) * dilation;
            if (transposed) {
              od_ = -od_;
              oh_ = -oh_;
              ow_ = -ow_;
            }
            long d0 = std::max(0L, -od_), d1 = std::min(d, d - od_);
            long h0 = std::max(0L, -oh_), h1 = std::min(h, h - oh_);
            long w0 = std::max(0L, -ow_), w1 = std::min(wd, wd - ow_);
            for (long dd = d0; dd < d1; ++dd)
              for (long hh = h0; hh < h1; ++hh) {
                const float* srow = xc + ((dd + od_) * h + (hh + oh_)) * wd + (w0 + ow_);
                float* drow = yc + (dd * h + hh) * wd + w0;
                long n = w1 - w0;
                Eigen::Map<Eigen::ArrayXf>(drow, n) +=
                    kv * Eigen::Map<const Eigen::ArrayXf>(srow, n);
              }
          }
    }
  };
  apply(x.data(), w.data(), out.data(), false);

  Rec rec;
  if (rec.any({&x, &w})) {
    auto xi = x.impl(), wim = w.impl(), oi = out.impl();
    bool nx = rec.on(x), nw = rec.on(w);
    rec.tape->record({xi, wim}, oi, [xi, wim, oi, nx, nw, apply, c, d, h, wd, dilation] {
      if (nx) apply(oi->grad.data(), wim->value.data(), xi->grad.data(), true);
      if (nw) {
        // dw[c,z] = sum over valid positions x[c, i+off] * dy[c, i]
        const float* xv = xi->value.data();
        const float* go = oi->grad.data();
        float* gw = wim->grad.data();
        for (long ch = 0; ch < c; ++ch) {
          const float* xc = xv + ch * d * h * wd;
          const float* yc = go + ch * d * h * wd;
          for (long zd = 0; zd < 3; ++zd)
            for (long zh = 0; zh < 3; ++zh)
              for (long zw = 0; zw < 3; ++zw) {
                long od_ = (zd - 1) * dilation, oh_ = (zh - 1) * dilation,
                     ow_ = (zw - 1) * dilation;
                long d0 = std::max(0L, -od_), d1 = std::min(d, d - od_);
                long h0 = std::max(0L, -oh_), h1 = std::min(h, h - oh_);
                long w0 = std::max(0L, -ow_), w1 = std::min(wd, wd - ow_);
                double acc = 0.0;
                for (long dd = d0; dd < d1; ++dd)
                  for (long hh = h0; hh < h1; ++hh) {
                    const float* srow = xc + ((dd + od_) * h + (hh + oh_)) * wd + (w0 + ow_);
                    const float* drow = yc + (dd * h + hh) * wd + w0;
                    long n = w1 - w0;
                    acc += Eigen::Map<const Eigen::ArrayXf>(srow, n)
                               .cwiseProduct(Eigen::Map<const Eigen::ArrayXf>(drow, n))
                               .sum();
                  }
                gw[ch * 27 + (zd * 3 + zh) * 3 + zw] += static_cast<float>(acc);
              }
        }
      }
    });
  }
  return out;
}

Tensor conv1d_depthwise_causal(const Tensor& x, const Tensor& w, const Tensor& bias,
                               long seq_len) {
  check_2d(x, "conv1d_depthwise_causal");
  check_2d(w, "conv1d_depthwise_causal");
  long t = x.dim(0), c = x.dim(1), k = w.dim(1);
  if (w.dim(0) != c) throw DimensionError("conv1d_depthwise_causal: weight rows != channels");
  if (bias.defined() && bias.numel() != c)
    throw DimensionError("conv1d_depthwise_causal: bias size != channels");
  if (seq_len <= 0 || t % seq_len != 0)
    throw DimensionError("conv1d_depthwise_causal: rows " + std::to_string(t) +
                         " not a multiple of seq_len " + std::to_string(seq_len));
  Tensor out = Tensor::zeros(x.shape());
  ConstMatView xm = x.mat(t, c);
  MatView om = out.mat(t, c);
  ConstMatView wm = w.mat(c, k);
  for (long tt = 0; tt < t; ++tt) {
    long start = (tt / seq_len) * seq_len;
    for (long kk = 0; kk < k; ++kk) {
      long src = tt - (k - 1) + kk;
      if (src < start) continue;
      om.row(tt).array() += xm.row(src).array() * wm.col(kk).transpose().array();
    }
    if (bias.defined())
      om.row(tt) += Eigen::Map<const Eigen::RowVectorXf>(bias.data(), c);
  }
  Rec rec;
  if (rec.any({&x, &w, &bias})) {
    auto xi = x.impl(), wim = w.impl(), oi = out.impl();
    auto bi = bias.defined() ? bias.impl() : nullptr;
    bool nx = rec.on(x), nw = rec.on(w), nb = bias.defined() && rec.on(bias);
    std::vector<std::shared_ptr<TensorImpl>> ins{xi, wim};
    if (bi) ins.push_back(bi);
    rec.tape->record(ins, oi, [xi, wim, bi, oi, nx, nw, nb, t, c, k, seq_len] {
      ConstMatView go(oi->grad.data(), t, c);
      ConstMatView xm2(xi->value.data(), t, c);
      ConstMatView wm2(wim->value.data(), c, k);
      if (nb)
        Eigen::Map<Eigen::RowVectorXf>(bi->grad.data(), c) += go.colwise().sum();
      for (long tt = 0; tt < t; ++tt) {
        long start = (tt / seq_len) * seq_len;
        for (long kk = 0; kk < k; ++kk) {
          long src = tt - (k - 1) + kk;
          if (src < start) continue;
          if (nx)
            gmat(xi, t, c).row(src).array() +=
                go.row(tt).array() * wm2.col(kk).transpose().array();
          if (nw)
            gmat(wim, c, k).col(kk).array() +=
                (go.row(tt).array() * xm2.row(src).array()).transpose();
        }
      }
    });
  }
  return out;
}

Tensor patchify3d(const Tensor& x, long pd, long ph, long pw) {
  check_volume(x, "patchify3d");
  long c = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (pd <= 0 || ph <= 0 || pw <= 0 || d % pd || h % ph || w % pw)
    throw DimensionError("patchify3d: patch (" + std::to_string(pd) + "," + std::to_string(ph) +
                         "," + std::to_string(pw) + ") does not tile " + shape_str(x.shape()));
  long gd = d / pd, gh = h / ph, gw = w / pw;
  long tcount = gd * gh * gw, tdim = c * pd * ph * pw;
  Tensor out = Tensor::zeros({tcount, tdim});
  const float* xv = x.data();
  float* ov = out.data();
  for (long td = 0; td < gd; ++td)
    for (long th = 0; th < gh; ++th)
      for (long tw = 0; tw < gw; ++tw) {
        float* dst = ov + ((td * gh + th) * gw + tw) * tdim;
        long o = 0;
        for (long ch = 0; ch < c; ++ch)
          for (long zd = 0; zd < pd; ++zd)
            for (long zh = 0; zh < ph; ++zh) {
              const float* src =
                  xv + ((ch * d + td * pd + zd) * h + th * ph + zh) * w + tw * pw;
              std::copy(src, src + pw, dst + o);
              o += pw;
            }
      }
  Rec rec;
  if (rec.on(x)) {
    auto xi = x.impl(), oi = out.impl();
    rec.tape->record({xi}, oi, [xi, oi, c, d, h, w, pd, ph, pw, gd, gh, gw, tdim] {
      float* gx = xi->grad.data();
      const float* go = oi->grad.data();
      for (long td = 0; td < gd; ++td)
        for (long th = 0; th < gh; ++th)
          for (long tw = 0; tw < gw; ++tw) {
            const float* src = go + ((td * gh + th) * gw + tw) * tdim;
            long o = 0;
            for (long ch = 0; ch < c; ++ch)
              for (long zd = 0; zd < pd; ++zd)
                for (long zh = 0; zh < ph; ++zh) {
                  float* dst = gx + ((ch * d + td * pd + zd) * h + th * ph + zh) * w + tw * pw;
                  for (long i = 0; i < pw; ++i) dst[i] += src[o + i];
                  o += pw;
                }
          }
    });
  }
  return out;
}

}  // namespace mambaseg::ops
