#include <cmath>

#include "op_common.hpp"

namespace mambaseg::ops {

namespace {

using ArrXX = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ArrXXMap = Eigen::Map<ArrXX>;
using ConstArrXXMap = Eigen::Map<const ArrXX>;
using RowMatMap = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstRowMatMap =
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

constexpr float kSmallZ = 1e-3f;

// abar/beta for one timestep, all (channel, state) pairs at once.
// z(c,n) = delta(c) * a(c,n).
void discretize_step(Discretization method, const Eigen::ArrayXf& dcol, ConstArrXXMap a, ArrXX& z,
                     ArrXX& abar, ArrXX& beta) {
  z = a.colwise() * dcol;
  if (method == Discretization::zoh) {
    abar = z.exp();
    // beta = delta * phi(z), phi(z) = (e^z - 1)/z with a series near 0.
    ArrXX phi = (z.abs() < kSmallZ)
                    .select(1.0f + z / 2.0f + z.square() / 6.0f, (abar - 1.0f) / z);
    beta = phi.colwise() * dcol;
  } else {
    ArrXX q = 1.0f - z / 2.0f;
    if ((q.abs() < 1e-12f).any())
      throw SingularityError("selective_scan: bilinear transform pole (delta*a near 2)");
    abar = (1.0f + z / 2.0f) / q;
    beta = q.inverse().colwise() * dcol;
  }
}

}  // namespace

Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& bsel, const Tensor& csel,
                      const Tensor& a, Discretization method, long seq_len) {
  check_2d(u, "selective_scan");
  check_2d(delta, "selective_scan");
  check_2d(bsel, "selective_scan");
  check_2d(csel, "selective_scan");
  check_2d(a, "selective_scan");
  long t = u.dim(0), c = u.dim(1), n = a.dim(1);
  if (delta.dim(0) != t || delta.dim(1) != c)
    throw DimensionError("selective_scan: delta shape " + shape_str(delta.shape()));
  if (bsel.dim(0) != t || bsel.dim(1) != n || csel.dim(0) != t || csel.dim(1) != n)
    throw DimensionError("selective_scan: B/C selection shapes must be [T,N]");
  if (a.dim(0) != c)
    throw DimensionError("selective_scan: A rows " + std::to_string(a.dim(0)) +
                         " != channels " + std::to_string(c));
  if (seq_len <= 0 || t % seq_len != 0)
    throw DimensionError("selective_scan: rows " + std::to_string(t) +
                         " not a multiple of seq_len " + std::to_string(seq_len));

  Tensor out = Tensor::zeros({t, c});
  Rec rec;
  bool recording = rec.any({&u, &delta, &bsel, &csel, &a});
  size_t slab = static_cast<size_t>(c * n);

  // Saved for backward: per-step discrete coefficients and states.
  auto abar_all = std::make_shared<std::vector<float>>();
  auto beta_all = std::make_shared<std::vector<float>>();
  auto h_all = std::make_shared<std::vector<float>>();
  if (recording) {
    abar_all->resize(static_cast<size_t>(t) * slab);
    beta_all->resize(static_cast<size_t>(t) * slab);
    h_all->resize(static_cast<size_t>(t) * slab);
  }

  ConstArrXXMap am(a.data(), c, n);
  ConstMatView um = u.mat(t, c), dm = delta.mat(t, c);
  ConstMatView bm = bsel.mat(t, n), cm = csel.mat(t, n);
  MatView om = out.mat(t, c);

  ArrXX h = ArrXX::Zero(c, n), z(c, n), abar(c, n), beta(c, n);
  Eigen::ArrayXf dcol(c), ucol(c);
  for (long tt = 0; tt < t; ++tt) {
    if (tt % seq_len == 0) h.setZero();
    dcol = dm.row(tt).transpose().array();
    ucol = um.row(tt).transpose().array();
    discretize_step(method, dcol, am, z, abar, beta);
    Eigen::Map<const Eigen::Array<float, 1, Eigen::Dynamic>> brow(bm.row(tt).data(), n);
    h = abar * h + (beta.colwise() * ucol).rowwise() * brow;
    om.row(tt).noalias() =
        (RowMatMap(h.data(), c, n) * cm.row(tt).transpose()).transpose();
    if (recording) {
      std::copy(abar.data(), abar.data() + slab, abar_all->data() + tt * slab);
      std::copy(beta.data(), beta.data() + slab, beta_all->data() + tt * slab);
      std::copy(h.data(), h.data() + slab, h_all->data() + tt * slab);
    }
  }

  if (recording) {
    auto ui = u.impl(), di = delta.impl(), bi = bsel.impl(), ci = csel.impl(), ai = a.impl(),
         oi = out.impl();
    bool nu = rec.on(u), nd = rec.on(delta), nb = rec.on(bsel), nc = rec.on(csel), na = rec.on(a);
    rec.tape->record(
        {ui, di, bi, ci, ai}, oi,
        [=] {
          ConstMatView go(oi->grad.data(), t, c);
          ConstMatView um2(ui->value.data(), t, c), dm2(di->value.data(), t, c);
          ConstMatView bm2(bi->value.data(), t, n), cm2(ci->value.data(), t, n);
          ConstArrXXMap am2(ai->value.data(), c, n);
          ArrXX carry = ArrXX::Zero(c, n), dh(c, n), z2(c, n), work(c, n);
          Eigen::ArrayXf dcol2(c), ucol2(c), dycol(c);
          for (long tt = t - 1; tt >= 0; --tt) {
            ConstArrXXMap abar_t(abar_all->data() + tt * slab, c, n);
            ConstArrXXMap beta_t(beta_all->data() + tt * slab, c, n);
            dycol = go.row(tt).transpose().array();
            dcol2 = dm2.row(tt).transpose().array();
            ucol2 = um2.row(tt).transpose().array();
            Eigen::Map<const Eigen::Array<float, 1, Eigen::Dynamic>> brow(bm2.row(tt).data(), n);
            Eigen::Map<const Eigen::Array<float, 1, Eigen::Dynamic>> crow(cm2.row(tt).data(), n);
            // dh[t] = dy[t] (x) csel[t] + abar[t+1] . dh[t+1]
            dh = carry;
            dh.matrix().noalias() += dycol.matrix() * crow.matrix();
            if (nc) {
              ConstRowMatMap hmat(h_all->data() + tt * slab, c, n);
              gmat(ci, t, n).row(tt).noalias() +=
                  (hmat.transpose() * dycol.matrix()).transpose();
            }
            // Input-term partials: h += beta . (u (x) B)
            work = dh * beta_t;  // shared factor for du and dB
            if (nu)
              gmat(ui, t, c).row(tt).array() +=
                  (work.rowwise() * brow).rowwise().sum().transpose();
            if (nb)
              gmat(bi, t, n).row(tt).array() += (work.colwise() * ucol2).colwise().sum();
            if (nd || na) {
              z2 = am2.colwise() * dcol2;
              // dbeta = dh . (u (x) B); dabar = dh . h[t-1]
              ArrXX dbeta = (dh.colwise() * ucol2).rowwise() * brow;
              ArrXX dabar;
              if (tt % seq_len == 0) {
                dabar = ArrXX::Zero(c, n);
              } else {
                ConstArrXXMap hprev(h_all->data() + (tt - 1) * slab, c, n);
                dabar = dh * hprev;
              }
              if (method == Discretization::zoh) {
                // d(abar)/d(delta) = a*abar, d(abar)/da = delta*abar,
                // d(beta)/d(delta) = abar, d(beta)/da = delta^2 * phi'(z)
                ArrXX phness = (z2.abs() < kSmallZ)
                                   .select(0.5f + z2 / 3.0f + z2.square() / 8.0f,
                                           ((z2 - 1.0f) * abar_t + 1.0f) / z2.square());
                if (nd)
                  gmat(di, t, c).row(tt).array() +=
                      (dabar * am2 * abar_t + dbeta * abar_t).rowwise().sum().transpose();
                if (na)
                  ArrXXMap(ai->grad.data(), c, n) +=
                      (dabar * abar_t).colwise() * dcol2 +
                      (dbeta * phness).colwise() * dcol2.square();
              } else {
                ArrXX inv2 = (1.0f - z2 / 2.0f).inverse().square();
                if (nd)
                  gmat(di, t, c).row(tt).array() +=
                      ((dabar * am2 + dbeta) * inv2).rowwise().sum().transpose();
                if (na)
                  ArrXXMap(ai->grad.data(), c, n) +=
                      (dabar * inv2).colwise() * dcol2 +
                      (dbeta * inv2).colwise() * (dcol2.square() / 2.0f);
              }
            }
            carry = abar_t * dh;
            if (tt % seq_len == 0) carry.setZero();
          }
        });
  }
  return out;
}

}  // namespace mambaseg::ops
