#include "mambaseg/ssm.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>

#include "mambaseg/errors.hpp"

namespace mambaseg::ssm {

Discrete discretize(const Eigen::MatrixXf& a, const Eigen::VectorXf& b, float delta,
                    Discretization method) {
  long n = a.rows();
  if (a.cols() != n) throw DimensionError("discretize: A must be square");
  if (b.size() != n) throw DimensionError("discretize: B length must match A");
  if (!(delta > 0.0f)) throw ParameterError("discretize: delta must be positive");
  Discrete out;
  if (method == Discretization::zoh) {
    // Augmented exponential: exp(delta*[[A,B],[0,0]]) packs exp(delta A) in
    // the top-left block and int_0^delta exp(As) ds * B in the top-right,
    // which avoids requiring A to be invertible.
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n + 1, n + 1);
    m.topLeftCorner(n, n) = a.cast<double>() * static_cast<double>(delta);
    m.topRightCorner(n, 1) = b.cast<double>() * static_cast<double>(delta);
    Eigen::MatrixXd e = m.exp();
    out.abar = e.topLeftCorner(n, n).cast<float>();
    out.bbar = e.topRightCorner(n, 1).cast<float>();
  } else {
    Eigen::MatrixXf lhs = Eigen::MatrixXf::Identity(n, n) - 0.5f * delta * a;
    Eigen::FullPivLU<Eigen::MatrixXf> lu(lhs);
    if (!lu.isInvertible())
      throw SingularityError("discretize: bilinear transform pole (I - delta/2 A singular)");
    out.abar = lu.solve(Eigen::MatrixXf::Identity(n, n) + 0.5f * delta * a);
    out.bbar = lu.solve(delta * b);
  }
  return out;
}

Eigen::VectorXf scan_sequential(const Discrete& sys, const Eigen::RowVectorXf& c, float d,
                                const Eigen::VectorXf& u) {
  long n = sys.abar.rows(), t = u.size();
  if (c.size() != n) throw DimensionError("scan_sequential: C length must match state dim");
  Eigen::VectorXf h = Eigen::VectorXf::Zero(n), y(t);
  for (long k = 0; k < t; ++k) {
    h = sys.abar * h + sys.bbar * u[k];
    y[k] = c * h + d * u[k];
  }
  return y;
}

void recurrence_sequential(const float* a, const float* b, long t, float* h) {
  float x = 0.0f;
  for (long k = 0; k < t; ++k) {
    x = a[k] * x + b[k];
    h[k] = x;
  }
}

void recurrence_parallel(const float* a, const float* b, long t, float* h) {
  // Inclusive scan over affine maps f_k(x) = a_k x + b_k. After the scan,
  // element k holds the composition f_k o ... o f_0, whose offset term is the
  // prefix state when x_{-1} = 0.
  std::vector<float> ca(a, a + t), cb(b, b + t);
  for (long step = 1; step < t; step *= 2) {
    // Combine pairs at distance `step`; each pass halves the remaining depth.
    for (long k = t - 1; k >= step; --k) {
      long j = k - step;
      cb[k] = ca[k] * cb[j] + cb[k];
      ca[k] = ca[k] * ca[j];
    }
  }
  std::copy(cb.begin(), cb.end(), h);
}

Eigen::MatrixXf selective_scan_ref(const SelectiveInputs& in, bool parallel) {
  long t = in.u.rows(), c = in.u.cols(), n = in.a.cols();
  if (in.delta.rows() != t || in.delta.cols() != c)
    throw DimensionError("selective_scan_ref: delta shape");
  if (in.b.rows() != t || in.b.cols() != n || in.c.rows() != t || in.c.cols() != n)
    throw DimensionError("selective_scan_ref: B/C shapes");
  if (in.a.rows() != c) throw DimensionError("selective_scan_ref: A rows != channels");

  Eigen::MatrixXf y = Eigen::MatrixXf::Zero(t, c);
  std::vector<float> abar(static_cast<size_t>(t)), binc(static_cast<size_t>(t)),
      h(static_cast<size_t>(t));
  for (long cc = 0; cc < c; ++cc) {
    for (long nn = 0; nn < n; ++nn) {
      float av = in.a(cc, nn);
      for (long k = 0; k < t; ++k) {
        float dt = in.delta(k, cc);
        float z = dt * av;
        float ab, beta;
        if (in.method == Discretization::zoh) {
          ab = std::exp(z);
          float phi = std::abs(z) < 1e-3f ? 1.0f + z / 2.0f + z * z / 6.0f : (ab - 1.0f) / z;
          beta = dt * phi;
        } else {
          float q = 1.0f - z / 2.0f;
          if (std::abs(q) < 1e-12f)
            throw SingularityError("selective_scan_ref: bilinear pole");
          ab = (1.0f + z / 2.0f) / q;
          beta = dt / q;
        }
        abar[static_cast<size_t>(k)] = ab;
        binc[static_cast<size_t>(k)] = beta * in.b(k, nn) * in.u(k, cc);
      }
      if (parallel)
        recurrence_parallel(abar.data(), binc.data(), t, h.data());
      else
        recurrence_sequential(abar.data(), binc.data(), t, h.data());
      for (long k = 0; k < t; ++k) y(k, cc) += in.c(k, nn) * h[static_cast<size_t>(k)];
    }
  }
  return y;
}

}  // namespace mambaseg::ssm
