#pragma once

#include <Eigen/Dense>

#include "mambaseg/ops.hpp"

namespace mambaseg::ssm {

using ops::Discretization;

/// Discrete-time system obtained from h'(t) = A h + B u:
///   h_k = abar h_{k-1} + bbar u_k,   y_k = c h_k + d u_k.
struct Discrete {
  Eigen::MatrixXf abar;  // N x N
  Eigen::VectorXf bbar;  // N
};

/// Exact zero-order hold (matrix exponential of the augmented system) or
/// bilinear (Tustin) discretization of dense continuous parameters.
Discrete discretize(const Eigen::MatrixXf& a, const Eigen::VectorXf& b, float delta,
                    Discretization method);

/// Sequential reference scan of a fixed-coefficient SISO system from h_0 = 0.
Eigen::VectorXf scan_sequential(const Discrete& sys, const Eigen::RowVectorXf& c, float d,
                                const Eigen::VectorXf& u);

/// First-order linear recurrences x_k = a_k x_{k-1} + b_k, x_0 computed from
/// k = 0 with x_{-1} = 0; writes all prefix values into h.
void recurrence_sequential(const float* a, const float* b, long t, float* h);

/// Same recurrence evaluated with a log-depth inclusive scan over the
/// associative combine (a2,b2)*(a1,b1) = (a2*a1, a2*b1 + b2).
void recurrence_parallel(const float* a, const float* b, long t, float* h);

/// Per-step inputs of the input-dependent (selective) recurrence.
struct SelectiveInputs {
  Eigen::MatrixXf u;      // T x C
  Eigen::MatrixXf delta;  // T x C
  Eigen::MatrixXf b;      // T x N
  Eigen::MatrixXf c;      // T x N
  Eigen::MatrixXf a;      // C x N (diagonal continuous state matrix per channel)
  Discretization method = Discretization::zoh;
};

/// y[t,c] = sum_n c[t,n] h[t,c,n] with the per-fiber recurrence evaluated
/// either sequentially or by the parallel prefix scan.
Eigen::MatrixXf selective_scan_ref(const SelectiveInputs& in, bool parallel);

}  // namespace mambaseg::ssm
