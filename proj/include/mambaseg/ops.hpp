#pragma once

#include <vector>

#include "mambaseg/tensor.hpp"

namespace mambaseg::ops {

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& t, float s);
Tensor add_scalar(const Tensor& t, float s);
Tensor neg(const Tensor& t);

Tensor relu(const Tensor& t);
Tensor gelu(const Tensor& t);  // exact erf form
Tensor silu(const Tensor& t);
Tensor sigmoid(const Tensor& t);
Tensor softplus(const Tensor& t);
Tensor exp(const Tensor& t);

// ---- broadcasting over the last dimension ----------------------------------

/// t: [R, C], v: C values (shape [C] or [1, C]); out[r, c] = t[r, c] + v[c].
Tensor add_rowvec(const Tensor& t, const Tensor& v);
/// out[r, c] = t[r, c] * v[c].
Tensor mul_rowvec(const Tensor& t, const Tensor& v);

// ---- reductions -------------------------------------------------------------

Tensor sum_all(const Tensor& t);
Tensor mean_all(const Tensor& t);
/// [R, C] -> [1, C] column-wise statistics.
Tensor mean_rows(const Tensor& t);
Tensor max_rows(const Tensor& t);
Tensor min_rows(const Tensor& t);

// ---- linear algebra ---------------------------------------------------------

/// a: [M, K], b: [K, N] -> [M, N].
Tensor matmul(const Tensor& a, const Tensor& b);
/// a: [M, K], b: [N, K] -> [M, N]  (a * b^T without materializing b^T).
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& t);

// ---- shape ------------------------------------------------------------------

Tensor reshape(const Tensor& t, Shape shape);
/// out row i = t row idx[i]; idx entries may repeat (backward scatter-adds).
Tensor select_rows(const Tensor& t, const std::vector<long>& idx);
/// out has `rows` rows, out row idx[i] = t row i, other rows zero.
/// idx entries must be unique.
Tensor scatter_rows(const Tensor& t, const std::vector<long>& idx, long rows);
Tensor slice_rows(const Tensor& t, long r0, long r1);
Tensor slice_cols(const Tensor& t, long c0, long c1);
Tensor concat_rows(const std::vector<Tensor>& ts);
Tensor concat_cols(const std::vector<Tensor>& ts);

// ---- normalization / attention helpers --------------------------------------

Tensor softmax_lastdim(const Tensor& t);
/// t: [R, C], gamma/beta: [C].
Tensor layer_norm(const Tensor& t, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

// ---- losses ------------------------------------------------------------------

/// Mean cross-entropy over rows, computed from logits via log-sum-exp.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);
/// Soft Dice loss on class probabilities [T, K]; averages the per-class
/// Dice score over foreground classes 1..K-1 and returns 1 - mean.
Tensor soft_dice(const Tensor& probs, const std::vector<int>& labels, float eps = 1e-5f);

// ---- convolution -------------------------------------------------------------

struct Conv3dGeom {
  long stride[3] = {1, 1, 1};  // depth, height, width
  long pad[3] = {0, 0, 0};
  long dil[3] = {1, 1, 1};
};

/// x: {Cin, D, H, W}, w: [Cout, Cin*kd*kh*kw], bias: [Cout] or undefined.
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, long kd, long kh, long kw,
              const Conv3dGeom& g = {});
/// Adjoint of conv3d in the data argument. x: {Cin, D, H, W},
/// w: [Cin, Cout*kd*kh*kw], output size (D-1)*sd + kd per axis (pad 0).
Tensor conv_transpose3d(const Tensor& x, const Tensor& w, const Tensor& bias, long cout, long kd,
                        long kh, long kw, long sd, long sh, long sw);
/// Per-channel 3x3x3 convolution with "same" zero padding; w: [C, 27].
Tensor conv3d_depthwise(const Tensor& x, const Tensor& w, long dilation);
/// Causal depthwise conv along rows of x: [T, C]; w: [C, K], bias: [C].
/// Rows are S sequences of length seq_len; the window never crosses a
/// sequence boundary (missing history reads as zero).
Tensor conv1d_depthwise_causal(const Tensor& x, const Tensor& w, const Tensor& bias, long seq_len);

/// x: {C, D, H, W} -> [T, C*pd*ph*pw] with T = (D/pd)*(H/ph)*(W/pw); patch
/// rows are ordered depth-major, then height, then width, and the flattened
/// patch is channel-major.
Tensor patchify3d(const Tensor& x, long pd, long ph, long pw);

// ---- selective scan -----------------------------------------------------------

enum class Discretization { zoh, bilinear };

/// Input-dependent SSM recurrence over concatenated sequences.
///   u, delta : [T, C]   per-step inputs and step sizes
///   bsel, csel : [T, N] per-step input/output mixing vectors
///   a : [C, N]          continuous-time diagonal state matrix entries
/// State resets at every seq_len boundary. Returns y: [T, C] with
/// y[t,c] = sum_n csel[t,n] * h[t,c,n].
Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& bsel, const Tensor& csel,
                      const Tensor& a, Discretization method, long seq_len);

// ---- separable 3D DCT -----------------------------------------------------------

/// Orthonormal DCT-II basis factor for one axis: scale(k) * cos(pi/n*(i+0.5)*k)
/// with scale(0) = sqrt(1/n), scale(k>0) = sqrt(2/n). `raw` skips the scale.
float dct_basis(long n, long k, long i, bool raw = false);

/// t: [D*H*W, C] voxel-major rows -> frequency-major rows, transformed
/// independently per column (channel). Orthonormal, so idct3 is the exact
/// inverse and the two ops are mutually adjoint.
Tensor dct3(const Tensor& t, long d, long h, long w);
Tensor idct3(const Tensor& t, long d, long h, long w);

}  // namespace mambaseg::ops
