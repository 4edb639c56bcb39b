#pragma once

#include <vector>

#include "revnet/tensor.hpp"

// Differentiable operation vocabulary. Conventions:
//  - a "VN set" is shaped {n, C, 3}; a single VN feature is {C, 3};
//  - "rows" are slices along the last dimension;
//  - "blocks" are slices along dim 0 (one point / one feature each).
// Gradients are accumulated, never overwritten; subgradient choices at
// non-smooth points (norms at zero, clamps, argmin ties) are documented on
// the op.

namespace revnet::ops {

// ---- elementwise -----------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor reciprocal(const Tensor& a);
Tensor sqrt_op(const Tensor& a);
/// max(a, m); gradient passes only where a > m.
Tensor clamp_min(const Tensor& a, double m);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);

// ---- reductions ------------------------------------------------------------
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// ---- dense 2-D -------------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);      // {m,k}x{k,n}
Tensor transpose(const Tensor& a);                    // {m,n} -> {n,m}
Tensor add_rowvec(const Tensor& x, const Tensor& v);  // {m,n} + {n}
Tensor sub_rowvec(const Tensor& x, const Tensor& v);

// ---- row ops (rows = last dimension) ---------------------------------------
/// Per-row Euclidean norm -> {R}. Gradient at a zero row is zero.
Tensor row_norms(const Tensor& x);
Tensor row_dots(const Tensor& x, const Tensor& y);    // per-row inner product
Tensor row_scale(const Tensor& x, const Tensor& s);   // row r scaled by s[r]

// ---- block ops (blocks = dim 0) --------------------------------------------
Tensor point_scale(const Tensor& x, const Tensor& s);  // block p scaled by s[p]
/// Per-block Frobenius norm -> {n0}. Gradient at a zero block is zero.
Tensor block_norms(const Tensor& x);
Tensor gather_dim0(const Tensor& x, const std::vector<int>& idx);
Tensor concat_dim0(const std::vector<Tensor>& xs);
Tensor slice_dim0(const Tensor& x, int start, int len);
/// Mean over consecutive groups of `k` blocks: {g*k, ...} -> {g, ...}.
Tensor group_mean(const Tensor& x, int k);
Tensor mean_dim0(const Tensor& x);
Tensor sum_dim0(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

// ---- channel ops on VN sets ------------------------------------------------
/// Scales channel c by a[c]; x is {n,C,3} or {C,3}.
Tensor channel_scale(const Tensor& x, const Tensor& a);
Tensor concat_dim1(const Tensor& a, const Tensor& b);
Tensor slice_dim1(const Tensor& x, int start, int len);

// ---- VN matrix products ----------------------------------------------------
/// out_p = W * X_p for every block: {a,b} x {n,b,c} -> {n,a,c} (or {b,c} ->
/// {a,c}). The weight is shared across blocks.
Tensor shared_left_matmul(const Tensor& w, const Tensor& x);
/// Applies M on the right of every row: rows(x) * M, with M {d,d} shared.
Tensor right_mul_shared(const Tensor& x, const Tensor& m);
/// out_p = X_p * T_p (or X_p * T_p^T): {n,C,d} x {n,d,d} -> {n,C,d}.
Tensor point_right_matmul(const Tensor& x, const Tensor& t, bool transpose_t);

// ---- attention -------------------------------------------------------------
/// out[j*n + i] = Q_j - K_i : {m,C,3} x {n,C,3} -> {m*n,C,3}.
Tensor pairwise_sub(const Tensor& q, const Tensor& k);
/// Softmax over dim 1 of {m,n,C} (per query j and channel c, across keys i).
Tensor softmax_dim1(const Tensor& s);
/// out[j,c,:] = sum_i S[j,i,c] * V[i,c,:] : {m,n,C} x {n,C,3} -> {m,C,3}.
Tensor cwsa_aggregate(const Tensor& s, const Tensor& v);

// ---- point-set losses ------------------------------------------------------
/// Bidirectional mean nearest-neighbor Euclidean distance between {n,3} and
/// {m,3}. Nearest neighbors are fixed in the forward pass (ties resolved to
/// the lowest index); the gradient of each distance at coincident points is
/// zero.
Tensor chamfer_l1_op(const Tensor& p, const Tensor& q);
/// Squared-distance variant; `symmetric=false` keeps only the p->q term.
Tensor chamfer_l2_op(const Tensor& p, const Tensor& q, bool symmetric = true);

}  // namespace revnet::ops
