#pragma once

#include <cstddef>
#include <vector>

#include "dsnet/tensor.hpp"

// Differentiable tensor operations. Every op computes its forward value
// eagerly; when the active graph is recording and an input is grad-requiring
// (directly or transitively), the op also records a node whose closure
// accumulates input adjoints from the output adjoint.
namespace dsnet::ops {

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);  // same shape
Tensor mul(const Tensor& a, const Tensor& b);  // same shape
Tensor scale(const Tensor& a, double s);
Tensor gelu(const Tensor& a);  // exact form, x * Phi(x)

// ---- shape ----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);
// perm maps output axis -> input axis, e.g. perm {0,2,1} swaps the last two.
Tensor transpose(const Tensor& a, const std::vector<std::size_t>& perm);
Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);
// rows [start, start+count) along axis 0
Tensor slice_batch(const Tensor& a, std::size_t start, std::size_t count);

// ---- reductions -----------------------------------------------------------

Tensor mean_axis(const Tensor& a, std::size_t axis);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// ---- linear algebra -------------------------------------------------------

// Batched over identical leading dims: [..., M, K] x [..., K, N].
Tensor matmul(const Tensor& a, const Tensor& b);
// [..., M, K] x [..., N, K]^T, the Q K^T shape without materializing K^T.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// x [rows, in], w [out, in], optional b [out] -> [rows, out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---- neural-net pieces ----------------------------------------------------

Tensor softmax_lastdim(const Tensor& a);
// Normalizes over the last axis; gamma/beta have that axis's extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-6);
// x [N,C,H,W], per-channel statistics over N*H*W. Training mode normalizes
// with batch statistics and folds them into the running buffers (biased
// variance in the normalizer, unbiased in the running estimate); eval mode
// normalizes with the running buffers.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, bool training,
                  double momentum = 0.1, double eps = 1e-5);
// x [N,C,H,W], w [C_out,C_in,kh,kw], optional bias [C_out]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              std::size_t stride, std::size_t pad);
// x [N,C,H,W], w [C,1,kh,kw], no bias
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, std::size_t stride,
                        std::size_t pad);
// logits [N,K]; mean over rows of (logsumexp(row) - row[label])
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);
// table [R,S], out[r,i] = table[r, idx[i]]; backward scatter-adds into table.
Tensor gather_cols(const Tensor& table, const std::vector<std::size_t>& idx);
// x [B, rest...], b [rest...]: adds b to every batch slice of x.
Tensor add_broadcast_batch(const Tensor& x, const Tensor& b);

// ---- instrumentation ------------------------------------------------------

// When set, forward gemm-backed ops (matmul, matmul_nt, linear, conv2d)
// add their executed multiply-accumulate count to *counter.
void set_mac_counter(unsigned long long* counter);
unsigned long long* mac_counter();

// Multiplies the gelu backward by a constant. Exists so tests can prove the
// finite-difference checker rejects a wrong analytic gradient; 1.0 restores
// the true derivative.
void set_gelu_grad_scale(double s);

}  // namespace dsnet::ops
