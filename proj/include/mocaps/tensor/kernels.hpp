#pragma once

#include <vector>

#include "mocaps/tensor/tensor.hpp"

// Dense numeric kernels. All functions are pure: they read their inputs,
// allocate a fresh output, fill it, and return it. Hot loops are
// OpenMP-parallel over independent output elements with serial inner
// reductions, so results are bit-identical for any thread count.
//
// Layout conventions (row-major throughout):
//   images            [B, C, H, W]
//   conv weights      [Cout, Cin, KH, KW], bias [Cout]
//   dense weights     [M, K] for y = x * w^T + b with x [N, K], y [N, M]
//   capsule inputs    [B, I, Din]
//   capsule weights   [I, J, Dout, Din]
//   votes             [B, I, J, Dout]
//   routing logits    [B, I, J], softmax over the last (j) axis
//   capsule outputs   [B, J, Dout]
namespace mocaps::kernels {

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// alpha * a + beta * b; identity coefficient pairs (0,1)/(1,0) return the
// corresponding operand unchanged.
Tensor lincomb(double alpha, const Tensor& a, double beta, const Tensor& b);
// alpha * a + beta
Tensor affine(const Tensor& a, double alpha, double beta);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor relu_vjp(const Tensor& up, const Tensor& x);  // up where x > 0
Tensor sigmoid(const Tensor& a);
Tensor sigmoid_vjp(const Tensor& up, const Tensor& y);  // y = sigmoid(x)

// ---- matmul / dense ----
// [..., M, K] x [..., K, N] -> [..., M, N]; leading dims must match exactly.
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two axes: [..., M, N] -> [..., N, M].
Tensor transpose_last2(const Tensor& a);
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor dense_vjp_x(const Tensor& up, const Tensor& w);
Tensor dense_vjp_w(const Tensor& up, const Tensor& x);
Tensor dense_vjp_b(const Tensor& up);

// ---- convolution (valid padding) ----
int64_t conv_out_dim(int64_t in, int64_t kernel, int64_t stride);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);
Tensor conv2d_vjp_x(const Tensor& up, const Tensor& w, int stride,
                    int64_t in_h, int64_t in_w);
Tensor conv2d_vjp_w(const Tensor& up, const Tensor& x, int stride,
                    int64_t kh, int64_t kw);
Tensor conv2d_vjp_b(const Tensor& up);

// ---- reductions ----
enum class Reduce { kSum, kMean, kMax, kL2Norm };
// Removes `axis` (negative counts from the back).
Tensor reduce(Reduce op, const Tensor& a, int axis);
// Inserts an axis of the given extent at `axis`, repeating values; the
// adjoint of reduce-sum.
Tensor broadcast_axis(const Tensor& a, int axis, int64_t extent);

// ---- capsule ops ----
// squash(s) = |s|^2/(1+|s|^2) * s/|s| over the last axis; 0 stays 0.
Tensor squash(const Tensor& s);
Tensor squash_vjp(const Tensor& up, const Tensor& s);
// Softmax over the last axis.
Tensor softmax_last(const Tensor& a);
Tensor softmax_last_vjp(const Tensor& up, const Tensor& y);
// L2 norm over the last axis: [..., D] -> [...].
Tensor caps_norm(const Tensor& x);
Tensor caps_norm_vjp(const Tensor& up, const Tensor& x);
// votes[b,i,j,:] = w[i,j,:,:] * u[b,i,:]
Tensor votes(const Tensor& u, const Tensor& w);
Tensor votes_vjp_u(const Tensor& up, const Tensor& w);
Tensor votes_vjp_w(const Tensor& up, const Tensor& u);
// s[b,j,o] = sum_i c[b,i,j] * uhat[b,i,j,o]
Tensor weighted_sum(const Tensor& c, const Tensor& uhat);
// a[b,i,j] = sum_o uhat[b,i,j,o] * v[b,j,o]
Tensor agreement(const Tensor& uhat, const Tensor& v);
// out[b,i,j,o] = bij[b,i,j] * bjo[b,j,o]; adjoint of both contractions above.
Tensor outer_bij_bjo(const Tensor& bij, const Tensor& bjo);

// ---- layout ----
// [B, G*D, H, W] -> [B, G*H*W, D]: channel group g at spatial (h, w) becomes
// capsule (g*H + h)*W + w.
Tensor primary_reshape(const Tensor& x, int64_t groups, int64_t caps_dim);
Tensor primary_reshape_vjp(const Tensor& up, int64_t groups, int64_t caps_dim,
                           int64_t h, int64_t w);

// ---- misc ----
std::vector<int64_t> argmax_last(const Tensor& a);

}  // namespace mocaps::kernels
