#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "convt/graph.hpp"
#include "convt/tensor.hpp"

namespace convt {

/// Elementwise sum. `b` may have the same shape as `a` or a trailing suffix
/// of it (bias and position-table broadcasting).
Var add(Graph& g, Var a, Var b);

/// Elementwise product of equally shaped tensors.
Var mul(Graph& g, Var a, Var b);

Var scale(Graph& g, Var a, double factor);

/// Sum of all elements as a rank-0 tensor.
Var sum(Graph& g, Var a);

/// Mean along one axis; the axis is removed from the shape.
Var mean(Graph& g, Var a, int axis);

/// Batched matrix product [.., m, k] x [.., k, n] -> [.., m, n].
///
/// Batch dimensions broadcast numpy-style; a rank-2 right operand is shared
/// across the whole batch and runs as a single GEMM.
Var matmul(Graph& g, Var a, Var b);

/// x [.., in] * weight [in, out] (+ bias [out]) as one GEMM.
Var linear(Graph& g, Var x, Var weight, std::optional<Var> bias);

/// Reorders axes: output axis i is input axis perm[i].
Var permute(Graph& g, Var a, std::vector<std::size_t> perm);

Var reshape(Graph& g, Var a, Shape shape);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
};

/// Output extent of a convolution along one axis.
std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding);

/// 2-D cross-correlation: input [B,C,H,W], kernel [F,C,kh,kw], optional bias [F].
Var conv2d(Graph& g, Var input, Var kernel, std::optional<Var> bias, Conv2dOptions options);

/// Same convolution on channels-last data: input [B,H,W,C] -> [B,Ho,Wo,F].
/// The kernel keeps the [F,C,kh,kw] layout used by conv2d.
Var conv2d_channels_last(Graph& g, Var input, Var kernel, std::optional<Var> bias, Conv2dOptions options);

/// Normalizes each row of the last axis to zero mean and unit variance, then
/// applies the affine map gamma * x + beta.
Var layer_norm(Graph& g, Var x, Var gamma, Var beta, double eps = 1e-5);

/// Max-subtracted softmax along `axis`.
Var softmax(Graph& g, Var x, int axis);

/// x * Phi(x) with the exact Gaussian CDF.
Var gelu(Graph& g, Var x);

/// softmax(Q K^T / sqrt(d_k)) V evaluated per head.
///
/// q, k, v are [B, N, heads * d_k] with head h occupying channels
/// [h * d_k, (h + 1) * d_k); the output has the same layout, i.e. the heads
/// come back concatenated. Only the attention weights are kept for backward.
/// When `weights` is non-null it receives them as [B, heads, N, N].
Var scaled_dot_product_attention(Graph& g, Var q, Var k, Var v, std::size_t num_heads, Tensor* weights = nullptr);

/// Tensor-level helpers shared by ops and tests.
Tensor permute_values(const Tensor& a, const std::vector<std::size_t>& perm);
Tensor matmul_values(const Tensor& a, const Tensor& b);

}  // namespace convt
