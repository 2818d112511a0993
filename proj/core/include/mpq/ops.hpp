#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mpq/tensor.hpp"

namespace mpq {

/// LayerNorm variance guard.
inline constexpr double kLayerNormEps = 1e-5;

// Differentiable primitives. Each records itself in the graph when any input
// requires a gradient. Reductions accumulate in double in a fixed order.

/// [m x k] * [k x n] -> [m x n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// [m x n] -> [n x m].
Tensor transpose(const Tensor& a);
/// x [m x in] times weight^T, weight [out x in] -> [m x out].
Tensor linear(const Tensor& x, const Tensor& weight);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Adds `bias` [n] to every row of `a` [m x n].
Tensor add_bias(const Tensor& a, const Tensor& bias);
Tensor scale(const Tensor& a, float factor);
/// Sum of all elements -> [1].
Tensor sum(const Tensor& a);
/// Row-wise concatenation; all inputs share the trailing extent.
Tensor concat(std::span<const Tensor> parts);

/// Exact GELU, 0.5 x (1 + erf(x / sqrt 2)).
Tensor gelu(const Tensor& x);

/// Row-wise layer normalization of x [m x d] (or [d]) with gain and bias [d].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

/// Mean over rows of -log softmax(logits[r])[targets[r]]; logits [m x V] or [V].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

/// Softmax of a vector.
Tensor softmax(const Tensor& x);

/// Gathers rows of table [V x d] -> [ids.size() x d].
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);

/// Causal multi-head self-attention over `batch` independent sequences of
/// length `seq_len` stacked row-wise: q, k, v are [batch*seq_len x d_model].
/// Position t attends to positions 0..t of its own sequence with scores
/// scaled by 1/sqrt(d_model / n_heads).
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        std::size_t seq_len);

/// sum_i weights[i] * parts[i]; weights is a vector of length parts.size().
Tensor weighted_sum(std::span<const Tensor> parts, const Tensor& weights);

// Plain (non-graph) helpers shared with the inference path.
namespace kernels {

double gelu(double x);
double gelu_grad(double x);

/// c[m x n] (+)= a[m x k] * b[k x n], double accumulation per output row.
void gemm_nn(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate);
/// c[m x n] (+)= a[m x k] * b[n x k]^T.
void gemm_nt(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate);
/// c[m x n] (+)= a[r x m]^T * b[r x n].
void gemm_tn(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t r,
             std::size_t m, std::size_t n, bool accumulate);

/// log(sum(exp(x))) with max subtraction, double precision.
double log_sum_exp(std::span<const float> x);

}  // namespace kernels

}  // namespace mpq
