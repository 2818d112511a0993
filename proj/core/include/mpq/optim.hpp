#pragma once

#include <span>

#include "mpq/tensor.hpp"

namespace mpq {

inline constexpr double kDefaultClipNorm = 5.0;

/// Euclidean norm of the concatenation of all `grads`.
double global_norm(std::span<const Tensor> grads);

/// Scales every tensor in `grads` by threshold/norm when the global norm
/// exceeds `threshold`. A non-positive threshold disables clipping.
/// Returns the norm before clipping.
double clip_global_norm(std::span<Tensor> grads, double threshold);

/// param <- param - lr * grad (in place); returns `param`.
Tensor& sgd_update(Tensor& param, const Tensor& grad, double lr);

}  // namespace mpq
