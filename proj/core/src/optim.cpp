#include "mpq/optim.hpp"

#include <cmath>

#include "mpq/errors.hpp"

namespace mpq {

double global_norm(std::span<const Tensor> grads) {
    double sq = 0.0;
    for (const Tensor& g : grads)
        for (float v : g.data()) sq += static_cast<double>(v) * v;
    return std::sqrt(sq);
}

double clip_global_norm(std::span<Tensor> grads, double threshold) {
    const double norm = global_norm(grads);
    if (threshold > 0.0 && norm > threshold) {
        const double factor = threshold / norm;
        for (Tensor& g : grads)
            for (float& v : g.data()) v = static_cast<float>(v * factor);
    }
    return norm;
}

Tensor& sgd_update(Tensor& param, const Tensor& grad, double lr) {
    if (param.shape() != grad.shape()) {
        throw ShapeError("sgd_update: param " + shape_str(param.shape()) + " vs grad " + shape_str(grad.shape()));
    }
    if (!(lr > 0.0)) throw ConfigError("sgd_update: learning rate must be positive");
    auto p = param.data();
    auto g = grad.data();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<float>(p[i] - lr * g[i]);
    return param;
}

}  // namespace mpq
