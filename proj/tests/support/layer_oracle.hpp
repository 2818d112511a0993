#pragma once

// Scalar-loop evaluation of single transformer sub-layers, one position at a time.

#include <cmath>
#include <span>
#include <vector>

#include "mpq/transformer.hpp"
#include "support/reference.hpp"

namespace mpq::oracle {

inline ref::Vec vec(std::span<const float> x) { return {x.begin(), x.end()}; }

inline ref::Vec ln(const ref::Vec& x, const Tensor& g, const Tensor& b) {
    return ref::layer_norm(x, ref::to_vec(g), ref::to_vec(b), 1, x.size());
}

// Per-head loop over a whole prefix; returns the output at every step.
inline std::vector<ref::Vec> attention_oracle(const TransformerLayer& l, const std::vector<ref::Vec>& xs) {
    const std::size_t d = l.d_model(), dh = d / l.n_heads;
    std::vector<ref::Vec> qs, ks, vs, out;
    for (const auto& x : xs) {
        qs.push_back(ref::linear(x, ref::to_vec(l.attn.Q), 1, d, d));
        ks.push_back(ref::linear(x, ref::to_vec(l.attn.K), 1, d, d));
        vs.push_back(ref::linear(x, ref::to_vec(l.attn.V), 1, d, d));
    }
    for (std::size_t t = 0; t < xs.size(); ++t) {
        ref::Vec att(d, 0.0);
        for (std::size_t h = 0; h < l.n_heads; ++h) {
            ref::Vec scores;
            for (std::size_t j = 0; j <= t; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += qs[t][h * dh + c] * ks[j][h * dh + c];
                scores.push_back(s / std::sqrt(static_cast<double>(dh)));
            }
            const ref::Vec p = ref::softmax(scores);
            for (std::size_t j = 0; j <= t; ++j)
                for (std::size_t c = 0; c < dh; ++c) att[h * dh + c] += p[j] * vs[j][h * dh + c];
        }
        ref::Vec y = ref::linear(att, ref::to_vec(l.attn.Wh), 1, d, d);
        for (std::size_t i = 0; i < d; ++i) y[i] += xs[t][i];
        out.push_back(ln(y, l.attn.ln_gain, l.attn.ln_bias));
    }
    return out;
}

inline ref::Vec feed_forward_oracle(const TransformerLayer& l, const ref::Vec& z) {
    const std::size_t d = l.d_model(), f = l.d_ff();
    ref::Vec h = ref::linear(z, ref::to_vec(l.ffn.W1), 1, d, f);
    for (std::size_t i = 0; i < f; ++i) h[i] = ref::gelu(h[i] + l.ffn.b1.data()[i]);
    ref::Vec s = ref::linear(h, ref::to_vec(l.ffn.W2), 1, f, d);
    for (std::size_t i = 0; i < d; ++i) s[i] += l.ffn.b2.data()[i] + z[i];
    return ln(s, l.ffn.ln_gain, l.ffn.ln_bias);
}

/// Logits of every position of one sequence, composed from the sub-layer oracles.
inline std::vector<ref::Vec> model_oracle(const TransformerLM& m, std::span<const std::size_t> tokens) {
    const std::size_t d = m.config().d_model, v = m.config().vocab;
    std::vector<ref::Vec> xs;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        ref::Vec x(d);
        for (std::size_t i = 0; i < d; ++i) {
            x[i] = m.token_embedding().data()[tokens[t] * d + i] + m.position_embedding().data()[t * d + i];
        }
        xs.push_back(x);
    }
    for (const auto& l : m.layers()) {
        xs = attention_oracle(l, xs);
        for (auto& x : xs) x = feed_forward_oracle(l, x);
    }
    for (auto& x : xs) x = ref::linear(x, ref::to_vec(m.output_projection()), 1, d, v);
    return xs;
}

}  // namespace mpq::oracle
