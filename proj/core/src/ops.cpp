#include "mpq/ops.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <cstring>
#include <numbers>
#include <string>

#include "mpq/errors.hpp"

namespace mpq {

namespace kernels {

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

namespace {

constexpr std::size_t kTileRows = 8;
constexpr std::size_t kTileCols = 16;

// One register tile of C: rows [i0, i0+ri) x cols [j0, j0+cj). Element (i, j)
// reads A at a[i * a_row + kk * a_step] and B at b[kk * n + j]. Every output
// sums over kk in increasing order, so results do not depend on the tiling.
inline void gemm_tile(const float* a, std::size_t a_row, std::size_t a_step, const float* b, float* c,
                      std::size_t i0, std::size_t ri, std::size_t j0, std::size_t cj, std::size_t k,
                      std::size_t n, bool accumulate) {
    double acc[kTileRows][kTileCols] = {};
    if (ri == kTileRows && cj == kTileCols) {
        // GCC vector extensions; lowered to whatever SIMD width the target has.
        using f8 = float __attribute__((vector_size(32)));
        using d8 = double __attribute__((vector_size(64)));
        d8 v[kTileRows][2] = {};
        for (std::size_t kk = 0; kk < k; ++kk) {
            const float* brow = b + kk * n + j0;
            f8 lo, hi;
            std::memcpy(&lo, brow, sizeof lo);
            std::memcpy(&hi, brow + 8, sizeof hi);
            const d8 b0 = __builtin_convertvector(lo, d8);
            const d8 b1 = __builtin_convertvector(hi, d8);
            for (std::size_t ii = 0; ii < kTileRows; ++ii) {
                const double aik = a[(i0 + ii) * a_row + kk * a_step];
                v[ii][0] += aik * b0;
                v[ii][1] += aik * b1;
            }
        }
        for (std::size_t ii = 0; ii < kTileRows; ++ii)
            for (std::size_t jj = 0; jj < 8; ++jj) acc[ii][jj] = v[ii][0][jj], acc[ii][jj + 8] = v[ii][1][jj];
    } else {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const float* brow = b + kk * n + j0;
            for (std::size_t ii = 0; ii < ri; ++ii) {
                const double aik = a[(i0 + ii) * a_row + kk * a_step];
                for (std::size_t jj = 0; jj < cj; ++jj) acc[ii][jj] += aik * static_cast<double>(brow[jj]);
            }
        }
    }
    for (std::size_t ii = 0; ii < ri; ++ii) {
        float* crow = c + (i0 + ii) * n + j0;
        for (std::size_t jj = 0; jj < cj; ++jj) {
            if (accumulate) {
                crow[jj] += static_cast<float>(acc[ii][jj]);
            } else {
                crow[jj] = static_cast<float>(acc[ii][jj]);
            }
        }
    }
}

void gemm_tiled(const float* a, std::size_t a_row, std::size_t a_step, const float* b, float* c, std::size_t m,
                std::size_t k, std::size_t n, bool accumulate) {
    for (std::size_t i0 = 0; i0 < m; i0 += kTileRows) {
        const std::size_t ri = std::min(kTileRows, m - i0);
        for (std::size_t j0 = 0; j0 < n; j0 += kTileCols) {
            gemm_tile(a, a_row, a_step, b, c, i0, ri, j0, std::min(kTileCols, n - j0), k, n, accumulate);
        }
    }
}

}  // namespace

void gemm_nn(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
    gemm_tiled(a.data(), k, 1, b.data(), c.data(), m, k, n, accumulate);
}

void gemm_nt(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
    std::vector<float> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t kk = 0; kk < k; ++kk) bt[kk * n + j] = b[j * k + kk];
    gemm_nn(a, bt, c, m, k, n, accumulate);
}

void gemm_tn(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t r,
             std::size_t m, std::size_t n, bool accumulate) {
    // A is [r x m]; element (i, kk) of A^T sits at a[kk * m + i].
    gemm_tiled(a.data(), 1, m, b.data(), c.data(), m, r, n, accumulate);
}

double log_sum_exp(std::span<const float> x) {
    double mx = -INFINITY;
    for (float v : x) mx = std::max(mx, static_cast<double>(v));
    double s = 0.0;
    for (float v : x) s += std::exp(static_cast<double>(v) - mx);
    return mx + std::log(s);
}

}  // namespace kernels

namespace {

void check_finite(const Tensor& t, const char* op) {
    if (!checked_mode()) return;
    // Exponent bits all set means inf or NaN; the OR-reduction vectorizes.
    std::uint32_t bad = 0;
    for (float v : t.data()) bad |= static_cast<std::uint32_t>((std::bit_cast<std::uint32_t>(v) & 0x7F800000u) == 0x7F800000u);
    if (bad) throw NumericalError(std::string(op) + ": non-finite value in output");
}

template <typename OpT>
Tensor record(Tensor out, std::shared_ptr<OpT> op, std::vector<Tensor> inputs, const char* name) {
    check_finite(out, name);
    bool needs = false;
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
    if (needs) {
        op->inputs = std::move(inputs);
        out.set_requires_grad(true);
        out.set_producer(std::move(op));
    }
    return out;
}

void require_2d(const Tensor& t, const char* op) {
    if (t.dim() != 2) throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

struct MatmulOp final : Op {
    std::size_t m, k, n;
    const char* name() const override { return "matmul"; }
    void backward(const Tensor& out) override {
        auto g = out.grad();
        Tensor& a = inputs[0];
        Tensor& b = inputs[1];
        if (a.requires_grad()) kernels::gemm_nt(g, b.data(), a.grad(), m, n, k, true);
        if (b.requires_grad()) kernels::gemm_tn(a.data(), g, b.grad(), m, k, n, true);
    }
};

struct TransposeOp final : Op {
    std::size_t m, n;
    const char* name() const override { return "transpose"; }
    void backward(const Tensor& out) override {
        auto g = out.grad();
        auto ga = inputs[0].grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    }
};

struct LinearOp final : Op {
    std::size_t m, in, out_dim;
    const char* name() const override { return "linear"; }
    void backward(const Tensor& out) override {
        auto g = out.grad();
        Tensor& x = inputs[0];
        Tensor& w = inputs[1];
        if (x.requires_grad()) kernels::gemm_nn(g, w.data(), x.grad(), m, out_dim, in, true);
        if (w.requires_grad()) kernels::gemm_tn(g, x.data(), w.grad(), m, out_dim, in, true);
    }
};

struct AddOp final : Op {
    float sign_b = 1.0f;
    const char* name() const override { return sign_b > 0 ? "add" : "sub"; }
    void backward(const Tensor& out) override {
        auto g = out.grad();
        if (inputs[0].requires_grad()) {
            auto ga = inputs[0].grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (inputs[1].requires_grad()) {
            auto gb = inputs[1].grad();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign_b * g[i];
        }
    }
};

struct MulOp final : Op {
    const char* name() const override { return "mul"; }
    void backward(const Tensor& out) override {
        auto g = out.grad();
        const Tensor& a = inputs[0];
        const Tensor& b = inputs[1];
        if (a.requires_grad()) {
            auto ga = inputs[0].grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
        }
        if (b.requires_grad()) {
            auto gb = inputs[1].grad();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
        }
    }
};

struct AddBiasOp final : Op {
    std::size_t m, n;
    const char* name() const override { return "add_bias"; }
    void backward(const Tensor& out) override {
        auto g = out.grad();
        if (inputs[0].requires_grad()) {
            auto ga = inputs[0].grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (inputs[1].requires_grad()) {
            std::vector<double> acc(n, 0.0);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t j = 0; j < n; ++j) acc[j] += g[r * n + j];
            auto gb = inputs[1].grad();
            for (std::size_t j = 0; j < n; ++j) gb[j] += static_cast<float>(acc[j]);
        }
    }
};

struct ScaleOp final : Op {
    float factor;
    const char* name() const override { return "scale"; }
    void backward(const Tensor& out) override {
        auto g = out.grad();
        auto ga = inputs[0].grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
    }
};

struct SumOp final : Op {
    const char* name() const override { return "sum"; }
    void backward(const Tensor& out) override {
        const float g = out.grad()[0];
        auto ga = inputs[0].grad();
        for (float& v : ga) v += g;
    }
};

struct ConcatOp final : Op {
    const char* name() const override { return "concat"; }
    void backward(const Tensor& out) override {
        auto g = out.grad();
        std::size_t offset = 0;
        for (Tensor& part : inputs) {
            const std::size_t len = part.numel();
            if (part.requires_grad()) {
                auto gp = part.grad();
                for (std::size_t i = 0; i < len; ++i) gp[i] += g[offset + i];
            }
            offset += len;
        }
    }
};

struct GeluOp final : Op {
    std::vector<float> cdf;  // Phi(x) saved by the forward pass
    const char* name() const override { return "gelu"; }
    void backward(const Tensor& out) override {
        constexpr float kInvSqrt2Pi = 0.3989422804014327f;
        auto g = out.grad();
        auto x = inputs[0].data();
        auto gx = inputs[0].grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const float pdf = kInvSqrt2Pi * std::exp(-0.5f * x[i] * x[i]);
            gx[i] += g[i] * (cdf[i] + x[i] * pdf);
        }
    }
};

struct LayerNormOp final : Op {
    std::size_t m, d;
    std::vector<double> xhat;
    std::vector<double> inv_std;
    const char* name() const override { return "layer_norm"; }
    void backward(const Tensor& out) override {
        auto g = out.grad();
        Tensor& x = inputs[0];
        Tensor& gain = inputs[1];
        Tensor& bias = inputs[2];
        auto gv = gain.data();
        std::vector<double> dgain(d, 0.0), dbias(d, 0.0), dxhat(d);
        for (std::size_t r = 0; r < m; ++r) {
            const double* xh = xhat.data() + r * d;
            const float* gr = g.data() + r * d;
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                dgain[j] += gr[j] * xh[j];
                dbias[j] += gr[j];
                dxhat[j] = gr[j] * static_cast<double>(gv[j]);
                mean_dxhat += dxhat[j];
                mean_dxhat_xhat += dxhat[j] * xh[j];
            }
            mean_dxhat /= static_cast<double>(d);
            mean_dxhat_xhat /= static_cast<double>(d);
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::size_t j = 0; j < d; ++j) {
                    gx[r * d + j] += static_cast<float>(inv_std[r] *
                                                        (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat));
                }
            }
        }
        if (gain.requires_grad()) {
            auto gg = gain.grad();
            for (std::size_t j = 0; j < d; ++j) gg[j] += static_cast<float>(dgain[j]);
        }
        if (bias.requires_grad()) {
            auto gb = bias.grad();
            for (std::size_t j = 0; j < d; ++j) gb[j] += static_cast<float>(dbias[j]);
        }
    }
};

struct SoftmaxCrossEntropyOp final : Op {
    std::size_t m, v;
    std::vector<std::size_t> targets;
    std::vector<double> lse;
    const char* name() const override { return "softmax_cross_entropy"; }
    void backward(const Tensor& out) override {
        const double g = out.grad()[0] / static_cast<double>(m);
        auto logits = inputs[0].data();
        auto gl = inputs[0].grad();
        for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t j = 0; j < v; ++j) {
                double p = std::exp(static_cast<double>(logits[r * v + j]) - lse[r]);
                if (j == targets[r]) p -= 1.0;
                gl[r * v + j] += static_cast<float>(g * p);
            }
        }
    }
};

struct SoftmaxOp final : Op {
    const char* name() const override { return "softmax"; }
    void backward(const Tensor& out) override {
        auto g = out.grad();
        auto y = out.data();
        double dot = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) dot += static_cast<double>(g[i]) * y[i];
        auto gx = inputs[0].grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += static_cast<float>(y[i] * (g[i] - dot));
    }
};

struct EmbeddingOp final : Op {
    std::vector<std::size_t> ids;
    std::size_t d;
    const char* name() const override { return "embedding"; }
    void backward(const Tensor& out) override {
        auto g = out.grad();
        auto gt = inputs[0].grad();
        for (std::size_t r = 0; r < ids.size(); ++r)
            for (std::size_t j = 0; j < d; ++j) gt[ids[r] * d + j] += g[r * d + j];
    }
};

struct AttentionOp final : Op {
    std::size_t batch, seq_len, d, heads, dh;
    double inv_sqrt;
    std::vector<float> probs;  // [batch][heads][t][j], j <= t
    const char* name() const override { return "causal_attention"; }

    float* prob_row(std::size_t s, std::size_t h, std::size_t t) {
        return probs.data() + ((s * heads + h) * seq_len + t) * seq_len;
    }

    void backward(const Tensor& out) override {
        auto g = out.grad();
        auto q = inputs[0].data();
        auto k = inputs[1].data();
        auto v = inputs[2].data();
        const bool need_q = inputs[0].requires_grad();
        const bool need_k = inputs[1].requires_grad();
        const bool need_v = inputs[2].requires_grad();
        std::vector<double> dq(dh), dp(seq_len), ds(seq_len), vt(dh * seq_len);
        std::vector<double> dk(seq_len * d, 0.0), dv(seq_len * d, 0.0);
        std::span<float> gq, gk, gv;
        if (need_q) gq = inputs[0].grad();
        if (need_k) gk = inputs[1].grad();
        if (need_v) gv = inputs[2].grad();
        for (std::size_t s = 0; s < batch; ++s) {
            const std::size_t base = s * seq_len;
            std::fill(dk.begin(), dk.end(), 0.0);
            std::fill(dv.begin(), dv.end(), 0.0);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t off = h * dh;
                for (std::size_t j = 0; j < seq_len; ++j)
                    for (std::size_t c = 0; c < dh; ++c) vt[c * seq_len + j] = v[(base + j) * d + off + c];
                for (std::size_t t = 0; t < seq_len; ++t) {
                    const float* p = prob_row(s, h, t);
                    const float* go = g.data() + (base + t) * d + off;
                    std::fill(dp.begin(), dp.begin() + static_cast<std::ptrdiff_t>(t + 1), 0.0);
                    for (std::size_t c = 0; c < dh; ++c) {
                        const double gc = go[c];
                        const double* vc = vt.data() + c * seq_len;
                        for (std::size_t j = 0; j <= t; ++j) dp[j] += gc * vc[j];
                    }
                    double weighted = 0.0;
                    for (std::size_t j = 0; j <= t; ++j) {
                        weighted += p[j] * dp[j];
                        double* dvj = dv.data() + j * d + off;
                        for (std::size_t c = 0; c < dh; ++c) dvj[c] += p[j] * static_cast<double>(go[c]);
                    }
                    std::fill(dq.begin(), dq.end(), 0.0);
                    const float* qt = q.data() + (base + t) * d + off;
                    for (std::size_t j = 0; j <= t; ++j) {
                        ds[j] = p[j] * (dp[j] - weighted) * inv_sqrt;
                        const float* kj = k.data() + (base + j) * d + off;
                        for (std::size_t c = 0; c < dh; ++c) dq[c] += ds[j] * kj[c];
                        double* dkj = dk.data() + j * d + off;
                        for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds[j] * static_cast<double>(qt[c]);
                    }
                    if (need_q) {
                        float* gqt = gq.data() + (base + t) * d + off;
                        for (std::size_t c = 0; c < dh; ++c) gqt[c] += static_cast<float>(dq[c]);
                    }
                }
            }
            for (std::size_t t = 0; t < seq_len; ++t) {
                for (std::size_t c = 0; c < d; ++c) {
                    if (need_k) gk[(base + t) * d + c] += static_cast<float>(dk[t * d + c]);
                    if (need_v) gv[(base + t) * d + c] += static_cast<float>(dv[t * d + c]);
                }
            }
        }
    }
};

struct WeightedSumOp final : Op {
    std::size_t parts;
    const char* name() const override { return "weighted_sum"; }
    void backward(const Tensor& out) override {
        auto g = out.grad();
        const Tensor& w = inputs[parts];
        auto wv = w.data();
        std::vector<double> dw(parts, 0.0);
        for (std::size_t i = 0; i < parts; ++i) {
            Tensor& x = inputs[i];
            auto xv = x.data();
            for (std::size_t e = 0; e < g.size(); ++e) dw[i] += static_cast<double>(g[e]) * xv[e];
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::size_t e = 0; e < g.size(); ++e) gx[e] += wv[i] * g[e];
            }
        }
        if (inputs[parts].requires_grad()) {
            auto gw = inputs[parts].grad();
            for (std::size_t i = 0; i < parts; ++i) gw[i] += static_cast<float>(dw[i]);
        }
    }
};

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out({m, n});
    kernels::gemm_nn(a.data(), b.data(), out.data(), m, k, n, false);
    auto op = std::make_shared<MatmulOp>();
    op->m = m;
    op->k = k;
    op->n = n;
    return record(out, op, {a, b}, "matmul");
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out({n, m});
    auto src = a.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    auto op = std::make_shared<TransposeOp>();
    op->m = m;
    op->n = n;
    return record(out, op, {a}, "transpose");
}

Tensor linear(const Tensor& x, const Tensor& weight) {
    require_2d(weight, "linear");
    if (x.cols() != weight.shape()[1]) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    const std::size_t m = x.rows(), in = weight.shape()[1], out_dim = weight.shape()[0];
    Tensor out(x.dim() == 1 ? Shape{out_dim} : Shape{m, out_dim});
    kernels::gemm_nt(x.data(), weight.data(), out.data(), m, in, out_dim, false);
    auto op = std::make_shared<LinearOp>();
    op->m = m;
    op->in = in;
    op->out_dim = out_dim;
    return record(out, op, {x, weight}, "linear");
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] + b.data()[i];
    return record(out, std::make_shared<AddOp>(), {a, b}, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] - b.data()[i];
    auto op = std::make_shared<AddOp>();
    op->sign_b = -1.0f;
    return record(out, op, {a, b}, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * b.data()[i];
    return record(out, std::make_shared<MulOp>(), {a, b}, "mul");
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
    if (bias.dim() != 1 || bias.numel() != a.cols()) {
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(a.shape()));
    }
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out(a.shape());
    auto o = out.data();
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j) o[r * n + j] = a.data()[r * n + j] + bias.data()[j];
    auto op = std::make_shared<AddBiasOp>();
    op->m = m;
    op->n = n;
    return record(out, op, {a, bias}, "add_bias");
}

Tensor scale(const Tensor& a, float factor) {
    Tensor out(a.shape());
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = factor * a.data()[i];
    auto op = std::make_shared<ScaleOp>();
    op->factor = factor;
    return record(out, op, {a}, "scale");
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    return record(Tensor::scalar(static_cast<float>(acc)), std::make_shared<SumOp>(), {a}, "sum");
}

Tensor concat(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const bool vectors = parts[0].dim() == 1;
    const std::size_t cols = parts[0].cols();
    std::size_t rows = 0;
    std::vector<float> data;
    for (const Tensor& p : parts) {
        if ((p.dim() == 1) != vectors || p.cols() != cols || p.dim() > 2) {
            throw ShapeError("concat: incompatible part " + shape_str(p.shape()) + " after " +
                             shape_str(parts[0].shape()));
        }
        rows += p.rows();
        data.insert(data.end(), p.data().begin(), p.data().end());
    }
    Tensor out(vectors ? Shape{data.size()} : Shape{rows, cols}, std::move(data));
    return record(out, std::make_shared<ConcatOp>(), std::vector<Tensor>(parts.begin(), parts.end()), "concat");
}

Tensor gelu(const Tensor& x) {
    Tensor out(x.shape());
    auto o = out.data();
    auto xv = x.data();
    auto op = std::make_shared<GeluOp>();
    op->cdf.resize(o.size());
    constexpr float kInvSqrt2 = 0.7071067811865476f;
    for (std::size_t i = 0; i < o.size(); ++i) {
        op->cdf[i] = 0.5f * (1.0f + std::erf(xv[i] * kInvSqrt2));
        o[i] = xv[i] * op->cdf[i];
    }
    return record(out, op, {x}, "gelu");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    const std::size_t d = x.cols();
    if (d < 2) throw DegenerateInputError("layer_norm: normalized dimension must be >= 2, got " + std::to_string(d));
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
        throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
    }
    const std::size_t m = x.rows();
    auto op = std::make_shared<LayerNormOp>();
    op->m = m;
    op->d = d;
    op->xhat.resize(m * d);
    op->inv_std.resize(m);
    Tensor out(x.shape());
    auto xv = x.data();
    auto o = out.data();
    for (std::size_t r = 0; r < m; ++r) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xv[r * d + j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xv[r * d + j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        op->inv_std[r] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (xv[r * d + j] - mean) * inv;
            op->xhat[r * d + j] = xh;
            o[r * d + j] = static_cast<float>(xh * gain.data()[j] + bias.data()[j]);
        }
    }
    return record(out, op, {x, gain, bias}, "layer_norm");
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
    const std::size_t m = logits.rows(), v = logits.cols();
    if (targets.size() != m) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(m) + " rows");
    }
    auto op = std::make_shared<SoftmaxCrossEntropyOp>();
    op->m = m;
    op->v = v;
    op->targets.assign(targets.begin(), targets.end());
    op->lse.resize(m);
    double total = 0.0;
    auto lv = logits.data();
    for (std::size_t r = 0; r < m; ++r) {
        if (targets[r] >= v) {
            throw IndexError("softmax_cross_entropy: target " + std::to_string(targets[r]) +
                             " outside vocabulary of " + std::to_string(v));
        }
        const double lse = kernels::log_sum_exp(lv.subspan(r * v, v));
        op->lse[r] = lse;
        total += lse - static_cast<double>(lv[r * v + targets[r]]);
    }
    Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(m)));
    return record(out, op, {logits}, "softmax_cross_entropy");
}

Tensor softmax(const Tensor& x) {
    if (x.dim() != 1) throw ShapeError("softmax: expected a vector, got " + shape_str(x.shape()));
    const double lse = kernels::log_sum_exp(x.data());
    Tensor out(x.shape());
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<float>(std::exp(x.data()[i] - lse));
    return record(out, std::make_shared<SoftmaxOp>(), {x}, "softmax");
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
    require_2d(table, "embedding");
    const std::size_t vocab = table.shape()[0], d = table.shape()[1];
    if (ids.empty()) throw ShapeError("embedding: empty id list");
    Tensor out({ids.size(), d});
    auto o = out.data();
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] >= vocab) {
            throw IndexError("embedding: id " + std::to_string(ids[r]) + " outside table of " + std::to_string(vocab));
        }
        std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d, o.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    auto op = std::make_shared<EmbeddingOp>();
    op->ids.assign(ids.begin(), ids.end());
    op->d = d;
    return record(out, op, {table}, "embedding");
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        std::size_t seq_len) {
    require_2d(q, "causal_attention");
    require_same_shape(q, k, "causal_attention");
    require_same_shape(q, v, "causal_attention");
    const std::size_t rows = q.shape()[0], d = q.shape()[1];
    if (n_heads == 0 || d % n_heads != 0) {
        throw ShapeError("causal_attention: d_model " + std::to_string(d) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
    }
    if (seq_len == 0 || rows % seq_len != 0) {
        throw ShapeError("causal_attention: " + std::to_string(rows) + " rows is not a multiple of seq_len " +
                         std::to_string(seq_len));
    }
    auto op = std::make_shared<AttentionOp>();
    op->batch = rows / seq_len;
    op->seq_len = seq_len;
    op->d = d;
    op->heads = n_heads;
    op->dh = d / n_heads;
    op->inv_sqrt = 1.0 / std::sqrt(static_cast<double>(op->dh));
    op->probs.assign(op->batch * n_heads * seq_len * seq_len, 0.0f);

    Tensor out({rows, d});
    auto qv = q.data(), kv = k.data(), vv = v.data();
    auto o = out.data();
    const std::size_t dh = op->dh;
    std::vector<double> scores(seq_len), acc(dh), kt(dh * seq_len);
    for (std::size_t s = 0; s < op->batch; ++s) {
        const std::size_t base = s * seq_len;
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t off = h * dh;
            // Keys of this head transposed to [dh x seq_len] so the score
            // loop runs contiguously over positions.
            for (std::size_t j = 0; j < seq_len; ++j)
                for (std::size_t c = 0; c < dh; ++c) kt[c * seq_len + j] = kv[(base + j) * d + off + c];
            for (std::size_t t = 0; t < seq_len; ++t) {
                const float* qt = qv.data() + (base + t) * d + off;
                std::fill(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(t + 1), 0.0);
                for (std::size_t c = 0; c < dh; ++c) {
                    const double qc = qt[c];
                    const double* kc = kt.data() + c * seq_len;
                    for (std::size_t j = 0; j <= t; ++j) scores[j] += qc * kc[j];
                }
                double mx = -INFINITY;
                for (std::size_t j = 0; j <= t; ++j) {
                    scores[j] *= op->inv_sqrt;
                    mx = std::max(mx, scores[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j <= t; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    z += scores[j];
                }
                float* p = op->prob_row(s, h, t);
                std::fill(acc.begin(), acc.end(), 0.0);
                for (std::size_t j = 0; j <= t; ++j) {
                    const double pj = scores[j] / z;
                    p[j] = static_cast<float>(pj);
                    const float* vj = vv.data() + (base + j) * d + off;
                    for (std::size_t c = 0; c < dh; ++c) acc[c] += pj * vj[c];
                }
                float* ot = o.data() + (base + t) * d + off;
                for (std::size_t c = 0; c < dh; ++c) ot[c] = static_cast<float>(acc[c]);
            }
        }
    }
    return record(out, op, {q, k, v}, "causal_attention");
}

Tensor weighted_sum(std::span<const Tensor> parts, const Tensor& weights) {
    if (parts.empty()) throw ShapeError("weighted_sum: no inputs");
    if (weights.dim() != 1 || weights.numel() != parts.size()) {
        throw ShapeError("weighted_sum: " + std::to_string(parts.size()) + " parts but weights " +
                         shape_str(weights.shape()));
    }
    for (const Tensor& p : parts) require_same_shape(parts[0], p, "weighted_sum");
    Tensor out(parts[0].shape());
    auto o = out.data();
    std::vector<double> acc(o.size(), 0.0);
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const double w = weights.data()[i];
        auto pv = parts[i].data();
        for (std::size_t e = 0; e < acc.size(); ++e) acc[e] += w * pv[e];
    }
    for (std::size_t e = 0; e < acc.size(); ++e) o[e] = static_cast<float>(acc[e]);
    auto op = std::make_shared<WeightedSumOp>();
    op->parts = parts.size();
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    inputs.push_back(weights);
    return record(out, op, std::move(inputs), "weighted_sum");
}

}  // namespace mpq
