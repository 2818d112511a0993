#include "mpq/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "mpq/errors.hpp"
#include "mpq/ops.hpp"
#include "mpq/random.hpp"

namespace mpq {

void ModelConfig::validate() const {
    if (vocab < 2) throw ConfigError("model: vocabulary must hold at least 2 symbols");
    if (!d_model || !d_ff || !n_heads || !n_layers || !max_len) throw ConfigError("model: all dimensions must be positive");
    if (d_model % n_heads != 0) {
        throw ConfigError("model: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                          std::to_string(n_heads));
    }
    if (d_model < 2) throw ConfigError("model: d_model must be >= 2 for LayerNorm");
}

namespace {

Tensor uniform_matrix(Rng& rng, Shape shape) {
    std::vector<float> data(shape_numel(shape));
    for (float& v : data) v = static_cast<float>(rng.uniform(-0.1, 0.1));
    return Tensor(std::move(shape), std::move(data));
}

const char* const kLayerSuffixes[] = {"Q", "K", "V", "Wh", "ln1.g", "ln1.b", "W1", "b1", "W2", "b2", "ln2.g", "ln2.b"};

std::vector<Tensor*> layer_slots(TransformerLayer& l) {
    return {&l.attn.Q,  &l.attn.K,  &l.attn.V,  &l.attn.Wh,  &l.attn.ln_gain, &l.attn.ln_bias,
            &l.ffn.W1,  &l.ffn.b1,  &l.ffn.W2,  &l.ffn.b2,   &l.ffn.ln_gain,  &l.ffn.ln_bias};
}

std::vector<Shape> layer_shapes(const ModelConfig& c) {
    const auto d = c.d_model, f = c.d_ff;
    return {{d, d}, {d, d}, {d, d}, {d, d}, {d}, {d}, {f, d}, {f}, {d, f}, {d}, {d}, {d}};
}

}  // namespace

std::vector<std::string> layer_parameter_names(std::size_t layer) {
    std::vector<std::string> names;
    for (const char* s : kLayerSuffixes) names.push_back("layer" + std::to_string(layer) + "." + s);
    return names;
}

TransformerLM::TransformerLM(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const auto d = config_.d_model;
    tok_ = uniform_matrix(rng, {config_.vocab, d});
    pos_ = uniform_matrix(rng, {config_.max_len, d});
    for (std::size_t i = 0; i < config_.n_layers; ++i) {
        TransformerLayer layer;
        layer.index = i;
        layer.n_heads = config_.n_heads;
        layer.attn.Q = uniform_matrix(rng, {d, d});
        layer.attn.K = uniform_matrix(rng, {d, d});
        layer.attn.V = uniform_matrix(rng, {d, d});
        layer.attn.Wh = uniform_matrix(rng, {d, d});
        layer.attn.ln_gain = Tensor({d}, 1.0f);
        layer.attn.ln_bias = Tensor({d}, 0.0f);
        layer.ffn.W1 = uniform_matrix(rng, {config_.d_ff, d});
        layer.ffn.b1 = Tensor({config_.d_ff}, 0.0f);
        layer.ffn.W2 = uniform_matrix(rng, {d, config_.d_ff});
        layer.ffn.b2 = Tensor({d}, 0.0f);
        layer.ffn.ln_gain = Tensor({d}, 1.0f);
        layer.ffn.ln_bias = Tensor({d}, 0.0f);
        layers_.push_back(std::move(layer));
    }
    if (!config_.tied_output) out_ = uniform_matrix(rng, {config_.vocab, d});
}

std::vector<NamedTensor> TransformerLM::parameters() const {
    std::vector<NamedTensor> out;
    out.push_back({"embed.tok", tok_});
    out.push_back({"embed.pos", pos_});
    for (const TransformerLayer& layer : layers_) {
        auto names = layer_parameter_names(layer.index);
        auto slots = layer_slots(const_cast<TransformerLayer&>(layer));
        for (std::size_t i = 0; i < names.size(); ++i) out.push_back({names[i], *slots[i]});
    }
    if (!config_.tied_output) out.push_back({"out.proj", out_});
    return out;
}

std::optional<Tensor> TransformerLM::find(const std::string& name) const {
    for (auto& p : parameters())
        if (p.name == name) return p.tensor;
    return std::nullopt;
}

std::size_t TransformerLM::parameter_count() const {
    std::size_t n = 0;
    for (auto& p : parameters()) n += p.tensor.numel();
    return n;
}

void TransformerLM::set_trainable(bool on) {
    for (auto& p : parameters()) p.tensor.set_requires_grad(on);
}

TransformerLM TransformerLM::clone() const {
    std::vector<NamedTensor> copies;
    for (auto& p : parameters()) copies.push_back({p.name, p.tensor.clone()});
    return from_parameters(config_, copies);
}

TransformerLM TransformerLM::from_parameters(const ModelConfig& config, const std::vector<NamedTensor>& params) {
    config.validate();
    std::map<std::string, Tensor> by_name;
    for (const auto& p : params) by_name[p.name] = p.tensor;
    auto take = [&](const std::string& name, const Shape& shape) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError("missing parameter '" + name + "'");
        if (it->second.shape() != shape) {
            throw FormatError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                              shape_str(shape));
        }
        return it->second;
    };
    TransformerLM model;
    model.config_ = config;
    model.tok_ = take("embed.tok", {config.vocab, config.d_model});
    model.pos_ = take("embed.pos", {config.max_len, config.d_model});
    const auto shapes = layer_shapes(config);
    for (std::size_t i = 0; i < config.n_layers; ++i) {
        TransformerLayer layer;
        layer.index = i;
        layer.n_heads = config.n_heads;
        auto names = layer_parameter_names(i);
        auto slots = layer_slots(layer);
        for (std::size_t j = 0; j < names.size(); ++j) *slots[j] = take(names[j], shapes[j]);
        model.layers_.push_back(std::move(layer));
    }
    if (!config.tied_output) model.out_ = take("out.proj", {config.vocab, config.d_model});
    return model;
}

// ---------------------------------------------------------------------------

Tensor attention_block(const AttentionSublayer& p, std::size_t n_heads, const Tensor& x, std::size_t seq_len) {
    Tensor q = linear(x, p.Q);
    Tensor k = linear(x, p.K);
    Tensor v = linear(x, p.V);
    Tensor y = add(linear(causal_attention(q, k, v, n_heads, seq_len), p.Wh), x);
    return layer_norm(y, p.ln_gain, p.ln_bias);
}

Tensor feed_forward_block(const FeedForwardSublayer& p, const Tensor& z) {
    Tensor h = gelu(add_bias(linear(z, p.W1), p.b1));
    Tensor s = add(add_bias(linear(h, p.W2), p.b2), z);
    return layer_norm(s, p.ln_gain, p.ln_bias);
}

Tensor embed(const TransformerLM& model, std::span<const std::size_t> tokens, std::size_t seq_len) {
    const auto& c = model.config();
    if (seq_len == 0 || tokens.size() % seq_len != 0) throw ShapeError("embed: token count not a multiple of seq_len");
    if (seq_len > c.max_len) {
        throw ShapeError("sequence of length " + std::to_string(seq_len) + " exceeds max_len " +
                         std::to_string(c.max_len));
    }
    for (std::size_t t : tokens) {
        if (t >= c.vocab) throw IndexError("token " + std::to_string(t) + " outside vocabulary of " + std::to_string(c.vocab));
    }
    std::vector<std::size_t> positions(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = i % seq_len;
    return add(embedding(model.token_embedding(), tokens), embedding(model.position_embedding(), positions));
}

Tensor forward_logits(const TransformerLM& model, std::span<const std::size_t> tokens, std::size_t seq_len) {
    Tensor x = embed(model, tokens, seq_len);
    for (const TransformerLayer& layer : model.layers()) {
        x = attention_block(layer.attn, layer.n_heads, x, seq_len);
        x = feed_forward_block(layer.ffn, x);
    }
    return linear(x, model.output_projection());
}

Tensor batch_loss(const TransformerLM& model, const Batch& batch) {
    return softmax_cross_entropy(forward_logits(model, batch.inputs, batch.seq_len), batch.targets);
}

std::vector<Batch> make_batches(std::span<const std::size_t> stream, std::size_t seq_len, std::size_t batch_size) {
    if (seq_len == 0 || batch_size == 0) throw ConfigError("make_batches: seq_len and batch_size must be positive");
    std::vector<Batch> batches;
    Batch current;
    current.seq_len = seq_len;
    for (std::size_t start = 0; start + seq_len < stream.size(); start += seq_len) {
        current.inputs.insert(current.inputs.end(), stream.begin() + static_cast<std::ptrdiff_t>(start),
                              stream.begin() + static_cast<std::ptrdiff_t>(start + seq_len));
        current.targets.insert(current.targets.end(), stream.begin() + static_cast<std::ptrdiff_t>(start + 1),
                               stream.begin() + static_cast<std::ptrdiff_t>(start + seq_len + 1));
        if (current.size() == batch_size) {
            batches.push_back(std::move(current));
            current = Batch{};
            current.seq_len = seq_len;
        }
    }
    if (current.size() > 0) batches.push_back(std::move(current));
    return batches;
}

std::vector<double> row_nll(const Tensor& logits, std::span<const std::size_t> targets) {
    const std::size_t v = logits.cols();
    std::vector<double> out(targets.size());
    for (std::size_t r = 0; r < targets.size(); ++r) {
        auto row = logits.data().subspan(r * v, v);
        out[r] = kernels::log_sum_exp(row) - static_cast<double>(row[targets[r]]);
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

// y = W x for W [out x in], double accumulation.
std::vector<double> matvec(const Tensor& w, std::span<const double> x) {
    const std::size_t out = w.shape()[0], in = w.shape()[1];
    std::vector<double> y(out, 0.0);
    auto wv = w.data();
    for (std::size_t i = 0; i < out; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < in; ++j) s += static_cast<double>(wv[i * in + j]) * x[j];
        y[i] = s;
    }
    return y;
}

std::vector<double> layer_norm_vec(std::span<const double> x, const Tensor& gain, const Tensor& bias) {
    const std::size_t d = x.size();
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    std::vector<double> y(d);
    for (std::size_t i = 0; i < d; ++i) y[i] = (x[i] - mean) * inv * gain.data()[i] + bias.data()[i];
    return y;
}

std::vector<double> widen(std::span<const float> x) { return {x.begin(), x.end()}; }

std::vector<float> narrow(const std::vector<double>& x) { return {x.begin(), x.end()}; }

}  // namespace

std::vector<float> attention_step(const TransformerLayer& layer, std::span<const float> x_t, AttentionState& state) {
    const std::size_t d = layer.d_model();
    if (x_t.size() != d) {
        throw ShapeError("attention_step: input of width " + std::to_string(x_t.size()) + ", layer expects " +
                         std::to_string(d));
    }
    if (state.layer_index != layer.index || (state.d_model != 0 && state.d_model != d)) {
        throw StateMismatchError("attention_step: state belongs to layer " + std::to_string(state.layer_index) +
                                 ", called with layer " + std::to_string(layer.index));
    }
    state.d_model = d;
    const auto x = widen(x_t);
    const auto q = matvec(layer.attn.Q, x);
    const auto k = matvec(layer.attn.K, x);
    const auto v = matvec(layer.attn.V, x);
    state.keys.insert(state.keys.end(), k.begin(), k.end());
    state.values.insert(state.values.end(), v.begin(), v.end());

    const std::size_t steps = state.steps();
    const std::size_t dh = d / layer.n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> att(d, 0.0);
    std::vector<double> scores(steps);
    for (std::size_t h = 0; h < layer.n_heads; ++h) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < steps; ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < dh; ++c) dot += q[h * dh + c] * static_cast<double>(state.keys[j * d + h * dh + c]);
            scores[j] = dot * inv_sqrt;
            mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < steps; ++j) z += (scores[j] = std::exp(scores[j] - mx));
        for (std::size_t j = 0; j < steps; ++j) {
            const double p = scores[j] / z;
            for (std::size_t c = 0; c < dh; ++c) att[h * dh + c] += p * static_cast<double>(state.values[j * d + h * dh + c]);
        }
    }
    std::vector<double> y = matvec(layer.attn.Wh, att);
    for (std::size_t i = 0; i < d; ++i) y[i] += x[i];
    return narrow(layer_norm_vec(y, layer.attn.ln_gain, layer.attn.ln_bias));
}

std::vector<float> feed_forward(const TransformerLayer& layer, std::span<const float> z_t) {
    const std::size_t d = layer.d_model();
    if (z_t.size() != d) {
        throw ShapeError("feed_forward: input of width " + std::to_string(z_t.size()) + ", layer expects " +
                         std::to_string(d));
    }
    const auto z = widen(z_t);
    auto h = matvec(layer.ffn.W1, z);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = kernels::gelu(h[i] + layer.ffn.b1.data()[i]);
    auto s = matvec(layer.ffn.W2, h);
    for (std::size_t i = 0; i < d; ++i) s[i] += layer.ffn.b2.data()[i] + z[i];
    return narrow(layer_norm_vec(s, layer.ffn.ln_gain, layer.ffn.ln_bias));
}

namespace {

void check_sequence(const TransformerLM& model, std::span<const std::size_t> tokens) {
    const auto& c = model.config();
    if (tokens.size() > c.max_len) {
        throw ShapeError("sequence of length " + std::to_string(tokens.size()) + " exceeds max_len " +
                         std::to_string(c.max_len));
    }
    for (std::size_t t : tokens) {
        if (t >= c.vocab) throw IndexError("token " + std::to_string(t) + " outside vocabulary of " + std::to_string(c.vocab));
    }
}

}  // namespace

std::vector<double> forward_sequence(const TransformerLM& model, std::span<const std::size_t> tokens) {
    check_sequence(model, tokens);
    if (tokens.size() < 2) return {};
    const auto& c = model.config();
    std::vector<AttentionState> states;
    for (const auto& layer : model.layers()) states.emplace_back(layer.index, c.d_model);
    std::vector<double> nll;
    const Tensor& out = model.output_projection();
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        std::vector<float> x(c.d_model);
        for (std::size_t j = 0; j < c.d_model; ++j) {
            x[j] = model.token_embedding().data()[tokens[t] * c.d_model + j] +
                   model.position_embedding().data()[t * c.d_model + j];
        }
        for (const auto& layer : model.layers()) {
            x = attention_step(layer, x, states[layer.index]);
            x = feed_forward(layer, x);
        }
        const auto logits = narrow(matvec(out, widen(x)));
        nll.push_back(kernels::log_sum_exp(logits) - static_cast<double>(logits[tokens[t + 1]]));
    }
    return nll;
}

std::vector<double> forward_sequence_masked(const TransformerLM& model, std::span<const std::size_t> tokens) {
    check_sequence(model, tokens);
    if (tokens.size() < 2) return {};
    const std::size_t n = tokens.size() - 1;
    Tensor logits = forward_logits(model, tokens.first(n), n);
    return row_nll(logits, tokens.subspan(1));
}

std::pair<double, std::size_t> windowed_nll(const LogitsFn& logits, std::size_t window,
                                            std::span<const std::size_t> stream) {
    if (stream.size() < 2) throw EmptyInputError("perplexity: need at least two tokens");
    double total = 0.0;
    std::size_t count = 0;
    // Full windows in batches of 16, then the tail.
    const std::size_t predicted = stream.size() - 1;
    const std::size_t full = predicted / window;
    for (std::size_t first = 0; first < full; first += 16) {
        const std::size_t n = std::min<std::size_t>(16, full - first);
        std::vector<std::size_t> inputs, targets;
        for (std::size_t w = first; w < first + n; ++w) {
            auto win = stream.subspan(w * window, window + 1);
            inputs.insert(inputs.end(), win.begin(), win.end() - 1);
            targets.insert(targets.end(), win.begin() + 1, win.end());
        }
        for (double v : row_nll(logits(inputs, window), targets)) total += v;
        count += targets.size();
    }
    const std::size_t tail = predicted - full * window;
    if (tail > 0) {
        auto win = stream.subspan(full * window);
        for (double v : row_nll(logits(win.first(tail), tail), win.subspan(1))) total += v;
        count += tail;
    }
    return {total, count};
}

std::pair<double, std::size_t> total_nll(const TransformerLM& model, std::span<const std::size_t> stream) {
    return windowed_nll([&](std::span<const std::size_t> tokens, std::size_t seq_len) {
        return forward_logits(model, tokens, seq_len);
    }, model.config().max_len, stream);
}

double perplexity(const TransformerLM& model, std::span<const std::size_t> stream) {
    auto [total, count] = total_nll(model, stream);
    return std::exp(total / static_cast<double>(count));
}

}  // namespace mpq
