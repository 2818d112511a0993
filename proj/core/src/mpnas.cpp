#include "mpq/mpnas.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

#include "mpq/errors.hpp"
#include "mpq/ops.hpp"

namespace mpq {

namespace {

AttentionSublayer clone(const AttentionSublayer& a) {
    return {a.Q.clone(), a.K.clone(), a.V.clone(), a.Wh.clone(), a.ln_gain.clone(), a.ln_bias.clone()};
}

FeedForwardSublayer clone(const FeedForwardSublayer& f) {
    return {f.W1.clone(), f.b1.clone(), f.W2.clone(), f.b2.clone(), f.ln_gain.clone(), f.ln_bias.clone()};
}

std::string attn_id(std::size_t l) { return "layer" + std::to_string(l) + ".attn"; }
std::string ffn_id(std::size_t l) { return "layer" + std::to_string(l) + ".ffn"; }

std::vector<double> softmax_of(std::span<const float> logits) {
    double mx = -INFINITY;
    for (float x : logits) mx = std::max(mx, static_cast<double>(x));
    std::vector<double> w(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) z += (w[i] = std::exp(logits[i] - mx));
    for (auto& x : w) x /= z;
    return w;
}

void project_matrices(std::vector<Tensor> mats, int bits) {
    std::vector<float> values;
    for (const auto& m : mats) values.insert(values.end(), m.data().begin(), m.data().end());
    const ClusterQuantization q = quantize_cluster(values, bits);
    std::size_t k = 0;
    for (auto& m : mats) {
        for (auto& x : m.data()) x = q.table.value(q.levels[k++]);
    }
}

}  // namespace

Supernet::Supernet(const std::map<int, QuantizedModel>& uniform, int shared_bits) : shared_bits_(shared_bits) {
    if (uniform.empty()) throw IncompatibleError("supernet needs at least one uniform model");
    auto shared = uniform.find(shared_bits);
    if (shared == uniform.end()) {
        throw IncompatibleError("no uniform model at the shared width " + std::to_string(shared_bits));
    }
    shared_ = shared->second.dequantize();
    for (const auto& c : shared->second.clusters) {
        if (c.id.rfind("layer", 0) != 0) {
            fixed_bits_[c.id] = c.table.n_bits;
            fixed_sizes_[c.id] = c.count();
        }
    }
    for (const auto& [id, n] : shared->second.full_precision_clusters) {
        if (id.rfind("layer", 0) != 0) {
            fixed_bits_[id] = kFullPrecisionBits;
            fixed_sizes_[id] = n;
        }
    }
    const ModelConfig& cfg = shared_.config();
    layers_.resize(cfg.n_layers);
    for (const auto& [bits, qm] : uniform) {
        if (!(qm.config == cfg)) {
            throw IncompatibleError("uniform model at " + std::to_string(bits) + " bits has different dimensions");
        }
        const BitMap map = qm.bit_map();
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            for (const auto& id : {attn_id(l), ffn_id(l)}) {
                auto it = map.find(id);
                if (it == map.end() || it->second != bits) {
                    throw IncompatibleError("model offered as " + std::to_string(bits) + "-bit has cluster '" + id +
                                            "' at another width");
                }
            }
        }
        bits_.push_back(bits);
        const TransformerLM m = qm.dequantize();
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            layers_[l].attn.push_back(clone(m.layers()[l].attn));
            layers_[l].ffn.push_back(clone(m.layers()[l].ffn));
        }
    }
    for (auto& layer : layers_) {
        layer.attn_logits = Tensor(Shape{bits_.size()}, 0.0f);
        layer.ffn_logits = Tensor(Shape{bits_.size()}, 0.0f);
    }
}

Tensor Supernet::forward_logits(std::span<const std::size_t> tokens, std::size_t seq_len) const {
    const std::size_t heads = config().n_heads;
    Tensor x = embed(shared_, tokens, seq_len);
    for (const auto& layer : layers_) {
        std::vector<Tensor> parts;
        for (const auto& a : layer.attn) parts.push_back(attention_block(a, heads, x, seq_len));
        x = weighted_sum(parts, softmax(layer.attn_logits));
        parts.clear();
        for (const auto& f : layer.ffn) parts.push_back(feed_forward_block(f, x));
        x = weighted_sum(parts, softmax(layer.ffn_logits));
    }
    return linear(x, shared_.output_projection());
}

Tensor Supernet::batch_nll(const Batch& batch) const {
    return softmax_cross_entropy(forward_logits(batch.inputs, batch.seq_len), batch.targets);
}

Tensor Supernet::penalty(double beta) const {
    std::vector<float> roots;
    for (int b : bits_) roots.push_back(static_cast<float>(std::sqrt(static_cast<double>(b))));
    const Tensor r(Shape{bits_.size()}, roots);
    std::vector<Tensor> terms;
    for (const auto& layer : layers_) {
        for (const Tensor* logits : {&layer.attn_logits, &layer.ffn_logits}) {
            terms.push_back(sum(mul(softmax(*logits), r)));
        }
    }
    Tensor total = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    return scale(total, static_cast<float>(beta));
}

std::vector<NamedTensor> Supernet::weight_parameters() const {
    std::vector<NamedTensor> out;
    for (const auto& p : shared_.parameters()) {
        if (p.name.rfind("layer", 0) != 0) out.push_back(p);
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        for (std::size_t i = 0; i < bits_.size(); ++i) {
            const std::string a = attn_id(l) + ".b" + std::to_string(bits_[i]) + ".";
            const auto& at = layers_[l].attn[i];
            for (const auto& [n, t] : {std::pair{"Q", at.Q}, {"K", at.K}, {"V", at.V}, {"Wh", at.Wh},
                                       {"ln_gain", at.ln_gain}, {"ln_bias", at.ln_bias}}) {
                out.push_back({a + n, t});
            }
            const std::string f = ffn_id(l) + ".b" + std::to_string(bits_[i]) + ".";
            const auto& ff = layers_[l].ffn[i];
            for (const auto& [n, t] : {std::pair{"W1", ff.W1}, {"b1", ff.b1}, {"W2", ff.W2}, {"b2", ff.b2},
                                       {"ln_gain", ff.ln_gain}, {"ln_bias", ff.ln_bias}}) {
                out.push_back({f + n, t});
            }
        }
    }
    return out;
}

std::vector<NamedTensor> Supernet::arch_parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        out.push_back({attn_id(l) + ".select", layers_[l].attn_logits});
        out.push_back({ffn_id(l) + ".select", layers_[l].ffn_logits});
    }
    return out;
}

SelectionWeights Supernet::selection(double beta) const {
    SelectionWeights w;
    w.beta = beta;
    const auto& c = config();
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        for (const bool is_attn : {true, false}) {
            const Tensor& logits = is_attn ? layers_[l].attn_logits : layers_[l].ffn_logits;
            SelectionDecision d;
            d.id = is_attn ? attn_id(l) : ffn_id(l);
            d.size = is_attn ? 4 * c.d_model * c.d_model : 2 * c.d_model * c.d_ff;
            d.bits = bits_;
            d.logits.assign(logits.data().begin(), logits.data().end());
            d.weights = softmax_of(logits.data());
            w.decisions.push_back(std::move(d));
        }
    }
    w.fixed_bits = fixed_bits_;
    w.fixed_sizes = fixed_sizes_;
    return w;
}

void Supernet::set_logits(const std::string& decision, std::span<const double> logits) {
    if (logits.size() != bits_.size()) throw ShapeError("set_logits: expected one logit per candidate");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        for (const bool is_attn : {true, false}) {
            if ((is_attn ? attn_id(l) : ffn_id(l)) != decision) continue;
            Tensor t = is_attn ? layers_[l].attn_logits : layers_[l].ffn_logits;
            for (std::size_t i = 0; i < logits.size(); ++i) t.data()[i] = static_cast<float>(logits[i]);
            return;
        }
    }
    throw ConfigError("supernet has no decision '" + decision + "'");
}

void Supernet::reproject() {
    for (auto& layer : layers_) {
        for (std::size_t i = 0; i < bits_.size(); ++i) {
            const auto& a = layer.attn[i];
            project_matrices({a.Q, a.K, a.V, a.Wh}, bits_[i]);
            const auto& f = layer.ffn[i];
            project_matrices({f.W1, f.W2}, bits_[i]);
        }
    }
}

TransformerLM Supernet::extract(const BitMap& bits) const {
    TransformerLM m = shared_.clone();
    const auto pick = [&](const std::string& id) {
        auto it = bits.find(id);
        if (it == bits.end()) throw ConfigError("no width chosen for '" + id + "'");
        auto at = std::find(bits_.begin(), bits_.end(), it->second);
        if (at == bits_.end()) throw ConfigError("'" + id + "' has no " + std::to_string(it->second) + "-bit candidate");
        return static_cast<std::size_t>(at - bits_.begin());
    };
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        m.layers()[l].attn = clone(layers_[l].attn[pick(attn_id(l))]);
        m.layers()[l].ffn = clone(layers_[l].ffn[pick(ffn_id(l))]);
    }
    return m;
}

double nas_loss(double nll, const SelectionWeights& weights) {
    double penalty = 0.0;
    for (const auto& d : weights.decisions) {
        for (std::size_t i = 0; i < d.bits.size(); ++i) penalty += d.weights[i] * std::sqrt(static_cast<double>(d.bits[i]));
    }
    return nll + weights.beta * penalty;
}

std::pair<double, std::size_t> supernet_total_nll(const Supernet& net, std::span<const std::size_t> stream) {
    return windowed_nll([&](std::span<const std::size_t> tokens, std::size_t seq_len) {
        return net.forward_logits(tokens, seq_len);
    }, net.config().max_len, stream);
}

std::vector<NasLogRow> search(Supernet& net, std::span<const std::size_t> stream, const NasConfig& config) {
    if (config.beta < 0.0) throw ConfigError("NAS beta must be non-negative");
    const std::size_t half = stream.size() / 2;
    const std::size_t seq = std::min(config.seq_len, net.config().max_len);
    const auto weight_batches = make_batches(stream.first(half), seq, config.batch_size);
    const auto arch_batches = make_batches(stream.subspan(half), seq, config.batch_size);
    if (weight_batches.empty() || arch_batches.empty()) throw EmptyInputError("NAS: training split too short to halve");
    const auto weights = net.weight_parameters();
    const auto arch = net.arch_parameters();
    const auto loss_of = [&](const Batch& b) { return add(net.batch_nll(b), net.penalty(config.beta)); };

    std::vector<NasLogRow> log;
    std::size_t arch_cursor = 0;
    for (std::size_t e = 0; e < config.epochs; ++e) {
        NasLogRow row;
        row.epoch = e;
        const auto order = epoch_order(weight_batches.size(), config.seed, e);
        for (std::size_t b : order) {
            const Batch& ab = arch_batches[arch_cursor++ % arch_batches.size()];
            row.arch_loss += sgd_step(arch, [&] { return loss_of(ab); }, config.arch_lr, config.clip);
            if (!config.freeze_weights) {
                row.weight_loss += sgd_step(weights, [&] { return loss_of(weight_batches[b]); }, config.lr, config.clip);
            }
        }
        row.arch_loss /= static_cast<double>(order.size());
        row.weight_loss /= static_cast<double>(order.size());
        if (!config.freeze_weights) net.reproject();
        const SelectionWeights sw = net.selection(config.beta);
        double bits = 0.0, size = 0.0;
        for (const auto& d : sw.decisions) {
            for (std::size_t i = 0; i < d.bits.size(); ++i) bits += static_cast<double>(d.size) * d.weights[i] * d.bits[i];
            size += static_cast<double>(d.size);
        }
        row.expected_bits = bits / size;
        log.push_back(row);
    }
    return log;
}

PrecisionAssignment extract_1best(const SelectionWeights& weights) {
    PrecisionAssignment a;
    double weighted = 0.0, total = 0.0;
    for (const auto& d : weights.decisions) {
        if (d.bits.empty() || d.weights.size() != d.bits.size()) {
            throw ConfigError("selection for '" + d.id + "' is malformed");
        }
        std::size_t best = 0;
        for (std::size_t i = 1; i < d.bits.size(); ++i) {
            if (d.weights[i] > d.weights[best] || (d.weights[i] == d.weights[best] && d.bits[i] < d.bits[best])) best = i;
        }
        a.bits[d.id] = d.bits[best];
        weighted += static_cast<double>(d.size) * d.bits[best];
        total += static_cast<double>(d.size);
    }
    for (const auto& [id, b] : weights.fixed_bits) {
        a.bits[id] = b;
        const double n = static_cast<double>(weights.fixed_sizes.at(id));
        weighted += n * b;
        total += n;
    }
    a.average_bits = total > 0.0 ? weighted / total : 0.0;
    return a;
}

void write_selection(std::ostream& os, const SelectionWeights& weights) {
    char line[256];
    std::snprintf(line, sizeof line, "#beta,%.17g\n", weights.beta);
    os << line;
    for (const auto& [id, b] : weights.fixed_bits) {
        os << "#fixed," << id << ',' << b << ',' << weights.fixed_sizes.at(id) << '\n';
    }
    os << "layer,sublayer,size,n_bits,logit,weight\n";
    for (const auto& d : weights.decisions) {
        const auto dot = d.id.find('.');
        const std::string layer = d.id.substr(5, dot - 5), sub = d.id.substr(dot + 1);
        for (std::size_t i = 0; i < d.bits.size(); ++i) {
            std::snprintf(line, sizeof line, "%s,%s,%zu,%d,%.17g,%.17g\n", layer.c_str(), sub.c_str(), d.size,
                          d.bits[i], d.logits[i], d.weights[i]);
            os << line;
        }
    }
}

namespace {

std::vector<std::string> fields_of(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) out.push_back(f);
    return out;
}

template <typename T>
T parse_as(const std::string& text, std::size_t line_no) {
    std::istringstream ss(text);
    T v{};
    ss >> v;
    if (ss.fail() || !ss.eof()) {
        throw FormatError("selection line " + std::to_string(line_no) + ": bad value '" + text + "'");
    }
    return v;
}

}  // namespace

SelectionWeights read_selection(std::istream& is) {
    SelectionWeights w;
    std::string line;
    std::size_t line_no = 0;
    bool header = false;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = fields_of(line);
        const auto bad = [&](const std::string& why) {
            return FormatError("selection line " + std::to_string(line_no) + ": " + why);
        };
        if (f[0] == "#beta") {
            if (f.size() != 2) throw bad("expected #beta,<value>");
            w.beta = parse_as<double>(f[1], line_no);
        } else if (f[0] == "#fixed") {
            if (f.size() != 4) throw bad("expected #fixed,<cluster>,<bits>,<size>");
            w.fixed_bits[f[1]] = parse_as<int>(f[2], line_no);
            w.fixed_sizes[f[1]] = parse_as<std::size_t>(f[3], line_no);
        } else if (f[0] == "layer") {
            header = true;
        } else {
            if (!header) throw bad("record before header");
            if (f.size() != 6) throw bad("expected 6 fields");
            const std::string id = "layer" + std::to_string(parse_as<std::size_t>(f[0], line_no)) + "." + f[1];
            if (f[1] != "attn" && f[1] != "ffn") throw bad("unknown sub-layer '" + f[1] + "'");
            if (w.decisions.empty() || w.decisions.back().id != id) {
                for (const auto& d : w.decisions) {
                    if (d.id == id) throw bad("decision '" + id + "' is not contiguous");
                }
                w.decisions.push_back({id, parse_as<std::size_t>(f[2], line_no), {}, {}, {}});
            }
            auto& d = w.decisions.back();
            d.bits.push_back(parse_as<int>(f[3], line_no));
            d.logits.push_back(parse_as<double>(f[4], line_no));
            d.weights.push_back(parse_as<double>(f[5], line_no));
        }
    }
    if (w.decisions.empty()) throw FormatError("selection file has no records");
    for (const auto& d : w.decisions) {
        double s = 0.0;
        for (double x : d.weights) s += x;
        if (std::abs(s - 1.0) > 1e-6) throw FormatError("selection weights of '" + d.id + "' do not sum to 1");
    }
    return w;
}

}  // namespace mpq
