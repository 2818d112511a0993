#include "mpq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mpq/checkpoint.hpp"
#include "mpq/errors.hpp"

namespace mpq {

bool QuantTable::valid_level(std::int32_t q) const {
    if (n_bits == 1) return q == 1 || q == -1;
    return q >= -max_level() && q <= max_level();
}

void QuantTable::validate() const {
    if (n_bits < 1 || n_bits > kMaxQuantBits) {
        throw ConfigError("quantization width must be 1.." + std::to_string(kMaxQuantBits) + " bits, got " +
                          std::to_string(n_bits));
    }
    if (!(alpha > 0.0) || !std::isfinite(alpha)) {
        throw DegenerateScaleError("quantization scale must be positive and finite, got " + std::to_string(alpha));
    }
}

namespace {

// Strict ordering used by every nearest-level search: distance, then
// smaller magnitude, then the positive level.
bool closer(double theta, double alpha, std::int32_t a, std::int32_t b) {
    const double da = std::abs(theta - alpha * a);
    const double db = std::abs(theta - alpha * b);
    if (da != db) return da < db;
    if (std::abs(a) != std::abs(b)) return std::abs(a) < std::abs(b);
    return a > b;
}

std::int32_t nearest_level(double theta, const QuantTable& t) {
    if (std::isnan(theta)) throw NumericalError("quantize_value: NaN input");
    if (t.n_bits == 1) return closer(theta, t.alpha, 1, -1) ? 1 : -1;
    const std::int32_t m = t.max_level();
    const double r = theta / t.alpha;
    std::int32_t q0;
    if (r >= m) {
        q0 = m;
    } else if (r <= -m) {
        q0 = -m;
    } else {
        q0 = static_cast<std::int32_t>(std::lround(r));
    }
    std::int32_t best = q0;
    for (std::int32_t q : {q0 - 1, q0 + 1}) {
        if (q >= -m && q <= m && closer(theta, t.alpha, q, best)) best = q;
    }
    return best;
}

struct Moments {
    double objective = 0.0;
    double wq = 0.0;
    double qq = 0.0;
};

Moments moments(std::span<const float> w, const QuantTable& t) {
    Moments m;
    for (float x : w) {
        const std::int32_t q = nearest_level(x, t);
        const double e = static_cast<double>(x) - t.alpha * q;
        m.objective += e * e;
        m.wq += static_cast<double>(x) * q;
        m.qq += static_cast<double>(q) * q;
    }
    return m;
}

struct Breakpoint {
    double alpha;
    double magnitude;
    std::int32_t from_level;
};

// Global minimizer of the objective over alpha for a grid with levels
// 0..m in magnitude. Between consecutive breakpoints a_i / (j + 1/2) the
// assignment is fixed, so the objective is a quadratic in alpha with a
// closed-form minimizer clamped to the interval.
double exact_scale(std::span<const float> w, std::int32_t m) {
    double sum_sq = 0.0;
    std::vector<Breakpoint> events;
    for (float x : w) {
        const double a = std::abs(static_cast<double>(x));
        sum_sq += a * a;
        if (a == 0.0) continue;
        for (std::int32_t j = 0; j < m; ++j) events.push_back({a / (j + 0.5), a, j});
    }
    std::sort(events.begin(), events.end(), [](const Breakpoint& x, const Breakpoint& y) {
        if (x.alpha != y.alpha) return x.alpha > y.alpha;
        if (x.magnitude != y.magnitude) return x.magnitude > y.magnitude;
        return x.from_level < y.from_level;
    });
    double best_alpha = events.front().alpha, best_obj = sum_sq;
    double wq = 0.0, qq = 0.0;
    for (std::size_t k = 0; k < events.size(); ++k) {
        wq += events[k].magnitude;
        qq += 2.0 * events[k].from_level + 1.0;
        const double hi = events[k].alpha;
        const double lo = k + 1 < events.size() ? events[k + 1].alpha : 0.0;
        if (lo == hi) continue;
        const double alpha = std::clamp(wq / qq, lo, hi);
        if (!(alpha > 0.0)) continue;
        const double obj = sum_sq - 2.0 * alpha * wq + alpha * alpha * qq;
        if (obj < best_obj) {
            best_obj = obj;
            best_alpha = alpha;
        }
    }
    return best_alpha;
}

double scanned_scale(std::span<const float> w, int n_bits) {
    double amax = 0.0;
    for (float x : w) amax = std::max(amax, std::abs(static_cast<double>(x)));
    QuantTable t{n_bits, amax};
    const double lo = amax / (2.0 * t.max_level()), hi = 2.0 * amax;
    constexpr int kPoints = 1024;
    double best_alpha = hi, best_obj = INFINITY;
    for (int i = 0; i < kPoints; ++i) {
        t.alpha = lo * std::pow(hi / lo, static_cast<double>(i) / (kPoints - 1));
        const double obj = moments(w, t).objective;
        if (obj < best_obj) {
            best_obj = obj;
            best_alpha = t.alpha;
        }
    }
    return best_alpha;
}

}  // namespace

QuantizedValue quantize_value(double theta, const QuantTable& table) {
    const std::int32_t q = nearest_level(theta, table);
    return {q, table.value(q)};
}

double quantization_objective(std::span<const float> weights, const QuantTable& table) {
    return moments(weights, table).objective;
}

ScaleFit fit_scale_traced(std::span<const float> weights, int n_bits, std::optional<double> initial_alpha) {
    if (weights.empty()) throw EmptyInputError("fit_scale: empty weight cluster");
    QuantTable probe{n_bits, 1.0};
    probe.validate();
    double abs_sum = 0.0;
    for (float x : weights) {
        if (!std::isfinite(x)) throw NumericalError("fit_scale: non-finite weight");
        abs_sum += std::abs(static_cast<double>(x));
    }
    if (abs_sum == 0.0) throw DegenerateScaleError("fit_scale: all weights are zero");

    ScaleFit fit;
    double alpha;
    if (initial_alpha) {
        alpha = *initial_alpha;
    } else if (n_bits == 1) {
        alpha = abs_sum / static_cast<double>(weights.size());
    } else if (weights.size() * static_cast<std::size_t>(probe.max_level()) <= kExactScaleLimit) {
        alpha = exact_scale(weights, probe.max_level());
    } else {
        alpha = scanned_scale(weights, n_bits);
    }
    fit.table = {n_bits, alpha};
    fit.table.validate();

    Moments cur = moments(weights, fit.table);
    fit.trace.push_back(cur.objective);
    while (fit.iterations < kFitScaleMaxIterations && cur.qq > 0.0) {
        const double next = cur.wq / cur.qq;
        if (!(next > 0.0)) break;
        const Moments cand = moments(weights, {n_bits, next});
        if (cand.objective > cur.objective) break;
        const double delta = std::abs(next - fit.table.alpha);
        fit.table.alpha = next;
        cur = cand;
        fit.trace.push_back(cur.objective);
        ++fit.iterations;
        if (delta < kFitScaleTolerance) break;
    }
    return fit;
}

QuantTable fit_scale(std::span<const float> weights, int n_bits) { return fit_scale_traced(weights, n_bits).table; }

// ---------------------------------------------------------------------------

std::vector<ClusterSpec> model_clusters(const ModelConfig& config, bool quantize_embeddings) {
    std::vector<ClusterSpec> out;
    if (quantize_embeddings) out.push_back({"embed", {"embed.tok", "embed.pos"}});
    for (std::size_t i = 0; i < config.n_layers; ++i) {
        const std::string p = "layer" + std::to_string(i);
        out.push_back({p + ".attn", {p + ".Q", p + ".K", p + ".V", p + ".Wh"}});
        out.push_back({p + ".ffn", {p + ".W1", p + ".W2"}});
    }
    if (quantize_embeddings && !config.tied_output) out.push_back({"out", {"out.proj"}});
    return out;
}

BitMap uniform_bit_map(const std::vector<ClusterSpec>& clusters, int bits) {
    BitMap map;
    for (const auto& c : clusters) map[c.id] = bits;
    return map;
}

namespace {

Tensor require_param(const TransformerLM& model, const std::string& name) {
    auto t = model.find(name);
    if (!t) throw ConfigError("cluster member '" + name + "' is not a model parameter");
    return *t;
}

}  // namespace

std::vector<float> gather_cluster(const TransformerLM& model, const ClusterSpec& cluster) {
    std::vector<float> out;
    for (const auto& name : cluster.members) {
        auto data = require_param(model, name).data();
        out.insert(out.end(), data.begin(), data.end());
    }
    return out;
}

std::size_t cluster_size(const TransformerLM& model, const ClusterSpec& cluster) {
    std::size_t n = 0;
    for (const auto& name : cluster.members) n += require_param(model, name).numel();
    return n;
}

ClusterQuantization quantize_with_table(std::span<const float> weights, const QuantTable& table) {
    table.validate();
    ClusterQuantization out;
    out.table = table;
    out.levels.resize(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const std::int32_t q = nearest_level(weights[i], table);
        out.levels[i] = q;
        const double e = static_cast<double>(weights[i]) - table.alpha * q;
        out.perturbation += e * e;
    }
    return out;
}

ClusterQuantization quantize_cluster(std::span<const float> weights, int n_bits) {
    return quantize_with_table(weights, fit_scale(weights, n_bits));
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> pack_levels(std::span<const std::int32_t> levels, int n_bits) {
    const QuantTable t{n_bits, 1.0};
    t.validate();
    std::vector<std::uint8_t> bytes((levels.size() * n_bits + 7) / 8, 0);
    std::size_t bit = 0;
    for (std::int32_t q : levels) {
        if (!t.valid_level(q)) throw ConfigError("level " + std::to_string(q) + " outside a " + std::to_string(n_bits) + "-bit grid");
        const std::uint32_t code = n_bits == 1 ? (q > 0 ? 1u : 0u) : static_cast<std::uint32_t>(q + t.max_level());
        for (int b = 0; b < n_bits; ++b, ++bit) {
            if ((code >> b) & 1u) bytes[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
        }
    }
    return bytes;
}

std::vector<std::int32_t> unpack_levels(std::span<const std::uint8_t> bytes, std::size_t count, int n_bits) {
    const QuantTable t{n_bits, 1.0};
    if (n_bits < 1 || n_bits > kMaxQuantBits) throw FormatError("unsupported code width " + std::to_string(n_bits));
    if (bytes.size() != (count * n_bits + 7) / 8) {
        throw FormatError("packed codes hold " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string((count * n_bits + 7) / 8));
    }
    std::vector<std::int32_t> levels(count);
    std::size_t bit = 0;
    for (auto& q : levels) {
        std::uint32_t code = 0;
        for (int b = 0; b < n_bits; ++b, ++bit) code |= static_cast<std::uint32_t>((bytes[bit / 8] >> (bit % 8)) & 1u) << b;
        if (n_bits == 1) {
            q = code ? 1 : -1;
        } else {
            if (code > static_cast<std::uint32_t>(2 * t.max_level())) {
                throw FormatError("packed code " + std::to_string(code) + " outside a " + std::to_string(n_bits) +
                                  "-bit grid");
            }
            q = static_cast<std::int32_t>(code) - t.max_level();
        }
    }
    return levels;
}

std::size_t QuantizedCluster::count() const {
    std::size_t n = 0;
    for (const auto& l : levels) n += l.size();
    return n;
}

TransformerLM QuantizedModel::dequantize() const {
    std::vector<NamedTensor> params;
    for (const auto& r : residue) params.push_back({r.name, r.tensor.clone()});
    for (const auto& c : clusters) {
        for (std::size_t m = 0; m < c.members.size(); ++m) {
            std::vector<float> values(c.levels[m].size());
            for (std::size_t i = 0; i < values.size(); ++i) values[i] = c.table.value(c.levels[m][i]);
            params.push_back({c.members[m], Tensor(c.shapes[m], std::move(values))});
        }
    }
    return TransformerLM::from_parameters(config, params);
}

double QuantizedModel::average_bits() const {
    double bits = 0.0, count = 0.0;
    for (const auto& c : clusters) {
        bits += static_cast<double>(c.count()) * c.table.n_bits;
        count += static_cast<double>(c.count());
    }
    for (const auto& [id, n] : full_precision_clusters) {
        bits += static_cast<double>(n) * kFullPrecisionBits;
        count += static_cast<double>(n);
    }
    return count > 0.0 ? bits / count : static_cast<double>(kFullPrecisionBits);
}

BitMap QuantizedModel::bit_map() const {
    BitMap map;
    for (const auto& c : clusters) map[c.id] = c.table.n_bits;
    for (const auto& [id, n] : full_precision_clusters) map[id] = kFullPrecisionBits;
    return map;
}

QuantizedModel quantize_model(const TransformerLM& model, const std::vector<ClusterSpec>& clusters,
                              const BitMap& bits) {
    QuantizedModel qm;
    qm.config = model.config();
    std::map<std::string, bool> quantized;
    for (const auto& spec : clusters) {
        auto it = bits.find(spec.id);
        if (it == bits.end()) throw ConfigError("no bit-width given for cluster '" + spec.id + "'");
        const int n = it->second;
        if (n == kFullPrecisionBits) {
            qm.full_precision_clusters[spec.id] = cluster_size(model, spec);
            continue;
        }
        const std::vector<float> weights = gather_cluster(model, spec);
        ClusterQuantization cq = quantize_cluster(weights, n);
        QuantizedCluster qc;
        qc.id = spec.id;
        qc.table = cq.table;
        qc.members = spec.members;
        std::size_t offset = 0;
        for (const auto& name : spec.members) {
            const Tensor t = require_param(model, name);
            if (quantized.count(name)) throw ConfigError("tensor '" + name + "' belongs to two clusters");
            quantized[name] = true;
            qc.shapes.push_back(t.shape());
            qc.levels.emplace_back(cq.levels.begin() + static_cast<std::ptrdiff_t>(offset),
                                   cq.levels.begin() + static_cast<std::ptrdiff_t>(offset + t.numel()));
            offset += t.numel();
        }
        qm.clusters.push_back(std::move(qc));
    }
    for (const auto& p : model.parameters()) {
        if (!quantized.count(p.name)) qm.residue.push_back({p.name, p.tensor.clone()});
    }
    return qm;
}

double model_size_mb(const QuantizedModel& qm) {
    double bits = 0.0;
    for (const auto& c : qm.clusters) bits += static_cast<double>(c.count()) * c.table.n_bits + 32.0;
    for (const auto& r : qm.residue) bits += 32.0 * static_cast<double>(r.tensor.numel());
    return bits / 8.0 / 1e6;
}

double model_size_mb(const TransformerLM& model) { return 4.0 * static_cast<double>(model.parameter_count()) / 1e6; }

double planned_size_mb(const TransformerLM& model, const std::vector<ClusterSpec>& clusters, const BitMap& bits) {
    std::map<std::string, std::size_t> sizes;
    for (const auto& p : model.parameters()) sizes[p.name] = p.tensor.numel();
    double bits_total = 0.0;
    std::size_t quantized = 0;
    for (const auto& spec : clusters) {
        auto it = bits.find(spec.id);
        if (it == bits.end()) throw ConfigError("no bit-width given for cluster '" + spec.id + "'");
        if (it->second == kFullPrecisionBits) continue;
        std::size_t n = 0;
        for (const auto& m : spec.members) n += sizes.at(m);
        bits_total += static_cast<double>(n) * it->second + 32.0;
        quantized += n;
    }
    bits_total += 32.0 * static_cast<double>(model.parameter_count() - quantized);
    return bits_total / 8.0 / 1e6;
}

double compression_ratio(double full_mb, double quant_mb) {
    if (!(full_mb > 0.0) || !(quant_mb > 0.0)) {
        throw ConfigError("compression_ratio: sizes must be positive");
    }
    return std::round(full_mb / quant_mb * 10.0) / 10.0;
}

// ---------------------------------------------------------------------------

namespace {

constexpr const char* kFullPrecisionPrefix = "fp_cluster.";

}  // namespace

void save_quantized(const std::filesystem::path& path, const QuantizedModel& qm) {
    container::Container c;
    c.magic = container::kQuantMagic;
    put_model_config(c, qm.config);
    for (const auto& [id, n] : qm.full_precision_clusters) {
        c.integers.push_back({kFullPrecisionPrefix + id, static_cast<std::int64_t>(n)});
    }
    for (const auto& q : qm.clusters) {
        container::ClusterRecord r;
        r.id = q.id;
        r.n_bits = q.table.n_bits;
        r.alpha = q.table.alpha;
        for (std::size_t m = 0; m < q.members.size(); ++m) {
            r.members.push_back({q.members[m], q.shapes[m], pack_levels(q.levels[m], q.table.n_bits)});
        }
        c.clusters.push_back(std::move(r));
    }
    for (const auto& t : qm.residue) {
        c.tensors.push_back({t.name, t.tensor.shape(), {t.tensor.data().begin(), t.tensor.data().end()}});
    }
    container::write_file(path, c);
}

QuantizedModel load_quantized(const std::filesystem::path& path) {
    container::Container c = container::read_file(path);
    const std::string where = "quantized checkpoint '" + path.string() + "'";
    if (c.magic != container::kQuantMagic) throw FormatError(where + " is not a quantized model");
    QuantizedModel qm;
    qm.config = get_model_config(c);
    const std::string prefix = kFullPrecisionPrefix;
    for (const auto& r : c.integers) {
        if (r.name.rfind(prefix, 0) == 0) qm.full_precision_clusters[r.name.substr(prefix.size())] = static_cast<std::size_t>(r.value);
    }
    for (auto& r : c.clusters) {
        QuantizedCluster q;
        q.id = r.id;
        q.table = {r.n_bits, r.alpha};
        try {
            q.table.validate();
        } catch (const Error& e) {
            throw FormatError(where + ", cluster '" + r.id + "', field 'n_bits/alpha': " + e.what());
        }
        for (auto& m : r.members) {
            q.members.push_back(m.name);
            q.shapes.push_back(m.shape);
            try {
                q.levels.push_back(unpack_levels(m.codes, shape_numel(m.shape), r.n_bits));
            } catch (const FormatError& e) {
                throw FormatError(where + ", cluster '" + r.id + "', member '" + m.name + "', field 'packed codes': " +
                                  e.what());
            }
        }
        qm.clusters.push_back(std::move(q));
    }
    for (auto& r : c.tensors) qm.residue.push_back({r.name, Tensor(r.shape, std::move(r.values))});
    try {
        qm.dequantize();
    } catch (const FormatError& e) {
        throw FormatError(where + ": " + e.what());
    }
    return qm;
}

TransformerLM load_any_model(const std::filesystem::path& path) {
    if (peek_magic(path) == container::kQuantMagic) return load_quantized(path).dequantize();
    return load_model(path);
}

}  // namespace mpq
