#include "mpq/hessian.hpp"

#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "mpq/errors.hpp"
#include "mpq/random.hpp"

namespace mpq {

std::vector<double> flat_gradient(const std::vector<NamedTensor>& params, const LossFn& loss) {
    const std::vector<Tensor> grads = loss_gradient(params, loss);
    std::vector<double> out;
    for (std::size_t i = 0; i < grads.size(); ++i) {
        for (float g : grads[i].data()) {
            if (!std::isfinite(g)) throw NumericalError("gradient of '" + params[i].name + "' is not finite");
            out.push_back(g);
        }
    }
    return out;
}

namespace {

std::size_t flat_size(const std::vector<NamedTensor>& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
}

void set_shifted(const std::vector<NamedTensor>& params, const std::vector<std::vector<float>>& base,
                 std::span<const double> v, double step) {
    std::size_t k = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].tensor;
        auto d = t.data();
        for (std::size_t j = 0; j < d.size(); ++j, ++k) {
            d[j] = static_cast<float>(base[i][j] + step * v[k]);
        }
    }
}

}  // namespace

std::vector<double> hvp(const std::vector<NamedTensor>& params, const LossFn& loss, std::span<const double> v,
                        double step) {
    if (v.size() != flat_size(params)) throw ShapeError("hvp: direction length does not match the parameters");
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (!(norm > 0.0) || !std::isfinite(norm)) throw NumericalError("hvp: direction must be finite and non-zero");
    // Rounded to a power of two so that t +- e v is exact for short mantissas.
    const double eps = std::exp2(std::round(std::log2(step / norm)));

    std::vector<std::vector<float>> base;
    for (const auto& p : params) base.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    const auto restore = [&] {
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor t = params[i].tensor;
            std::copy(base[i].begin(), base[i].end(), t.data().begin());
        }
    };
    std::vector<double> plus, minus;
    try {
        set_shifted(params, base, v, eps);
        plus = flat_gradient(params, loss);
        set_shifted(params, base, v, -eps);
        minus = flat_gradient(params, loss);
    } catch (...) {
        restore();
        throw;
    }
    restore();
    for (std::size_t i = 0; i < plus.size(); ++i) plus[i] = (plus[i] - minus[i]) / (2.0 * eps);
    return plus;
}

TraceEstimate hutchinson_trace(const std::vector<NamedTensor>& params, const LossFn& loss,
                               const std::vector<std::string>& members, std::size_t m, std::uint64_t seed,
                               ProbeKind probe) {
    if (m == 0) throw ConfigError("hutchinson_trace: sample count must be at least 1");
    const std::set<std::string> wanted(members.begin(), members.end());
    std::vector<std::pair<std::size_t, std::size_t>> ranges;  // [begin, end) in flat order
    std::size_t offset = 0, found = 0;
    for (const auto& p : params) {
        if (wanted.count(p.name)) {
            ranges.emplace_back(offset, offset + p.tensor.numel());
            ++found;
        }
        offset += p.tensor.numel();
    }
    if (found != wanted.size()) throw ConfigError("hutchinson_trace: a cluster member is not a parameter");

    std::vector<double> values(m);
    for (std::size_t s = 0; s < m; ++s) {
        Rng rng(seed * 0x9E3779B97F4A7C15ull + s + 1);
        std::vector<double> z(offset, 0.0);
        for (const auto& [b, e] : ranges) {
            for (std::size_t i = b; i < e; ++i) z[i] = probe == ProbeKind::kGaussian ? rng.normal() : rng.rademacher();
        }
        const std::vector<double> hz = hvp(params, loss, z);
        double q = 0.0;
        for (const auto& [b, e] : ranges) {
            for (std::size_t i = b; i < e; ++i) q += z[i] * hz[i];
        }
        values[s] = q;
    }
    TraceEstimate est;
    est.samples = m;
    double mean = 0.0;
    for (double x : values) mean += x;
    mean /= static_cast<double>(m);
    est.trace = mean;
    if (m > 1) {
        double var = 0.0;
        for (double x : values) var += (x - mean) * (x - mean);
        var /= static_cast<double>(m - 1);
        est.std_error = std::sqrt(var / static_cast<double>(m));
    }
    return est;
}

double cluster_sensitivity(double trace, double perturbation, std::size_t size, bool average_trace) {
    if (!(perturbation >= 0.0)) throw ConfigError("cluster_sensitivity: perturbation must be non-negative");
    if (!average_trace) return trace * perturbation;
    if (size == 0) throw ConfigError("cluster_sensitivity: cluster size must be positive");
    return (trace / static_cast<double>(size)) * perturbation;
}

const ClusterSensitivity& SensitivityReport::at(const std::string& id) const {
    for (const auto& c : clusters) {
        if (c.id == id) return c;
    }
    throw ConfigError("sensitivity report has no cluster '" + id + "'");
}

Batch probe_batch(std::span<const std::size_t> stream, std::size_t probe_tokens, std::size_t seq_len) {
    if (probe_tokens == 0) throw ConfigError("probe batch needs at least one token");
    const std::size_t windows = (probe_tokens + seq_len - 1) / seq_len;
    const auto batches = make_batches(stream, seq_len, windows);
    if (batches.empty()) throw EmptyInputError("probe split is shorter than one window");
    return batches.front();
}

SensitivityReport analyze_sensitivity(const TransformerLM& model, std::span<const std::size_t> probe_stream,
                                      const std::vector<ClusterSpec>& clusters, const SensitivityConfig& config) {
    TransformerLM work = model.clone();
    const auto params = work.parameters();
    const Batch batch = probe_batch(probe_stream, config.probe_tokens, std::min(config.seq_len, work.config().max_len));
    const TransformerLM& w = work;
    const LossFn loss = [&] { return batch_loss(w, batch); };

    SensitivityReport report;
    report.samples = config.samples;
    report.average_trace = config.average_trace;
    for (const auto& spec : clusters) {
        ClusterSensitivity cs;
        cs.id = spec.id;
        const std::vector<float> weights = gather_cluster(work, spec);
        cs.size = weights.size();
        const TraceEstimate est = hutchinson_trace(params, loss, spec.members, config.samples, config.seed, config.probe);
        const double scale = config.average_trace ? static_cast<double>(cs.size) : 1.0;
        cs.trace = est.trace / scale;
        cs.std_error = est.std_error / scale;
        for (int b : config.bits) {
            cs.perturbation[b] = quantize_cluster(weights, b).perturbation;
            cs.omega[b] = cs.trace * cs.perturbation[b];
        }
        report.clusters.push_back(std::move(cs));
    }
    return report;
}

void write_sensitivity(std::ostream& os, const SensitivityReport& report) {
    os << "cluster,size,samples,average_trace,n_bits,trace,std_error,perturbation,omega\n";
    char line[320];
    for (const auto& c : report.clusters) {
        for (const auto& [b, pert] : c.perturbation) {
            std::snprintf(line, sizeof line, "%s,%zu,%zu,%d,%d,%.17g,%.17g,%.17g,%.17g\n", c.id.c_str(), c.size,
                          report.samples, report.average_trace ? 1 : 0, b, c.trace, c.std_error, pert, c.omega.at(b));
            os << line;
        }
    }
}

namespace {

std::vector<std::string> split_commas(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

template <typename T>
T parse_field(const std::string& text, std::size_t line_no, const char* what) {
    std::istringstream ss(text);
    T value{};
    ss >> value;
    if (ss.fail() || !ss.eof()) {
        throw FormatError("sensitivity line " + std::to_string(line_no) + ": bad " + what + " '" + text + "'");
    }
    return value;
}

}  // namespace

SensitivityReport read_sensitivity(std::istream& is) {
    SensitivityReport report;
    std::string line;
    if (!std::getline(is, line) || line.rfind("cluster,size,samples", 0) != 0) {
        throw FormatError("sensitivity line 1: missing header");
    }
    std::size_t line_no = 1;
    bool first = true;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = split_commas(line);
        if (f.size() != 9) throw FormatError("sensitivity line " + std::to_string(line_no) + ": expected 9 fields");
        const auto size = parse_field<std::size_t>(f[1], line_no, "size");
        const auto samples = parse_field<std::size_t>(f[2], line_no, "samples");
        const auto average = parse_field<int>(f[3], line_no, "average_trace");
        const auto bits = parse_field<int>(f[4], line_no, "n_bits");
        const auto trace = parse_field<double>(f[5], line_no, "trace");
        const auto std_error = parse_field<double>(f[6], line_no, "std_error");
        const auto pert = parse_field<double>(f[7], line_no, "perturbation");
        const auto omega = parse_field<double>(f[8], line_no, "omega");
        if (samples == 0) throw FormatError("sensitivity line " + std::to_string(line_no) + ": samples must be >= 1");
        if (pert < 0.0) throw FormatError("sensitivity line " + std::to_string(line_no) + ": negative perturbation");
        if (first) {
            report.samples = samples;
            report.average_trace = average != 0;
            first = false;
        } else if (samples != report.samples || (average != 0) != report.average_trace) {
            throw FormatError("sensitivity line " + std::to_string(line_no) + ": inconsistent samples or trace mode");
        }
        if (report.clusters.empty() || report.clusters.back().id != f[0]) {
            for (const auto& c : report.clusters) {
                if (c.id == f[0]) {
                    throw FormatError("sensitivity line " + std::to_string(line_no) + ": cluster '" + f[0] +
                                      "' is not contiguous");
                }
            }
            ClusterSensitivity c;
            c.id = f[0];
            c.size = size;
            c.trace = trace;
            c.std_error = std_error;
            report.clusters.push_back(std::move(c));
        }
        auto& c = report.clusters.back();
        if (c.size != size || c.trace != trace || c.std_error != std_error) {
            throw FormatError("sensitivity line " + std::to_string(line_no) + ": cluster '" + f[0] +
                              "' changes size or trace");
        }
        if (!c.perturbation.emplace(bits, pert).second) {
            throw FormatError("sensitivity line " + std::to_string(line_no) + ": duplicate bit-width");
        }
        c.omega[bits] = omega;
    }
    if (report.clusters.empty()) throw FormatError("sensitivity report has no records");
    return report;
}

}  // namespace mpq
