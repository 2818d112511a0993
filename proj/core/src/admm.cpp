#include "mpq/admm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>

#include "mpq/errors.hpp"

namespace mpq {

std::vector<float> AdmmCluster::weights() const {
    std::vector<float> out;
    out.reserve(q.size());
    for (const auto& t : members) out.insert(out.end(), t.data().begin(), t.data().end());
    return out;
}

AdmmState::AdmmState(const std::vector<NamedTensor>& params, const std::vector<ClusterSpec>& clusters,
                     const BitMap& bits, double rho) {
    set_rho(rho);
    std::map<std::string, Tensor> by_name;
    for (const auto& p : params) by_name[p.name] = p.tensor;
    for (const auto& spec : clusters) {
        auto it = bits.find(spec.id);
        if (it == bits.end()) throw ConfigError("no bit-width given for cluster '" + spec.id + "'");
        if (it->second == kFullPrecisionBits) continue;
        AdmmCluster c;
        c.spec = spec;
        c.n_bits = it->second;
        for (const auto& name : spec.members) {
            auto t = by_name.find(name);
            if (t == by_name.end()) throw ConfigError("cluster member '" + name + "' is not a parameter");
            c.members.push_back(t->second);
        }
        const std::size_t n = c.weights().size();
        c.lambda.assign(n, 0.0f);
        c.q.assign(n, 0.0f);
        clusters_.push_back(std::move(c));
    }
    project();
}

void AdmmState::set_rho(double rho) {
    if (!(rho >= 0.0) || !std::isfinite(rho)) throw ConfigError("ADMM rho must be non-negative and finite");
    rho_ = rho;
}

void AdmmState::project() {
    for (auto& c : clusters_) {
        std::vector<float> x = c.weights();
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += c.lambda[i];
        ClusterQuantization cq = quantize_cluster(x, c.n_bits);
        c.table = cq.table;
        c.levels = std::move(cq.levels);
        for (std::size_t i = 0; i < x.size(); ++i) c.q[i] = c.table.value(c.levels[i]);
    }
    ++iteration_;
}

void AdmmState::dual_update() {
    for (auto& c : clusters_) {
        const std::vector<float> w = c.weights();
        for (std::size_t i = 0; i < w.size(); ++i) c.lambda[i] += w[i] - c.q[i];
    }
}

void AdmmState::add_penalty_gradient(const std::vector<NamedTensor>& params, std::vector<Tensor>& grads) const {
    if (params.size() != grads.size()) throw ShapeError("add_penalty_gradient: params and grads differ in length");
    for (const auto& c : clusters_) {
        std::size_t offset = 0;
        for (const auto& member : c.members) {
            for (std::size_t p = 0; p < params.size(); ++p) {
                if (!params[p].tensor.is(member)) continue;
                auto w = member.data();
                auto g = grads[p].data();
                for (std::size_t i = 0; i < w.size(); ++i) {
                    const double r = static_cast<double>(w[i]) - c.q[offset + i] + c.lambda[offset + i];
                    g[i] += static_cast<float>(rho_ * r);
                }
            }
            offset += member.numel();
        }
    }
}

double AdmmState::primal_residual() const {
    double s = 0.0;
    for (const auto& c : clusters_) {
        const std::vector<float> w = c.weights();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double d = static_cast<double>(w[i]) - c.q[i];
            s += d * d;
        }
    }
    return std::sqrt(s);
}

std::size_t AdmmState::scalar_count() const {
    std::size_t n = 0;
    for (const auto& c : clusters_) n += c.q.size();
    return n;
}

double AdmmState::normalized_residual() const {
    const std::size_t n = scalar_count();
    return n ? primal_residual() / std::sqrt(static_cast<double>(n)) : 0.0;
}

double AdmmState::mean_alpha() const {
    if (clusters_.empty()) return 0.0;
    double s = 0.0;
    for (const auto& c : clusters_) s += c.table.alpha;
    return s / static_cast<double>(clusters_.size());
}

QuantizedModel AdmmState::to_quantized(const ModelConfig& config, const std::vector<NamedTensor>& params,
                                       const std::vector<ClusterSpec>& all_clusters) const {
    QuantizedModel qm;
    qm.config = config;
    std::map<std::string, bool> clustered;
    for (const auto& c : clusters_) {
        QuantizedCluster qc;
        qc.id = c.spec.id;
        qc.table = c.table;
        qc.members = c.spec.members;
        std::size_t offset = 0;
        for (const auto& t : c.members) {
            qc.shapes.push_back(t.shape());
            qc.levels.emplace_back(c.levels.begin() + static_cast<std::ptrdiff_t>(offset),
                                   c.levels.begin() + static_cast<std::ptrdiff_t>(offset + t.numel()));
            offset += t.numel();
        }
        for (const auto& name : c.spec.members) clustered[name] = true;
        qm.clusters.push_back(std::move(qc));
    }
    std::map<std::string, std::size_t> sizes;
    for (const auto& p : params) sizes[p.name] = p.tensor.numel();
    for (const auto& spec : all_clusters) {
        if (clustered.count(spec.members.front())) continue;
        std::size_t n = 0;
        for (const auto& m : spec.members) n += sizes.at(m);
        qm.full_precision_clusters[spec.id] = n;
    }
    for (const auto& p : params) {
        if (!clustered.count(p.name)) qm.residue.push_back({p.name, p.tensor.clone()});
    }
    return qm;
}

namespace {

struct Snapshot {
    std::vector<std::vector<float>> params;
    std::vector<AdmmCluster> clusters;
};

Snapshot take_snapshot(const std::vector<NamedTensor>& params, const AdmmState& state) {
    Snapshot s;
    for (const auto& p : params) s.params.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    s.clusters = state.clusters();
    return s;
}

void restore(const Snapshot& s, const std::vector<NamedTensor>& params, AdmmState& state) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].tensor;
        auto d = t.data();
        std::copy(s.params[i].begin(), s.params[i].end(), d.begin());
    }
    auto& cs = state.clusters();
    for (std::size_t i = 0; i < cs.size(); ++i) {
        cs[i].q = s.clusters[i].q;
        cs[i].lambda = s.clusters[i].lambda;
        cs[i].table = s.clusters[i].table;
        cs[i].levels = s.clusters[i].levels;
    }
}

}  // namespace

AdmmRun run_admm(const std::vector<NamedTensor>& params, AdmmState& state, std::size_t n_batches,
                 const std::function<Tensor(std::size_t)>& loss, const AdmmConfig& config) {
    if (n_batches == 0) throw EmptyInputError("ADMM: training split yields no batches");
    if (!(config.lr > 0.0)) throw ConfigError("ADMM: lr must be positive");
    AdmmRun run;
    const bool has_clusters = state.scalar_count() > 0;
    double lr = config.lr;
    double best = INFINITY;
    Snapshot best_state;
    for (std::size_t e = 0; e < config.epochs; ++e) {
        GradientHook hook;
        if (state.rho() > 0.0) {
            hook = [&state](const std::vector<NamedTensor>& p, std::vector<Tensor>& g) { state.add_penalty_gradient(p, g); };
        }
        double total = 0.0;
        for (std::size_t b : epoch_order(n_batches, config.seed, e)) {
            total += sgd_step(params, [&] { return loss(b); }, lr, config.clip, hook);
        }
        if (config.project) {
            state.project();
            state.dual_update();
        }
        AdmmLogRow row;
        row.epoch = e;
        row.loss = total / static_cast<double>(n_batches);
        row.residual = state.primal_residual();
        row.normalized_residual = state.normalized_residual();
        row.mean_alpha = state.mean_alpha();
        row.rho = state.rho();
        for (const auto& c : state.clusters()) row.alphas.push_back(c.table.alpha);
        run.log.push_back(row);

        if (config.project && has_clusters) {
            if (row.normalized_residual < config.tolerance) {
                run.converged = true;
                run.best_epoch = e;
                return run;
            }
            if (row.normalized_residual < best) {
                best = row.normalized_residual;
                run.best_epoch = e;
                best_state = take_snapshot(params, state);
            }
        } else {
            run.best_epoch = e;
        }
        double rho = state.rho() * config.rho_growth;
        if (config.rho_max > 0.0) rho = std::min(rho, config.rho_max);
        state.set_rho(rho);
        lr *= config.lr_decay;
    }
    if (config.project && has_clusters && !run.log.empty() && run.best_epoch + 1 != run.log.size()) {
        restore(best_state, params, state);
    }
    return run;
}

AdmmResult train_admm(const TransformerLM& init, std::span<const std::size_t> stream,
                      const std::vector<ClusterSpec>& clusters, const BitMap& bits, const AdmmConfig& config) {
    TransformerLM model = init.clone();
    const auto params = model.parameters();
    const auto batches = make_batches(stream, std::min(config.seq_len, model.config().max_len), config.batch_size);
    AdmmState state(params, clusters, bits, config.rho);
    const TransformerLM& m = model;
    AdmmResult result;
    result.run = run_admm(params, state, batches.size(), [&](std::size_t b) { return batch_loss(m, batches[b]); },
                          config);
    result.model = state.to_quantized(model.config(), params, clusters);
    return result;
}

void write_admm_log(std::ostream& os, const std::vector<AdmmLogRow>& log) {
    os << "epoch,loss,primal_residual,mean_alpha\n";
    char line[160];
    for (const auto& r : log) {
        std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g\n", r.epoch, r.loss, r.residual, r.mean_alpha);
        os << line;
    }
}

}  // namespace mpq
