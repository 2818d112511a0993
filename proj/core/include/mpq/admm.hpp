#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mpq/quant.hpp"
#include "mpq/trainer.hpp"

namespace mpq {

struct AdmmConfig {
    double lr = 0.1;
    /// Learning rate multiplier applied after every epoch.
    double lr_decay = 1.0;
    std::size_t epochs = 30;
    std::size_t batch_size = 16;
    std::size_t seq_len = 64;
    double clip = kDefaultClipNorm;
    double rho = 1e-3;
    /// rho multiplier applied after every epoch, capped at rho_max (0: no cap).
    double rho_growth = 1.0;
    double rho_max = 0.0;
    /// Stop once ||W - Q|| / sqrt(N) falls below this.
    double tolerance = 1e-3;
    /// Disables projection and dual updates; with rho = 0 this is plain SGD.
    bool project = true;
    std::uint64_t seed = 1;
};

/// One weight cluster under ADMM: its member tensors (shared with the
/// model), the projected values Q, the scaled duals lambda, and the table
/// and levels from the last projection.
struct AdmmCluster {
    ClusterSpec spec;
    int n_bits = 2;
    std::vector<Tensor> members;
    std::vector<float> q;
    std::vector<float> lambda;
    QuantTable table;
    std::vector<std::int32_t> levels;

    std::vector<float> weights() const;
};

class AdmmState {
public:
    /// Clusters at kFullPrecisionBits are left out. Q starts as the
    /// projection of W with lambda = 0.
    AdmmState(const std::vector<NamedTensor>& params, const std::vector<ClusterSpec>& clusters, const BitMap& bits,
              double rho);

    std::vector<AdmmCluster>& clusters() { return clusters_; }
    const std::vector<AdmmCluster>& clusters() const { return clusters_; }
    double rho() const { return rho_; }
    void set_rho(double rho);
    std::size_t iteration() const { return iteration_; }

    /// Q = quantize_cluster(W + lambda, n_bits) per cluster, refitting the scale.
    void project();
    /// lambda += W - Q.
    void dual_update();
    /// Adds rho (W - Q + lambda) to the gradient of every clustered tensor.
    void add_penalty_gradient(const std::vector<NamedTensor>& params, std::vector<Tensor>& grads) const;

    /// ||W - Q||_2 over all clustered scalars.
    double primal_residual() const;
    /// primal_residual() / sqrt(scalar count).
    double normalized_residual() const;
    double mean_alpha() const;
    std::size_t scalar_count() const;

    /// The quantized model given by the current Q; every tensor outside the
    /// clusters is copied from `params` at full precision.
    QuantizedModel to_quantized(const ModelConfig& config, const std::vector<NamedTensor>& params,
                                const std::vector<ClusterSpec>& all_clusters) const;

private:
    std::vector<AdmmCluster> clusters_;
    double rho_ = 0.0;
    std::size_t iteration_ = 0;
};

struct AdmmLogRow {
    std::size_t epoch = 0;
    double loss = 0.0;
    double residual = 0.0;
    double normalized_residual = 0.0;
    double mean_alpha = 0.0;
    double rho = 0.0;
    std::vector<double> alphas;  // per cluster, in state order
};

struct AdmmRun {
    std::vector<AdmmLogRow> log;
    bool converged = false;
    /// Epoch whose state was returned (lowest residual when not converged).
    std::size_t best_epoch = 0;
};

/// Epoch loop: w-update over every batch (SGD on f + rho/2 ||W - Q + lambda||^2),
/// then projection, dual update and logging. `loss(b)` builds the loss of
/// batch b; batches are visited in epoch_order. On return the parameters
/// and state hold the converged epoch, or the lowest-residual epoch.
AdmmRun run_admm(const std::vector<NamedTensor>& params, AdmmState& state, std::size_t n_batches,
                 const std::function<Tensor(std::size_t)>& loss, const AdmmConfig& config);

struct AdmmResult {
    QuantizedModel model;
    AdmmRun run;
};

/// ADMM quantization-aware training of a copy of `init` on `stream`.
AdmmResult train_admm(const TransformerLM& init, std::span<const std::size_t> stream,
                      const std::vector<ClusterSpec>& clusters, const BitMap& bits, const AdmmConfig& config);

/// Comma-separated "epoch,loss,primal_residual,mean_alpha" lines with a header.
void write_admm_log(std::ostream& os, const std::vector<AdmmLogRow>& log);

}  // namespace mpq
