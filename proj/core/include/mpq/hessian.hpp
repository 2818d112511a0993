#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mpq/quant.hpp"
#include "mpq/trainer.hpp"

namespace mpq {

/// Flattened gradient of `loss` over `params`, in parameter order.
/// Throws NumericalError when an entry is not finite.
std::vector<double> flat_gradient(const std::vector<NamedTensor>& params, const LossFn& loss);

inline constexpr double kHvpStep = 1e-2;

/// H v by central differences of gradients, (g(t + e v) - g(t - e v)) / 2e
/// with e = step / ||v|| rounded to the nearest power of two. `v` is
/// flattened in parameter order. Parameters are restored bit-for-bit on return.
std::vector<double> hvp(const std::vector<NamedTensor>& params, const LossFn& loss, std::span<const double> v,
                        double step = kHvpStep);

enum class ProbeKind { kGaussian, kRademacher };

struct TraceEstimate {
    double trace = 0.0;
    /// Sample standard deviation / sqrt(m); 0 when m = 1.
    double std_error = 0.0;
    std::size_t samples = 0;
};

/// Hutchinson estimate of the trace of the Hessian block for the tensors
/// named in `members`: the mean of z^T H z over m probes that are zero
/// outside the block. Probe i is drawn from Rng(seed ^ i-th stream), so the
/// result does not depend on evaluation order.
TraceEstimate hutchinson_trace(const std::vector<NamedTensor>& params, const LossFn& loss,
                               const std::vector<std::string>& members, std::size_t m, std::uint64_t seed,
                               ProbeKind probe = ProbeKind::kGaussian);

/// (trace / size) * perturbation, or trace * perturbation when
/// `average_trace` is off.
double cluster_sensitivity(double trace, double perturbation, std::size_t size, bool average_trace = true);

inline constexpr int kCandidateBits[] = {1, 2, 4, 8};

struct ClusterSensitivity {
    std::string id;
    std::size_t size = 0;
    /// Trace factor used in omega: the average trace (trace / size) unless
    /// the report was built with average_trace off.
    double trace = 0.0;
    double std_error = 0.0;
    std::map<int, double> perturbation;  // n_bits -> ||Q(W) - W||^2
    std::map<int, double> omega;         // n_bits -> trace * perturbation
};

struct SensitivityReport {
    std::size_t samples = 0;
    bool average_trace = true;
    std::vector<ClusterSensitivity> clusters;

    const ClusterSensitivity& at(const std::string& id) const;
};

struct SensitivityConfig {
    std::size_t samples = 16;
    std::size_t probe_tokens = 2048;
    std::size_t seq_len = 64;
    std::uint64_t seed = 1;
    ProbeKind probe = ProbeKind::kGaussian;
    bool average_trace = true;
    std::vector<int> bits{std::begin(kCandidateBits), std::end(kCandidateBits)};
};

/// Windows of `seq_len + 1` tokens from the start of `stream` covering
/// `probe_tokens` predicted tokens, as one batch. Throws EmptyInputError when
/// the stream is too short for a single window.
Batch probe_batch(std::span<const std::size_t> stream, std::size_t probe_tokens, std::size_t seq_len);

/// Traces at `model` on the probe batch of `probe_stream` and perturbations
/// from tables fitted to the same weights, for every cluster.
SensitivityReport analyze_sensitivity(const TransformerLM& model, std::span<const std::size_t> probe_stream,
                                      const std::vector<ClusterSpec>& clusters, const SensitivityConfig& config);

/// One line per (cluster, n_bits):
/// cluster,size,samples,average_trace,n_bits,trace,std_error,perturbation,omega
void write_sensitivity(std::ostream& os, const SensitivityReport& report);
/// Throws FormatError naming the line on malformed input.
SensitivityReport read_sensitivity(std::istream& is);

}  // namespace mpq
