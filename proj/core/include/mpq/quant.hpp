#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mpq/transformer.hpp"

namespace mpq {

/// Bit-width that means "leave this cluster in full precision".
inline constexpr int kFullPrecisionBits = 32;
inline constexpr int kMaxQuantBits = 16;

/// Symmetric uniform grid. n >= 2: {0, +-a, ..., +-a(2^(n-1) - 1)}; n = 1: {-a, +a}.
struct QuantTable {
    int n_bits = 1;
    double alpha = 1.0;

    /// Largest level magnitude: 2^(n-1) - 1, or 1 for a binary grid.
    int max_level() const { return n_bits == 1 ? 1 : (1 << (n_bits - 1)) - 1; }
    std::size_t level_count() const { return n_bits == 1 ? 2 : (std::size_t{1} << n_bits) - 1; }
    bool valid_level(std::int32_t q) const;
    /// The grid point of level q as stored in a model (float(alpha * q)).
    float value(std::int32_t q) const { return static_cast<float>(alpha * q); }
    /// Throws ConfigError on an unsupported width, DegenerateScaleError on alpha <= 0.
    void validate() const;
};

struct QuantizedValue {
    std::int32_t level = 0;
    float value = 0.0f;
};

/// Nearest grid point to theta. Ties go to the level of smaller magnitude;
/// on a binary grid theta = 0 maps to +alpha.
QuantizedValue quantize_value(double theta, const QuantTable& table);

/// sum_i (w_i - alpha q_i)^2 with q_i the nearest level under `table`.
double quantization_objective(std::span<const float> weights, const QuantTable& table);

struct ScaleFit {
    QuantTable table;
    /// Objective at the start of every alternation round, then at the result.
    std::vector<double> trace;
    std::size_t iterations = 0;
};

inline constexpr std::size_t kFitScaleMaxIterations = 50;
inline constexpr double kFitScaleTolerance = 1e-9;

/// Alternates nearest-level assignment with the closed-form scale
/// alpha = sum(w q) / sum(q^2). Without `initial_alpha` the alternation
/// starts from the global minimizer found by sweeping every scale at which
/// some weight changes level (exact when weights x levels is at most
/// kExactScaleLimit; a dense log-spaced scan otherwise).
/// Throws EmptyInputError on no weights, DegenerateScaleError if all are zero.
ScaleFit fit_scale_traced(std::span<const float> weights, int n_bits, std::optional<double> initial_alpha = {});
QuantTable fit_scale(std::span<const float> weights, int n_bits);

inline constexpr std::size_t kExactScaleLimit = std::size_t{1} << 22;

// ---------------------------------------------------------------------------
// Clusters: groups of weight matrices sharing one table.

struct ClusterSpec {
    std::string id;
    std::vector<std::string> members;
};

/// One cluster per sub-layer: "layer{i}.attn" = {Q, K, V, Wh}, "layer{i}.ffn" =
/// {W1, W2}; plus "embed" = {embed.tok, embed.pos} and "out" = {out.proj}
/// when embeddings are quantized (out is absent for a tied model).
std::vector<ClusterSpec> model_clusters(const ModelConfig& config, bool quantize_embeddings = true);

/// cluster id -> bit-width (1..16, or kFullPrecisionBits).
using BitMap = std::map<std::string, int>;
BitMap uniform_bit_map(const std::vector<ClusterSpec>& clusters, int bits);

/// Concatenated values of the cluster's member tensors, in member order.
std::vector<float> gather_cluster(const TransformerLM& model, const ClusterSpec& cluster);
std::size_t cluster_size(const TransformerLM& model, const ClusterSpec& cluster);

struct ClusterQuantization {
    QuantTable table;
    std::vector<std::int32_t> levels;
    /// ||Q(W) - W||^2 against the exact grid points alpha * q.
    double perturbation = 0.0;
};

/// fit_scale followed by quantize_value on every weight.
ClusterQuantization quantize_cluster(std::span<const float> weights, int n_bits);
/// Levels of `weights` under a fixed table.
ClusterQuantization quantize_with_table(std::span<const float> weights, const QuantTable& table);

// ---------------------------------------------------------------------------
// Packed storage.

/// Level q stored as q + max_level (n >= 2) or as the sign bit (n = 1),
/// n bits per code, least significant bit first.
std::vector<std::uint8_t> pack_levels(std::span<const std::int32_t> levels, int n_bits);
/// Throws FormatError on a short buffer or an out-of-range code.
std::vector<std::int32_t> unpack_levels(std::span<const std::uint8_t> bytes, std::size_t count, int n_bits);

struct QuantizedCluster {
    std::string id;
    QuantTable table;
    std::vector<std::string> members;
    std::vector<Shape> shapes;
    std::vector<std::vector<std::int32_t>> levels;  // per member

    std::size_t count() const;
};

struct QuantizedModel {
    ModelConfig config;
    std::vector<QuantizedCluster> clusters;
    /// Tensors kept in full precision (biases, LayerNorm, unquantized clusters).
    std::vector<NamedTensor> residue;
    /// Clusters assigned kFullPrecisionBits, with their parameter counts.
    std::map<std::string, std::size_t> full_precision_clusters;

    TransformerLM dequantize() const;
    /// Parameter-weighted bit-width over all clustered weights (32 for unquantized clusters).
    double average_bits() const;
    BitMap bit_map() const;
};

/// Quantizes every cluster of `model` at its width in `bits`. Clusters
/// missing from `bits` raise ConfigError.
QuantizedModel quantize_model(const TransformerLM& model, const std::vector<ClusterSpec>& clusters,
                              const BitMap& bits);

/// Size in MB (10^6 bytes): n bits per quantized scalar, 32 bits per cluster
/// scale, 32 bits per residue scalar.
double model_size_mb(const QuantizedModel& qm);
double model_size_mb(const TransformerLM& model);
/// Size `model` would have after quantize_model(model, clusters, bits),
/// computed from parameter counts alone.
double planned_size_mb(const TransformerLM& model, const std::vector<ClusterSpec>& clusters, const BitMap& bits);

/// full / quant rounded to one decimal. Throws ConfigError unless both are positive.
double compression_ratio(double full_mb, double quant_mb);

void save_quantized(const std::filesystem::path& path, const QuantizedModel& qm);
QuantizedModel load_quantized(const std::filesystem::path& path);
/// Loads either checkpoint kind; quantized ones are dequantized.
TransformerLM load_any_model(const std::filesystem::path& path);

}  // namespace mpq
