#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mpq/tensor.hpp"

namespace mpq {

struct ModelConfig {
    std::size_t vocab = 0;
    std::size_t d_model = 64;
    std::size_t d_ff = 256;
    std::size_t n_heads = 2;
    std::size_t n_layers = 2;
    std::size_t max_len = 64;
    /// Output projection shares the token embedding matrix.
    bool tied_output = false;

    /// Throws ConfigError on non-positive dims or d_model % n_heads != 0.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

/// Query/key/value projections, causal self-attention, residual and LayerNorm.
struct AttentionSublayer {
    Tensor Q, K, V, Wh;  // d_model x d_model
    Tensor ln_gain, ln_bias;
};

/// GELU feed-forward with residual and LayerNorm.
struct FeedForwardSublayer {
    Tensor W1, b1;  // d_ff x d_model, d_ff
    Tensor W2, b2;  // d_model x d_ff, d_model
    Tensor ln_gain, ln_bias;
};

struct TransformerLayer {
    std::size_t index = 0;
    std::size_t n_heads = 1;
    AttentionSublayer attn;
    FeedForwardSublayer ffn;

    std::size_t d_model() const { return attn.Q.shape()[0]; }
    std::size_t d_ff() const { return ffn.W1.shape()[0]; }
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

class TransformerLM {
public:
    TransformerLM() = default;
    /// Matrices drawn from uniform(-0.1, 0.1); biases 0, LayerNorm gains 1.
    TransformerLM(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }

    Tensor& token_embedding() { return tok_; }
    const Tensor& token_embedding() const { return tok_; }
    Tensor& position_embedding() { return pos_; }
    const Tensor& position_embedding() const { return pos_; }
    /// V x d_model; the token embedding when tied.
    const Tensor& output_projection() const { return config_.tied_output ? tok_ : out_; }
    Tensor& output_projection() { return config_.tied_output ? tok_ : out_; }
    std::vector<TransformerLayer>& layers() { return layers_; }
    const std::vector<TransformerLayer>& layers() const { return layers_; }

    /// Every trainable tensor under its checkpoint name, in canonical order
    /// (embed.tok, embed.pos, layer{i}.*, out.proj). A tied model omits out.proj.
    std::vector<NamedTensor> parameters() const;
    std::optional<Tensor> find(const std::string& name) const;
    std::size_t parameter_count() const;

    /// Enables or disables gradient tracking on every parameter.
    void set_trainable(bool on);
    /// Deep copy with detached storage.
    TransformerLM clone() const;

    /// Builds a model around existing tensors, validating every shape.
    static TransformerLM from_parameters(const ModelConfig& config, const std::vector<NamedTensor>& params);

private:
    ModelConfig config_;
    Tensor tok_, pos_, out_;
    std::vector<TransformerLayer> layers_;
};

std::vector<std::string> layer_parameter_names(std::size_t layer);

// ---------------------------------------------------------------------------
// Graph path: batches of equal-length sequences stacked row-wise.

Tensor attention_block(const AttentionSublayer& p, std::size_t n_heads, const Tensor& x, std::size_t seq_len);
Tensor feed_forward_block(const FeedForwardSublayer& p, const Tensor& z);
/// Token + positional embeddings for `tokens` laid out as [batch x seq_len].
Tensor embed(const TransformerLM& model, std::span<const std::size_t> tokens, std::size_t seq_len);
/// Logits [batch*seq_len x V].
Tensor forward_logits(const TransformerLM& model, std::span<const std::size_t> tokens, std::size_t seq_len);

struct Batch {
    std::vector<std::size_t> inputs;   // batch*seq_len
    std::vector<std::size_t> targets;  // batch*seq_len
    std::size_t seq_len = 0;
    std::size_t size() const { return seq_len ? inputs.size() / seq_len : 0; }
};

/// Mean next-token cross-entropy of a batch, as a graph node.
Tensor batch_loss(const TransformerLM& model, const Batch& batch);

/// Cuts `stream` into windows of seq_len + 1 tokens (stride seq_len) and
/// groups them into batches; the last batch may be smaller.
std::vector<Batch> make_batches(std::span<const std::size_t> stream, std::size_t seq_len, std::size_t batch_size);

/// Per-row negative log-likelihood of `targets` under `logits`.
std::vector<double> row_nll(const Tensor& logits, std::span<const std::size_t> targets);

// ---------------------------------------------------------------------------
// Stepwise path: one position at a time with cached keys and values.

/// Keys and values of every consumed time step for one layer.
struct AttentionState {
    std::size_t layer_index = 0;
    std::size_t d_model = 0;
    std::vector<float> keys;    // steps x d_model
    std::vector<float> values;  // steps x d_model

    explicit AttentionState(std::size_t layer = 0, std::size_t width = 0) : layer_index(layer), d_model(width) {}
    std::size_t steps() const { return d_model ? keys.size() / d_model : 0; }
};

/// One time step of the attention sub-layer; appends (k_t, v_t) to `state`.
std::vector<float> attention_step(const TransformerLayer& layer, std::span<const float> x_t, AttentionState& state);
/// Feed-forward sub-layer for one time step.
std::vector<float> feed_forward(const TransformerLayer& layer, std::span<const float> z_t);

/// Causal left-to-right evaluation; entry t is -log p(tokens[t+1] | tokens[..t]).
std::vector<double> forward_sequence(const TransformerLM& model, std::span<const std::size_t> tokens);
/// Same quantity through the batched masked graph path.
std::vector<double> forward_sequence_masked(const TransformerLM& model, std::span<const std::size_t> tokens);

/// exp(mean NLL) over every predicted position of `stream`, evaluated in
/// windows of at most max_len tokens that overlap by one.
double perplexity(const TransformerLM& model, std::span<const std::size_t> stream);

/// Sum of NLL and number of predicted positions; perplexity() is exp(sum/count).
std::pair<double, std::size_t> total_nll(const TransformerLM& model, std::span<const std::size_t> stream);

/// Logits [tokens.size() x V] for sequences of length seq_len stacked row-wise.
using LogitsFn = std::function<Tensor(std::span<const std::size_t> tokens, std::size_t seq_len)>;
/// total_nll over any network: windows of `window` tokens overlapping by one.
std::pair<double, std::size_t> windowed_nll(const LogitsFn& logits, std::size_t window,
                                            std::span<const std::size_t> stream);

}  // namespace mpq
