#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mpq/allocate.hpp"
#include "mpq/quant.hpp"
#include "mpq/trainer.hpp"

namespace mpq {

/// Selection over the candidate widths of one searched cluster.
struct SelectionDecision {
    std::string id;  // cluster id, "layer{l}.attn" or "layer{l}.ffn"
    std::size_t size = 0;
    std::vector<int> bits;
    std::vector<double> logits;
    std::vector<double> weights;  // softmax(logits)
};

struct SelectionWeights {
    double beta = 0.0;
    std::vector<SelectionDecision> decisions;
    /// Clusters outside the search (embedding, output) with their widths and sizes.
    BitMap fixed_bits;
    std::map<std::string, std::size_t> fixed_sizes;
};

/// A supernet whose attention and feed-forward sub-layers each combine one
/// candidate per width with softmax selection weights. Candidates are deep
/// copies of the uniform models' sub-layers; the embeddings and output
/// projection come from the `shared_bits` model.
class Supernet {
public:
    /// Throws IncompatibleError when the models differ in dims, when a
    /// model's layer clusters are not at its key width, or when
    /// `shared_bits` has no model.
    Supernet(const std::map<int, QuantizedModel>& uniform, int shared_bits);

    const ModelConfig& config() const { return shared_.config(); }
    const std::vector<int>& candidate_bits() const { return bits_; }
    int shared_bits() const { return shared_bits_; }

    /// Logits [tokens.size() x V] for sequences of length seq_len stacked row-wise.
    Tensor forward_logits(std::span<const std::size_t> tokens, std::size_t seq_len) const;
    /// Mean next-token cross-entropy of a batch.
    Tensor batch_nll(const Batch& batch) const;
    /// beta * sum over decisions and candidates of alpha * sqrt(bits).
    Tensor penalty(double beta) const;

    /// Candidate sub-layer tensors and the shared embeddings/output.
    std::vector<NamedTensor> weight_parameters() const;
    /// One logit vector per decision, named "<cluster id>.select".
    std::vector<NamedTensor> arch_parameters() const;

    SelectionWeights selection(double beta) const;
    void set_logits(const std::string& decision, std::span<const double> logits);

    /// Projects every candidate's matrices back onto its grid (refitting the scale).
    void reproject();

    /// Plain model using, for each decision, the candidate named in `bits`.
    TransformerLM extract(const BitMap& bits) const;

private:
    struct LayerCandidates {
        std::vector<AttentionSublayer> attn;
        std::vector<FeedForwardSublayer> ffn;
        Tensor attn_logits, ffn_logits;
    };

    std::vector<int> bits_;
    int shared_bits_ = 2;
    TransformerLM shared_;
    BitMap fixed_bits_;
    std::map<std::string, std::size_t> fixed_sizes_;
    std::vector<LayerCandidates> layers_;
};

/// f + beta * sum alpha * sqrt(bits) over every decision.
double nas_loss(double nll, const SelectionWeights& weights);

/// (total NLL, predicted positions) of `stream` in max_len windows, as total_nll.
std::pair<double, std::size_t> supernet_total_nll(const Supernet& net, std::span<const std::size_t> stream);

struct NasConfig {
    double lr = 0.05;
    double arch_lr = 0.1;
    double beta = 0.01;
    std::size_t epochs = 10;
    std::size_t batch_size = 16;
    std::size_t seq_len = 64;
    double clip = kDefaultClipNorm;
    /// Keeps candidate weights fixed; only the selection logits move.
    bool freeze_weights = false;
    std::uint64_t seed = 1;
};

struct NasLogRow {
    std::size_t epoch = 0;
    double weight_loss = 0.0;  // mean nas_loss over weight steps
    double arch_loss = 0.0;    // mean nas_loss over architecture steps
    double expected_bits = 0.0;
};

/// Alternates one architecture step on a held-out batch (second half of
/// `stream`) with one weight step on a training batch (first half), for
/// every training batch of each epoch; candidates are re-projected after
/// each epoch unless frozen.
std::vector<NasLogRow> search(Supernet& net, std::span<const std::size_t> stream, const NasConfig& config);

/// Per decision the candidate with the largest weight, ties to the smaller
/// width. Average bits weight every searched and fixed cluster by size;
/// total_omega is left at 0.
PrecisionAssignment extract_1best(const SelectionWeights& weights);

/// layer,sublayer,size,n_bits,logit,weight lines under a header; beta and
/// fixed clusters precede it as "#beta,<value>" and "#fixed,<cluster>,<bits>,<size>".
void write_selection(std::ostream& os, const SelectionWeights& weights);
/// Throws FormatError naming the line on malformed input.
SelectionWeights read_selection(std::istream& is);

}  // namespace mpq
