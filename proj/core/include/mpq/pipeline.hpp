#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "mpq/config.hpp"
#include "mpq/corpus.hpp"
#include "mpq/report.hpp"

namespace mpq {

struct EvalResult {
    double ppl = 0.0;
    double nll = 0.0;
    std::size_t positions = 0;
    double seconds = 0.0;  // wall clock of the evaluation loop only
};

/// Throws EmptyInputError when `stream` has fewer than two tokens.
EvalResult evaluate(const TransformerLM& model, std::span<const std::size_t> stream);
/// Loads either checkpoint kind (dequantizing packed weights) and evaluates it;
/// loading is excluded from the timing.
EvalResult evaluate_checkpoint(const std::filesystem::path& path, std::span<const std::size_t> stream);

/// "cluster,n_bits" lines under a header.
void write_bit_map(std::ostream& os, const BitMap& bits);
/// Throws FormatError naming the line.
BitMap read_bit_map(std::istream& is);

/// Runs the configured stages in order (baseline, uniform, manual, minsen,
/// nas), writing checkpoints, logs and the report into config.output_dir.
/// Later stages reload the checkpoints of earlier ones when those stages are
/// not selected. A failing stage is re-raised with its name prefixed and the
/// original exit code; checkpoints of completed stages stay on disk.
///
/// Files: report.csv (no timing, reproducible under a seed), report_timed.csv
/// and report.txt (aligned table).
std::vector<ReportRow> run_pipeline(const ExperimentConfig& config, const Corpus& corpus, std::ostream* progress = nullptr);

/// Model config with the corpus vocabulary size filled in.
ModelConfig model_config_for(const ExperimentConfig& config, const Corpus& corpus);

}  // namespace mpq
