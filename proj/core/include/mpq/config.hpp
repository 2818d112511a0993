#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "mpq/admm.hpp"
#include "mpq/corpus.hpp"
#include "mpq/hessian.hpp"
#include "mpq/mpnas.hpp"
#include "mpq/trainer.hpp"

namespace mpq {

/// `key = value` lines grouped under `[section]` headers. Blank lines and
/// lines starting with '#' or ';' are ignored.
class IniFile {
public:
    struct Entry {
        std::string value;
        std::size_t line = 0;
    };

    /// Throws ConfigError naming the line on a malformed or repeated entry.
    static IniFile parse(std::istream& is);

    /// Entries in file order, keyed "section.key".
    const std::vector<std::pair<std::string, Entry>>& entries() const { return entries_; }

private:
    std::vector<std::pair<std::string, Entry>> entries_;
};

inline const std::vector<std::string> kPipelineStages{"baseline", "uniform", "manual", "minsen", "nas"};

struct ExperimentConfig {
    std::filesystem::path train_path, valid_path, test_path;
    TokenMode token_mode = TokenMode::kChar;

    ModelConfig model;  // vocab comes from the corpus
    TrainConfig train;
    AdmmConfig admm;
    SensitivityConfig sensitivity;
    double budget = 2.0;
    NasConfig nas;
    int shared_bits = 2;

    std::vector<int> uniform_bits{1, 2, 4, 8};
    bool quantize_embeddings = true;
    /// Cluster widths for the manual mixed-precision stage; stage skipped when empty.
    BitMap manual_bits;

    std::vector<std::string> stages = kPipelineStages;
    std::filesystem::path output_dir = "runs";
    std::string eval_split = "test";
    std::uint64_t seed = 1;

    /// Sets the seed of every stage.
    void set_seed(std::uint64_t s);
    bool has_stage(const std::string& stage) const;
};

/// Relative corpus and output paths resolve against `base_dir`.
/// Throws ConfigError naming the line for unknown keys and bad values.
ExperimentConfig parse_config(std::istream& is, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

std::vector<int> parse_int_list(const std::string& text);

}  // namespace mpq
