#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace mpq {

enum class TokenMode { kChar, kWord };

TokenMode parse_token_mode(const std::string& name);
std::string token_mode_name(TokenMode mode);

inline constexpr const char* kUnkToken = "<unk>";
inline constexpr const char* kEosToken = "<eos>";

class Vocabulary {
public:
    Vocabulary() = default;
    /// Tokens in id order; must be distinct and contain <unk>.
    explicit Vocabulary(std::vector<std::string> tokens);

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(std::size_t id) const { return tokens_.at(id); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    bool contains(const std::string& token) const { return ids_.count(token) != 0; }
    /// Id of `token`, or of <unk> when it is not in the vocabulary.
    std::size_t id(const std::string& token) const;

private:
    std::vector<std::string> tokens_;
    std::map<std::string, std::size_t> ids_;
};

/// Throws DataError naming `what` and the byte offset of the first invalid sequence.
void validate_utf8(std::string_view text, const std::string& what);

/// Word mode: whitespace-separated words plus <eos> after every line.
/// Char mode: one token per UTF-8 code point, newlines included.
std::vector<std::string> tokenize(std::string_view text, TokenMode mode);

/// Frequency-ranked (ties by byte order) over `tokens`, then <unk> if absent.
Vocabulary build_vocabulary(const std::vector<std::string>& tokens);

struct Corpus {
    TokenMode mode = TokenMode::kChar;
    Vocabulary vocab;
    std::vector<std::size_t> train, valid, test;

    const std::vector<std::size_t>& split(const std::string& name) const;
};

/// Vocabulary from `train` only; unseen valid/test tokens map to <unk>.
/// Throws EmptyInputError on an empty split and DataError on bad UTF-8.
Corpus build_corpus(std::string_view train, std::string_view valid, std::string_view test, TokenMode mode);
Corpus ingest_corpus(const std::filesystem::path& train, const std::filesystem::path& valid,
                     const std::filesystem::path& test, TokenMode mode);

/// Line-oriented text: header, hex-encoded vocabulary, then one id list per split.
void write_corpus(std::ostream& os, const Corpus& corpus);
/// Throws FormatError naming the line.
Corpus read_corpus(std::istream& is);

}  // namespace mpq
