#include "mpq/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "mpq/errors.hpp"

namespace mpq {

TokenMode parse_token_mode(const std::string& name) {
    if (name == "char") return TokenMode::kChar;
    if (name == "word") return TokenMode::kWord;
    throw ConfigError("unknown tokenization mode '" + name + "' (expected char or word)");
}

std::string token_mode_name(TokenMode mode) { return mode == TokenMode::kChar ? "char" : "word"; }

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!ids_.emplace(tokens_[i], i).second) throw FormatError("duplicate vocabulary entry '" + tokens_[i] + "'");
    }
    if (!ids_.count(kUnkToken)) throw FormatError("vocabulary has no <unk> entry");
}

std::size_t Vocabulary::id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? ids_.at(kUnkToken) : it->second;
}

namespace {

// Length of the UTF-8 sequence starting at text[i], or 0 if it is malformed.
std::size_t sequence_length(std::string_view text, std::size_t i) {
    const auto byte = [&](std::size_t k) { return static_cast<unsigned char>(text[k]); };
    const unsigned char b = byte(i);
    std::size_t n;
    std::uint32_t cp;
    if (b < 0x80) return 1;
    if ((b & 0xE0) == 0xC0) n = 2, cp = b & 0x1F;
    else if ((b & 0xF0) == 0xE0) n = 3, cp = b & 0x0F;
    else if ((b & 0xF8) == 0xF0) n = 4, cp = b & 0x07;
    else return 0;
    if (i + n > text.size()) return 0;
    for (std::size_t k = 1; k < n; ++k) {
        if ((byte(i + k) & 0xC0) != 0x80) return 0;
        cp = (cp << 6) | (byte(i + k) & 0x3F);
    }
    // Overlong forms, surrogates and values past U+10FFFF.
    static constexpr std::uint32_t kMin[] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < kMin[n] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return 0;
    return n;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open corpus file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::size_t> encode(const std::vector<std::string>& tokens, const Vocabulary& vocab) {
    std::vector<std::size_t> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(vocab.id(t));
    return ids;
}

std::string to_hex(const std::string& s) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out;
    for (unsigned char c : s) {
        out += kDigits[c >> 4];
        out += kDigits[c & 15];
    }
    return out;
}

}  // namespace

void validate_utf8(std::string_view text, const std::string& what) {
    for (std::size_t i = 0; i < text.size();) {
        const std::size_t n = sequence_length(text, i);
        if (n == 0) throw DataError(what + ": malformed UTF-8 at byte " + std::to_string(i));
        i += n;
    }
}

std::vector<std::string> tokenize(std::string_view text, TokenMode mode) {
    std::vector<std::string> out;
    if (mode == TokenMode::kChar) {
        for (std::size_t i = 0; i < text.size();) {
            const std::size_t n = std::max<std::size_t>(1, sequence_length(text, i));
            out.emplace_back(text.substr(i, n));
            i += n;
        }
        return out;
    }
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        std::istringstream words{std::string(text.substr(start, end - start))};
        std::string w;
        while (words >> w) out.push_back(w);
        out.emplace_back(kEosToken);
        start = end + 1;
    }
    return out;
}

Vocabulary build_vocabulary(const std::vector<std::string>& tokens) {
    std::map<std::string, std::size_t> counts;
    for (const auto& t : tokens) ++counts[t];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> order;
    for (auto& [t, n] : ranked) order.push_back(t);
    if (!counts.count(kUnkToken)) order.emplace_back(kUnkToken);
    return Vocabulary(std::move(order));
}

const std::vector<std::size_t>& Corpus::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "valid") return valid;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "' (expected train, valid or test)");
}

Corpus build_corpus(std::string_view train, std::string_view valid, std::string_view test, TokenMode mode) {
    const std::pair<std::string_view, const char*> parts[] = {{train, "train"}, {valid, "valid"}, {test, "test"}};
    for (const auto& [text, name] : parts) {
        if (text.empty()) throw EmptyInputError(std::string(name) + " split is empty");
        validate_utf8(text, std::string(name) + " split");
    }
    Corpus c;
    c.mode = mode;
    const auto train_tokens = tokenize(train, mode);
    c.vocab = build_vocabulary(train_tokens);
    c.train = encode(train_tokens, c.vocab);
    c.valid = encode(tokenize(valid, mode), c.vocab);
    c.test = encode(tokenize(test, mode), c.vocab);
    return c;
}

Corpus ingest_corpus(const std::filesystem::path& train, const std::filesystem::path& valid,
                     const std::filesystem::path& test, TokenMode mode) {
    return build_corpus(read_text(train), read_text(valid), read_text(test), mode);
}

void write_corpus(std::ostream& os, const Corpus& corpus) {
    os << "mpq-corpus 1 " << token_mode_name(corpus.mode) << ' ' << corpus.vocab.size() << '\n';
    for (const auto& t : corpus.vocab.tokens()) os << to_hex(t) << '\n';
    for (const char* name : {"train", "valid", "test"}) {
        const auto& ids = corpus.split(name);
        os << name << ' ' << ids.size();
        for (std::size_t id : ids) os << ' ' << id;
        os << '\n';
    }
}

Corpus read_corpus(std::istream& is) {
    std::string line;
    std::size_t line_no = 1;
    const auto bad = [&](const std::string& why) {
        return FormatError("corpus line " + std::to_string(line_no) + ": " + why);
    };
    if (!std::getline(is, line)) throw bad("missing header");
    std::istringstream head(line);
    std::string magic, version, mode;
    std::size_t n = 0;
    if (!(head >> magic >> version >> mode >> n) || magic != "mpq-corpus" || version != "1") throw bad("bad header");
    Corpus c;
    c.mode = parse_token_mode(mode);
    std::vector<std::string> tokens;
    for (std::size_t i = 0; i < n; ++i) {
        ++line_no;
        if (!std::getline(is, line) || line.size() % 2) throw bad("bad vocabulary entry");
        std::string t;
        for (std::size_t k = 0; k < line.size(); k += 2) {
            const std::string byte = line.substr(k, 2);
            if (byte.find_first_not_of("0123456789abcdef") != std::string::npos) throw bad("bad hex digit");
            t += static_cast<char>(std::stoi(byte, nullptr, 16));
        }
        tokens.push_back(std::move(t));
    }
    try {
        c.vocab = Vocabulary(std::move(tokens));
    } catch (const FormatError& e) {
        throw bad(e.what());
    }
    for (auto [name, ids] : {std::pair{"train", &c.train}, {"valid", &c.valid}, {"test", &c.test}}) {
        ++line_no;
        if (!std::getline(is, line)) throw bad(std::string("missing ") + name + " split");
        std::istringstream ss(line);
        std::string tag;
        std::size_t count = 0;
        if (!(ss >> tag >> count) || tag != name) throw bad(std::string("expected ") + name + " split");
        ids->resize(count);
        for (auto& id : *ids) {
            if (!(ss >> id)) throw bad("split is shorter than its count");
            if (id >= c.vocab.size()) throw bad("token id " + std::to_string(id) + " outside the vocabulary");
        }
    }
    return c;
}

}  // namespace mpq
