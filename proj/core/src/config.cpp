#include "mpq/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <istream>
#include <set>
#include <sstream>

#include "mpq/errors.hpp"

namespace mpq {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <typename T>
T parse_number(const std::string& text) {
    std::istringstream ss(text);
    T v{};
    ss >> v;
    if (ss.fail() || !ss.eof()) throw ConfigError("'" + text + "' is not a valid number");
    if constexpr (std::is_unsigned_v<T>) {
        if (text.find('-') != std::string::npos) throw ConfigError("'" + text + "' must not be negative");
    }
    return v;
}

bool parse_bool(const std::string& text) {
    if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
    if (text == "false" || text == "0" || text == "no" || text == "off") return false;
    throw ConfigError("'" + text + "' is not a boolean");
}

}  // namespace

IniFile IniFile::parse(std::istream& is) {
    IniFile ini;
    std::set<std::string> seen;
    std::string section, raw;
    std::size_t line_no = 0;
    while (std::getline(is, raw)) {
        ++line_no;
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        const auto where = "config line " + std::to_string(line_no) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3) throw ConfigError(where + "malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError(where + "empty key");
        if (section.empty()) throw ConfigError(where + "key '" + key + "' outside any section");
        const std::string full = section + "." + key;
        if (!seen.insert(full).second) throw ConfigError(where + "'" + full + "' set twice");
        ini.entries_.push_back({full, {trim(line.substr(eq + 1)), line_no}});
    }
    return ini;
}

void ExperimentConfig::set_seed(std::uint64_t s) {
    seed = s;
    train.seed = s;
    admm.seed = s;
    sensitivity.seed = s;
    nas.seed = s;
}

bool ExperimentConfig::has_stage(const std::string& stage) const {
    return std::find(stages.begin(), stages.end(), stage) != stages.end();
}

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    for (const auto& item : split_list(text)) out.push_back(parse_number<int>(item));
    if (out.empty()) throw ConfigError("empty list");
    return out;
}

ExperimentConfig parse_config(std::istream& is, const std::filesystem::path& base_dir) {
    const IniFile ini = IniFile::parse(is);
    ExperimentConfig c;
    std::uint64_t seed = c.seed;
    const auto path = [&](const std::string& v) {
        const std::filesystem::path p(v);
        return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
    };
    using Setter = std::function<void(const std::string&)>;
    const auto size = [](std::size_t& f) { return Setter([&f](const std::string& v) { f = parse_number<std::size_t>(v); }); };
    const auto real = [](double& f) { return Setter([&f](const std::string& v) { f = parse_number<double>(v); }); };
    const auto flag = [](bool& f) { return Setter([&f](const std::string& v) { f = parse_bool(v); }); };
    const std::map<std::string, Setter> setters{
        {"corpus.train", [&](const std::string& v) { c.train_path = path(v); }},
        {"corpus.valid", [&](const std::string& v) { c.valid_path = path(v); }},
        {"corpus.test", [&](const std::string& v) { c.test_path = path(v); }},
        {"corpus.mode", [&](const std::string& v) { c.token_mode = parse_token_mode(v); }},
        {"model.d_model", size(c.model.d_model)},
        {"model.d_ff", size(c.model.d_ff)},
        {"model.n_heads", size(c.model.n_heads)},
        {"model.n_layers", size(c.model.n_layers)},
        {"model.max_len", size(c.model.max_len)},
        {"model.tied_output", flag(c.model.tied_output)},
        {"train.lr", real(c.train.lr)},
        {"train.epochs", size(c.train.epochs)},
        {"train.batch_size", size(c.train.batch_size)},
        {"train.seq_len", size(c.train.seq_len)},
        {"train.clip", real(c.train.clip)},
        {"admm.lr", real(c.admm.lr)},
        {"admm.lr_decay", real(c.admm.lr_decay)},
        {"admm.epochs", size(c.admm.epochs)},
        {"admm.batch_size", size(c.admm.batch_size)},
        {"admm.seq_len", size(c.admm.seq_len)},
        {"admm.clip", real(c.admm.clip)},
        {"admm.rho", real(c.admm.rho)},
        {"admm.rho_growth", real(c.admm.rho_growth)},
        {"admm.rho_max", real(c.admm.rho_max)},
        {"admm.tolerance", real(c.admm.tolerance)},
        {"sensitivity.samples", size(c.sensitivity.samples)},
        {"sensitivity.probe_tokens", size(c.sensitivity.probe_tokens)},
        {"sensitivity.seq_len", size(c.sensitivity.seq_len)},
        {"sensitivity.probe",
         [&](const std::string& v) {
             if (v == "gaussian") c.sensitivity.probe = ProbeKind::kGaussian;
             else if (v == "rademacher") c.sensitivity.probe = ProbeKind::kRademacher;
             else throw ConfigError("probe must be gaussian or rademacher");
         }},
        {"sensitivity.average_trace", flag(c.sensitivity.average_trace)},
        {"sensitivity.budget", real(c.budget)},
        {"nas.lr", real(c.nas.lr)},
        {"nas.arch_lr", real(c.nas.arch_lr)},
        {"nas.beta", real(c.nas.beta)},
        {"nas.epochs", size(c.nas.epochs)},
        {"nas.batch_size", size(c.nas.batch_size)},
        {"nas.seq_len", size(c.nas.seq_len)},
        {"nas.clip", real(c.nas.clip)},
        {"nas.freeze_weights", flag(c.nas.freeze_weights)},
        {"nas.shared_bits", [&](const std::string& v) { c.shared_bits = parse_number<int>(v); }},
        {"quant.uniform_bits", [&](const std::string& v) { c.uniform_bits = parse_int_list(v); }},
        {"quant.quantize_embeddings", flag(c.quantize_embeddings)},
        {"pipeline.stages", [&](const std::string& v) { c.stages = split_list(v); }},
        {"pipeline.output_dir", [&](const std::string& v) { c.output_dir = path(v); }},
        {"pipeline.eval_split", [&](const std::string& v) { c.eval_split = v; }},
        {"pipeline.seed", [&](const std::string& v) { seed = parse_number<std::uint64_t>(v); }},
    };
    for (const auto& [key, entry] : ini.entries()) {
        const auto where = "config line " + std::to_string(entry.line) + ": ";
        try {
            if (key.rfind("manual.", 0) == 0) {
                c.manual_bits[key.substr(7)] = parse_number<int>(entry.value);
                continue;
            }
            auto it = setters.find(key);
            if (it == setters.end()) throw ConfigError("unknown key '" + key + "'");
            it->second(entry.value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    c.set_seed(seed);
    for (const auto& s : c.stages) {
        if (!std::count(kPipelineStages.begin(), kPipelineStages.end(), s)) {
            throw ConfigError("unknown pipeline stage '" + s + "'");
        }
    }
    if (c.eval_split != "train" && c.eval_split != "valid" && c.eval_split != "test") {
        throw ConfigError("eval_split must be train, valid or test");
    }
    if (c.budget <= 0.0) throw ConfigError("budget must be positive");
    if (c.nas.beta < 0.0) throw ConfigError("nas beta must be non-negative");
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    return parse_config(in, path.parent_path());
}

}  // namespace mpq
