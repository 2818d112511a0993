// mpq: command-line driver for training, quantizing, searching and
// reporting on small Transformer language models.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "mpq/allocate.hpp"
#include "mpq/checkpoint.hpp"
#include "mpq/errors.hpp"
#include "mpq/pipeline.hpp"

namespace {

using namespace mpq;
namespace fs = std::filesystem;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string corpus;  // ingested corpus file; overrides the config's text files
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "experiment config (key = value sections)");
    cmd->add_option("--seed", c.seed, "override the config seed");
    cmd->add_option("--corpus", c.corpus, "corpus file written by `mpq ingest`");
}

ExperimentConfig load(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
    if (c.seed) cfg.set_seed(*c.seed);
    return cfg;
}

Corpus corpus_for(const Common& c, const ExperimentConfig& cfg) {
    if (!c.corpus.empty()) {
        std::ifstream in(c.corpus);
        if (!in) throw DataError("cannot open corpus " + c.corpus);
        return read_corpus(in);
    }
    if (cfg.train_path.empty()) throw ConfigError("no corpus: pass --corpus or set [corpus] paths in --config");
    return ingest_corpus(cfg.train_path, cfg.valid_path, cfg.test_path, cfg.token_mode);
}

template <typename F>
void write_to(const fs::path& path, F&& body) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    body(out);
}

template <typename T, typename F>
T read_from(const fs::path& path, F&& parse) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    return parse(in);
}

fs::path or_default(const std::string& given, const ExperimentConfig& cfg, const char* name) {
    return given.empty() ? cfg.output_dir / name : fs::path(given);
}

// "1=a.qmodel,2=b.qmodel"
std::map<int, QuantizedModel> load_uniform(const std::string& spec, const ExperimentConfig& cfg) {
    std::map<int, QuantizedModel> out;
    if (spec.empty()) {
        for (int b : cfg.uniform_bits) {
            out.emplace(b, load_quantized(cfg.output_dir / ("uniform" + std::to_string(b) + ".qmodel")));
        }
        return out;
    }
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw ConfigError("--uniform expects bits=path pairs, got '" + item + "'");
        out.emplace(std::stoi(item.substr(0, eq)), load_quantized(item.substr(eq + 1)));
    }
    return out;
}

int run(int argc, char** argv) {
    CLI::App app{"Mixed-precision quantization of Transformer language models"};
    app.require_subcommand(1);
    Common common;

    auto* ingest = app.add_subcommand("ingest", "tokenize the corpus and build the vocabulary");
    add_common(ingest, common);
    std::string out;
    ingest->add_option("--out", out, "corpus file (default <output_dir>/corpus.txt)");

    auto* train = app.add_subcommand("train", "train the full-precision baseline");
    add_common(train, common);
    train->add_option("--out", out, "checkpoint (default <output_dir>/baseline.ckpt)");

    auto* admm = app.add_subcommand("quantize-admm", "ADMM quantization-aware training");
    add_common(admm, common);
    std::string model, bit_map, log_path;
    int bits = 0;
    admm->add_option("--model", model, "initial full-precision checkpoint")->required();
    admm->add_option("--bits", bits, "uniform bit-width");
    admm->add_option("--bit-map", bit_map, "per-cluster widths (cluster,n_bits)");
    admm->add_option("--out", out, "quantized checkpoint")->required();
    admm->add_option("--log", log_path, "per-epoch ADMM log");

    auto* sens = app.add_subcommand("sensitivity", "Hessian-trace sensitivity of every cluster");
    add_common(sens, common);
    sens->add_option("--model", model, "full-precision checkpoint")->required();
    sens->add_option("--out", out, "report (default <output_dir>/sensitivity.csv)");

    auto* alloc = app.add_subcommand("allocate", "minimum-sensitivity bit allocation under a budget");
    add_common(alloc, common);
    std::string sens_path;
    std::optional<double> budget;
    alloc->add_option("--sensitivity", sens_path, "sensitivity report")->required();
    alloc->add_option("--budget", budget, "average bits per weight");
    alloc->add_option("--out", out, "bit map (default <output_dir>/minsen_bits.csv)");

    auto* nas = app.add_subcommand("nas-search", "search precision selection weights in a supernet");
    add_common(nas, common);
    std::string uniform;
    std::optional<double> beta;
    std::string extracted;
    nas->add_option("--uniform", uniform, "bits=path list of uniform models (default <output_dir>/uniform{b}.qmodel)");
    nas->add_option("--beta", beta, "penalty coefficient");
    nas->add_option("--out", out, "selection weights (default <output_dir>/selection.csv)");
    nas->add_option("--extracted", extracted, "write the 1-best model as a full-precision checkpoint");

    auto* extract = app.add_subcommand("extract", "1-best bit map from selection weights");
    add_common(extract, common);
    std::string selection;
    extract->add_option("--selection", selection, "selection weights")->required();
    extract->add_option("--out", out, "bit map (default <output_dir>/nas_bits.csv)");

    auto* eval = app.add_subcommand("eval", "perplexity and evaluation time of a checkpoint");
    add_common(eval, common);
    std::string split;
    eval->add_option("--model", model, "checkpoint (full or quantized)")->required();
    eval->add_option("--split", split, "train, valid or test (default from config)");

    auto* report = app.add_subcommand("report", "print a report dump as an aligned table");
    add_common(report, common);
    std::string rows_path;
    bool as_csv = false;
    report->add_option("--rows", rows_path, "report dump (default <output_dir>/report_timed.csv)");
    report->add_flag("--csv", as_csv, "print comma-separated instead");

    auto* pipeline = app.add_subcommand("pipeline", "run every configured stage and write the report");
    add_common(pipeline, common);
    bool quiet = false;
    pipeline->add_flag("--quiet", quiet, "no progress output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return static_cast<int>(ExitCode::kUsage);
    }

    const ExperimentConfig cfg = load(common);

    if (ingest->parsed()) {
        const Corpus c = corpus_for(common, cfg);
        const fs::path path = or_default(out, cfg, "corpus.txt");
        write_to(path, [&](std::ostream& os) { write_corpus(os, c); });
        std::printf("vocab %zu  train %zu  valid %zu  test %zu tokens -> %s\n", c.vocab.size(), c.train.size(),
                    c.valid.size(), c.test.size(), path.c_str());
    } else if (train->parsed()) {
        const Corpus c = corpus_for(common, cfg);
        TransformerLM m(model_config_for(cfg, c), cfg.seed);
        for (const auto& e : train_sgd(m, c.train, cfg.train)) std::printf("epoch %zu loss %.4f\n", e.epoch, e.train_loss);
        const fs::path path = or_default(out, cfg, "baseline.ckpt");
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        save_model(path, m);
        std::printf("%s ppl %.2f\n", cfg.eval_split.c_str(), evaluate(m, c.split(cfg.eval_split)).ppl);
    } else if (admm->parsed()) {
        if ((bits == 0) == bit_map.empty()) throw ConfigError("give exactly one of --bits and --bit-map");
        const Corpus c = corpus_for(common, cfg);
        const TransformerLM init = load_model(model);
        const auto clusters = model_clusters(init.config(), cfg.quantize_embeddings);
        const BitMap map = bits ? uniform_bit_map(clusters, bits) : read_from<BitMap>(bit_map, read_bit_map);
        const AdmmResult res = train_admm(init, c.train, clusters, map, cfg.admm);
        if (!log_path.empty()) write_to(log_path, [&](std::ostream& os) { write_admm_log(os, res.run.log); });
        const auto& best = res.run.log.at(res.run.best_epoch);
        std::printf("%s at epoch %zu, normalized residual %.3g\n", res.run.converged ? "converged" : "not converged",
                    best.epoch, best.normalized_residual);
        if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
        save_quantized(out, res.model);
        std::printf("%.2f bits, %.4f MB, %s ppl %.2f\n", res.model.average_bits(), model_size_mb(res.model),
                    cfg.eval_split.c_str(), evaluate(res.model.dequantize(), c.split(cfg.eval_split)).ppl);
    } else if (sens->parsed()) {
        const Corpus c = corpus_for(common, cfg);
        const TransformerLM m = load_model(model);
        const auto r = analyze_sensitivity(m, c.train, model_clusters(m.config(), cfg.quantize_embeddings), cfg.sensitivity);
        const fs::path path = or_default(out, cfg, "sensitivity.csv");
        write_to(path, [&](std::ostream& os) { write_sensitivity(os, r); });
        for (const auto& cl : r.clusters) {
            std::printf("%-12s trace %.4g +- %.2g\n", cl.id.c_str(), cl.trace, cl.std_error);
        }
    } else if (alloc->parsed()) {
        const auto r = read_from<SensitivityReport>(sens_path, read_sensitivity);
        const auto a = allocate_bits(r, budget.value_or(cfg.budget));
        const fs::path path = or_default(out, cfg, "minsen_bits.csv");
        write_to(path, [&](std::ostream& os) { write_bit_map(os, a.bits); });
        for (const auto& [id, b] : a.bits) std::printf("%-12s %d\n", id.c_str(), b);
        std::printf("average %.3f bits, omega %.6g\n", a.average_bits, a.total_omega);
    } else if (nas->parsed()) {
        const Corpus c = corpus_for(common, cfg);
        Supernet net(load_uniform(uniform, cfg), cfg.shared_bits);
        NasConfig nc = cfg.nas;
        if (beta) nc.beta = *beta;
        for (const auto& r : search(net, c.train, nc)) {
            std::printf("epoch %zu weight loss %.4f arch loss %.4f expected bits %.3f\n", r.epoch, r.weight_loss,
                        r.arch_loss, r.expected_bits);
        }
        const auto sel = net.selection(nc.beta);
        write_to(or_default(out, cfg, "selection.csv"), [&](std::ostream& os) { write_selection(os, sel); });
        if (!extracted.empty()) save_model(extracted, net.extract(extract_1best(sel).bits));
    } else if (extract->parsed()) {
        const auto a = extract_1best(read_from<SelectionWeights>(selection, read_selection));
        write_to(or_default(out, cfg, "nas_bits.csv"), [&](std::ostream& os) { write_bit_map(os, a.bits); });
        for (const auto& [id, b] : a.bits) std::printf("%-12s %d\n", id.c_str(), b);
        std::printf("average %.3f bits\n", a.average_bits);
    } else if (eval->parsed()) {
        const Corpus c = corpus_for(common, cfg);
        const auto r = evaluate_checkpoint(model, c.split(split.empty() ? cfg.eval_split : split));
        std::printf("ppl %.2f  positions %zu  time %.2f s\n", r.ppl, r.positions, r.seconds);
    } else if (report->parsed()) {
        const auto rows = read_from<std::vector<ReportRow>>(or_default(rows_path, cfg, "report_timed.csv"), read_report_csv);
        if (as_csv) write_report_csv(std::cout, rows, true);
        else write_table(std::cout, rows);
    } else if (pipeline->parsed()) {
        const Corpus c = corpus_for(common, cfg);
        const auto rows = run_pipeline(cfg, c, quiet ? nullptr : &std::cerr);
        write_table(std::cout, rows);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const mpq::Error& e) {
        std::fprintf(stderr, "mpq: %s\n", e.what());
        return static_cast<int>(e.code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "mpq: %s\n", e.what());
        return static_cast<int>(mpq::ExitCode::kData);
    }
}
