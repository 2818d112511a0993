#include "mpq/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>

#include "mpq/allocate.hpp"
#include "mpq/checkpoint.hpp"
#include "mpq/errors.hpp"

namespace mpq {

EvalResult evaluate(const TransformerLM& model, std::span<const std::size_t> stream) {
    if (stream.size() < 2) throw EmptyInputError("evaluation split needs at least two tokens");
    const auto start = std::chrono::steady_clock::now();
    const auto [nll, n] = total_nll(model, stream);
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
    EvalResult r;
    r.nll = nll;
    r.positions = n;
    r.ppl = std::exp(nll / static_cast<double>(n));
    r.seconds = elapsed.count();
    return r;
}

EvalResult evaluate_checkpoint(const std::filesystem::path& path, std::span<const std::size_t> stream) {
    const TransformerLM model = load_any_model(path);
    if (model.config().vocab == 0) throw FormatError(path.string() + ": model has an empty vocabulary");
    return evaluate(model, stream);
}

void write_bit_map(std::ostream& os, const BitMap& bits) {
    os << "cluster,n_bits\n";
    for (const auto& [id, b] : bits) os << id << ',' << b << '\n';
}

BitMap read_bit_map(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != "cluster,n_bits") throw FormatError("bit map line 1: missing header");
    BitMap bits;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto comma = line.find(',');
        const auto where = "bit map line " + std::to_string(line_no) + ": ";
        if (comma == std::string::npos || comma == 0) throw FormatError(where + "expected cluster,n_bits");
        std::istringstream ss(line.substr(comma + 1));
        int b = 0;
        ss >> b;
        if (ss.fail() || !ss.eof()) throw FormatError(where + "bad bit-width");
        if (!bits.emplace(line.substr(0, comma), b).second) throw FormatError(where + "duplicate cluster");
    }
    if (bits.empty()) throw FormatError("bit map has no entries");
    return bits;
}

ModelConfig model_config_for(const ExperimentConfig& config, const Corpus& corpus) {
    ModelConfig m = config.model;
    m.vocab = corpus.vocab.size();
    m.validate();
    return m;
}

namespace {

class Pipeline {
public:
    Pipeline(const ExperimentConfig& config, const Corpus& corpus, std::ostream* progress)
        : cfg_(config), corpus_(corpus), progress_(progress), dir_(config.output_dir),
          clusters_(model_clusters(model_config_for(config, corpus), config.quantize_embeddings)),
          eval_(corpus.split(config.eval_split)) {}

    std::vector<ReportRow> run() {
        std::filesystem::create_directories(dir_);
        stage("baseline", [&] { baseline(); });
        stage("uniform", [&] { uniform(); });
        stage("manual", [&] { manual(); });
        stage("minsen", [&] { minsen(); });
        stage("nas", [&] { nas(); });
        if (rows_.empty()) throw ConfigError("no pipeline stage selected");
        write_file("report.csv", [&](std::ostream& os) { write_report_csv(os, rows_, false); });
        write_file("report_timed.csv", [&](std::ostream& os) { write_report_csv(os, rows_, true); });
        write_file("report.txt", [&](std::ostream& os) { write_table(os, rows_); });
        return rows_;
    }

private:
    template <typename F>
    void stage(const std::string& name, F&& body) {
        if (!cfg_.has_stage(name)) return;
        note("stage " + name);
        try {
            body();
        } catch (const Error& e) {
            throw Error("stage " + name + ": " + e.what(), e.code());
        } catch (const std::exception& e) {
            throw Error("stage " + name + ": " + e.what(), ExitCode::kData);
        }
    }

    void note(const std::string& line) {
        if (progress_) *progress_ << line << std::endl;
    }

    template <typename F>
    void write_file(const std::string& name, F&& body) {
        std::ofstream out(dir_ / name);
        if (!out) throw DataError("cannot write " + (dir_ / name).string());
        body(out);
        if (!out) throw DataError("failed writing " + (dir_ / name).string());
    }

    const TransformerLM& base() {
        if (!baseline_) {
            const auto path = dir_ / "baseline.ckpt";
            if (!std::filesystem::exists(path)) throw MissingDependencyError("no baseline checkpoint at " + path.string());
            baseline_ = load_model(path);
            if (!(baseline_->config() == model_config_for(cfg_, corpus_))) {
                throw IncompatibleError(path.string() + " does not match the configured model");
            }
        }
        return *baseline_;
    }

    double full_size() { return model_size_mb(base()); }

    void add_row(const std::string& precision, const std::string& method, double bits, double size,
                 const TransformerLM& model) {
        const EvalResult e = evaluate(model, eval_);
        ReportRow r;
        r.model = "transformer";
        r.precision = precision;
        r.method = method;
        r.bits = bits;
        r.ppl = e.ppl;
        r.size_mb = size;
        r.ratio = method == "none" ? 1.0 : compression_ratio(full_size(), size);
        r.eval_seconds = e.seconds;
        rows_.push_back(rounded(r));
        note("  " + method + " ppl " + std::to_string(e.ppl));
    }

    QuantizedModel quantize(const std::string& tag, const TransformerLM& init, const BitMap& bits) {
        AdmmResult res = train_admm(init, corpus_.train, clusters_, bits, cfg_.admm);
        write_file("admm_" + tag + ".csv", [&](std::ostream& os) { write_admm_log(os, res.run.log); });
        const auto& last = res.run.log.at(res.run.best_epoch);
        note("  admm " + tag + ": " + (res.run.converged ? "converged" : "not converged") + " at epoch " +
             std::to_string(last.epoch) + ", normalized residual " + std::to_string(last.normalized_residual));
        save_quantized(dir_ / (tag + ".qmodel"), res.model);
        return std::move(res.model);
    }

    void add_quantized_row(const std::string& precision, const std::string& method, const QuantizedModel& qm) {
        add_row(precision, method, qm.average_bits(), model_size_mb(qm), qm.dequantize());
    }

    void baseline() {
        TransformerLM model(model_config_for(cfg_, corpus_), cfg_.seed);
        const auto log = train_sgd(model, corpus_.train, cfg_.train);
        for (const auto& e : log) note("  epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.train_loss));
        save_model(dir_ / "baseline.ckpt", model);
        baseline_ = std::move(model);
        add_row("full", "none", kFullPrecisionBits, full_size(), *baseline_);
    }

    void uniform() {
        for (int b : cfg_.uniform_bits) {
            const QuantizedModel qm = quantize("uniform" + std::to_string(b), base(), uniform_bit_map(clusters_, b));
            add_quantized_row("uniform", "uniform", qm);
        }
    }

    void manual() {
        if (cfg_.manual_bits.empty()) {
            note("  no [manual] bit map configured; skipped");
            return;
        }
        add_quantized_row("mixed", "admm-manual", quantize("manual", base(), cfg_.manual_bits));
    }

    void minsen() {
        const SensitivityReport report = analyze_sensitivity(base(), corpus_.train, clusters_, cfg_.sensitivity);
        write_file("sensitivity.csv", [&](std::ostream& os) { write_sensitivity(os, report); });
        const PrecisionAssignment a = allocate_bits(report, cfg_.budget);
        write_file("minsen_bits.csv", [&](std::ostream& os) { write_bit_map(os, a.bits); });
        add_quantized_row("mixed", "minsen", quantize("minsen", base(), a.bits));
    }

    void nas() {
        std::map<int, QuantizedModel> uniform;
        for (int b : cfg_.uniform_bits) {
            const auto path = dir_ / ("uniform" + std::to_string(b) + ".qmodel");
            if (!std::filesystem::exists(path)) throw MissingDependencyError("no uniform model at " + path.string());
            uniform.emplace(b, load_quantized(path));
        }
        Supernet net(uniform, cfg_.shared_bits);
        const auto log = search(net, corpus_.train, cfg_.nas);
        write_file("nas_log.csv", [&](std::ostream& os) {
            os << "epoch,weight_loss,arch_loss,expected_bits\n";
            char line[160];
            for (const auto& r : log) {
                std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g\n", r.epoch, r.weight_loss, r.arch_loss,
                              r.expected_bits);
                os << line;
            }
        });
        const SelectionWeights sel = net.selection(cfg_.nas.beta);
        write_file("selection.csv", [&](std::ostream& os) { write_selection(os, sel); });
        PrecisionAssignment a = extract_1best(sel);
        // Clusters outside the searched layers keep the shared model's widths.
        for (const auto& spec : clusters_) a.bits.emplace(spec.id, cfg_.shared_bits);
        write_file("nas_bits.csv", [&](std::ostream& os) { write_bit_map(os, a.bits); });
        add_quantized_row("mixed", "nas", quantize("nas", net.extract(a.bits), a.bits));
    }

    const ExperimentConfig& cfg_;
    const Corpus& corpus_;
    std::ostream* progress_;
    std::filesystem::path dir_;
    std::vector<ClusterSpec> clusters_;
    const std::vector<std::size_t>& eval_;
    std::optional<TransformerLM> baseline_;
    std::vector<ReportRow> rows_;
};

}  // namespace

std::vector<ReportRow> run_pipeline(const ExperimentConfig& config, const Corpus& corpus, std::ostream* progress) {
    return Pipeline(config, corpus, progress).run();
}

}  // namespace mpq
