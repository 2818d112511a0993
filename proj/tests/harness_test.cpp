#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mpq/checkpoint.hpp"
#include "mpq/errors.hpp"
#include "mpq/pipeline.hpp"

namespace mpq {
namespace {

namespace fs = std::filesystem;

std::vector<std::string> tokens_of(const Corpus& c, const std::vector<std::size_t>& ids) {
    std::vector<std::string> out;
    for (std::size_t id : ids) out.push_back(c.vocab.token(id));
    return out;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "mpq_harness_test" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

TEST(Corpus, WordModeExample) {
    const Corpus c = build_corpus("a b a\n", "b\n", "a c\n", TokenMode::kWord);
    EXPECT_EQ(c.vocab.size(), 4u);
    for (const char* t : {"a", "b", kUnkToken, kEosToken}) EXPECT_TRUE(c.vocab.contains(t)) << t;
    EXPECT_EQ(tokens_of(c, c.train), (std::vector<std::string>{"a", "b", "a", "<eos>"}));
    EXPECT_EQ(tokens_of(c, c.test), (std::vector<std::string>{"a", "<unk>", "<eos>"}));
    // Most frequent first.
    EXPECT_EQ(c.vocab.token(0), "a");
}

TEST(Corpus, WordModeSplitsOnAnyWhitespace) {
    const auto t = tokenize("  x\ty  \n\nz", TokenMode::kWord);
    EXPECT_EQ(t, (std::vector<std::string>{"x", "y", "<eos>", "<eos>", "z", "<eos>"}));
}

TEST(Corpus, CharModeKeepsCodePoints) {
    const auto t = tokenize("h\xc3\xa9\n\xe2\x82\xac", TokenMode::kChar);
    EXPECT_EQ(t, (std::vector<std::string>{"h", "\xc3\xa9", "\n", "\xe2\x82\xac"}));
    const Corpus c = build_corpus("abca\n", "abd\n", "a\n", TokenMode::kChar);
    EXPECT_EQ(tokens_of(c, c.valid), (std::vector<std::string>{"a", "b", "<unk>", "\n"}));
}

TEST(Corpus, VocabularyIsDeterministic) {
    const std::string text = "the cat saw the dog\nthe dog ran\n";
    const Corpus a = build_corpus(text, text, text, TokenMode::kWord);
    const Corpus b = build_corpus(text, text, text, TokenMode::kWord);
    EXPECT_EQ(a.vocab.tokens(), b.vocab.tokens());
    EXPECT_EQ(a.train, b.train);
}

TEST(Corpus, RejectsEmptyAndMalformedText) {
    EXPECT_THROW(build_corpus("", "a", "a", TokenMode::kChar), EmptyInputError);
    EXPECT_THROW(build_corpus("a", "a", "", TokenMode::kChar), EmptyInputError);
    for (const char* bad : {"a\xff", "\xc3", "\xc0\xaf", "\xed\xa0\x80", "\xf4\x90\x80\x80"}) {
        EXPECT_THROW(build_corpus(bad, "a", "a", TokenMode::kChar), DataError) << bad;
    }
    EXPECT_THROW(ingest_corpus("/nonexistent/train.txt", "v", "t", TokenMode::kChar), DataError);
}

TEST(Corpus, FileRoundTrip) {
    const Corpus c = build_corpus("a b\n\xc3\xa9 a\n", "a\n", "b z\n", TokenMode::kWord);
    std::stringstream ss;
    write_corpus(ss, c);
    const Corpus back = read_corpus(ss);
    EXPECT_EQ(back.mode, c.mode);
    EXPECT_EQ(back.vocab.tokens(), c.vocab.tokens());
    EXPECT_EQ(back.train, c.train);
    EXPECT_EQ(back.valid, c.valid);
    EXPECT_EQ(back.test, c.test);

    std::istringstream bad("mpq-corpus 1 char 1\n3c756e6b3e\ntrain 2 0 1\nvalid 0\ntest 0\n");
    EXPECT_THROW(read_corpus(bad), FormatError);
}

TEST(Config, ParsesSectionsAndResolvesPaths) {
    std::istringstream is(R"(
# comment
[corpus]
train = data/t.txt
mode = word
[model]
d_model = 32
n_layers = 3
[admm]
rho_growth = 1.5
[nas]
beta = 0.1
shared_bits = 4
[quant]
uniform_bits = 2, 4
[manual]
layer0.attn = 4
[pipeline]
stages = baseline, minsen
seed = 7
)");
    const ExperimentConfig c = parse_config(is, "/base");
    EXPECT_EQ(c.train_path, fs::path("/base/data/t.txt"));
    EXPECT_EQ(c.token_mode, TokenMode::kWord);
    EXPECT_EQ(c.model.d_model, 32u);
    EXPECT_EQ(c.model.n_layers, 3u);
    EXPECT_EQ(c.admm.rho_growth, 1.5);
    EXPECT_EQ(c.nas.beta, 0.1);
    EXPECT_EQ(c.shared_bits, 4);
    EXPECT_EQ(c.uniform_bits, (std::vector<int>{2, 4}));
    EXPECT_EQ(c.manual_bits, (BitMap{{"layer0.attn", 4}}));
    EXPECT_TRUE(c.has_stage("minsen"));
    EXPECT_FALSE(c.has_stage("nas"));
    for (auto s : {c.seed, c.train.seed, c.admm.seed, c.sensitivity.seed, c.nas.seed}) EXPECT_EQ(s, 7u);
}

TEST(Config, ErrorsNameTheLine) {
    const auto message = [](const std::string& text) {
        std::istringstream is(text);
        try {
            parse_config(is);
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    EXPECT_NE(message("[model]\nd_modl = 3\n").find("line 2"), std::string::npos);
    EXPECT_NE(message("[model]\nd_model = x\n").find("line 2"), std::string::npos);
    EXPECT_NE(message("[model]\nd_model = -4\n").find("line 2"), std::string::npos);
    EXPECT_NE(message("d_model = 4\n").find("line 1"), std::string::npos);
    EXPECT_NE(message("[train]\nlr = 1\nlr = 2\n").find("line 3"), std::string::npos);
    EXPECT_NE(message("[pipeline]\nstages = baseline, tune\n").find("tune"), std::string::npos);
    EXPECT_NE(message("[model]\ntied_output = maybe\n").find("line 2"), std::string::npos);
}

TEST(Report, BaselineRatioIsDash) {
    ReportRow r{"transformer", "full", "none", 32, 7.123, 0.43, 1.0, 0.5};
    const auto f = format_row(rounded(r));
    EXPECT_EQ(f[3], "32");
    EXPECT_EQ(f[4], "7.12");
    EXPECT_EQ(f[6], "-");
}

TEST(Report, FractionalBitsOnlyForSearchedMethods) {
    EXPECT_EQ(format_row(rounded({"m", "mixed", "minsen", 1.94, 1, 1, 2, 0}))[3], "1.9");
    EXPECT_EQ(format_row(rounded({"m", "mixed", "nas", 2.0, 1, 1, 2, 0}))[3], "2.0");
    EXPECT_EQ(format_row(rounded({"m", "uniform", "uniform", 2.0, 1, 1, 2, 0}))[3], "2");
    EXPECT_EQ(format_row(rounded({"m", "mixed", "admm-manual", 1.89, 1, 1, 2, 0}))[3], "2");
}

TEST(Report, RatioColumnFromSizes) {
    ReportRow r{"transformer", "uniform", "uniform", 4, 60.0, 9.4, compression_ratio(66.0, 9.4), 1.0};
    EXPECT_EQ(format_row(rounded(r))[6], "7.0");
}

std::vector<ReportRow> sample_rows() {
    return {rounded({"transformer", "full", "none", 32, 7.794, 0.4667, 1.0, 0.63}),
            rounded({"transformer", "uniform", "uniform", 2, 9.012, 0.0297, 15.7, 0.61}),
            rounded({"transformer", "mixed", "minsen", 1.94, 8.777, 0.029, 16.1, 0.6})};
}

TEST(Report, DumpRoundTrips) {
    for (bool timed : {true, false}) {
        std::stringstream ss;
        write_report_csv(ss, sample_rows(), timed);
        auto back = read_report_csv(ss);
        auto expect = sample_rows();
        if (!timed) for (auto& r : expect) r.eval_seconds = 0.0;
        EXPECT_EQ(back, expect) << timed;
    }
    std::istringstream bad("model,quant. precision\nx,y\n");
    EXPECT_THROW(read_report_csv(bad), FormatError);
}

TEST(Report, TableHasExactColumnsAndAlignment) {
    std::stringstream ss;
    write_table(ss, sample_rows());
    std::vector<std::string> lines;
    for (std::string l; std::getline(ss, l);) lines.push_back(l);
    ASSERT_EQ(lines.size(), 5u);
    for (const auto& c : kReportColumns) EXPECT_NE(lines[0].find(c), std::string::npos) << c;
    for (const auto& l : lines) EXPECT_EQ(l.size(), lines[0].size());
    EXPECT_NE(lines[2].find(" - "), std::string::npos);
    std::stringstream csv;
    write_report_csv(csv, sample_rows(), true);
    std::string header;
    std::getline(csv, header);
    EXPECT_EQ(header, "model,quant. precision,quant. method,#bit,PPL,size(MB),comp. ratio,eval time(s)");
}

ModelConfig tiny_model(std::size_t vocab) {
    ModelConfig c;
    c.vocab = vocab;
    c.d_model = 8;
    c.d_ff = 16;
    c.n_heads = 2;
    c.n_layers = 2;
    c.max_len = 16;
    return c;
}

TEST(Evaluate, UniformPredictorHasPerplexityV) {
    TransformerLM m(tiny_model(10), 1);
    for (float& x : m.output_projection().data()) x = 0.0f;
    std::vector<std::size_t> stream;
    for (std::size_t i = 0; i < 500; ++i) stream.push_back((i * 7) % 10);
    const EvalResult r = evaluate(m, stream);
    EXPECT_NEAR(r.ppl, 10.0, 0.1);
    EXPECT_EQ(r.positions, 499u);
    EXPECT_GT(r.seconds, 0.0);
    EXPECT_THROW(evaluate(m, std::vector<std::size_t>{1}), EmptyInputError);
}

TEST(Evaluate, PackedAndDequantizedCheckpointsAgree) {
    const fs::path dir = fresh_dir("eval");
    const TransformerLM m(tiny_model(10), 2);
    const auto clusters = model_clusters(m.config());
    BitMap bits = uniform_bit_map(clusters, 2);
    bits["layer1.ffn"] = 4;
    const QuantizedModel qm = quantize_model(m, clusters, bits);
    save_quantized(dir / "q.qmodel", qm);
    save_model(dir / "deq.ckpt", qm.dequantize());
    std::vector<std::size_t> stream;
    for (std::size_t i = 0; i < 300; ++i) stream.push_back((i * i + 3) % 10);
    const EvalResult packed = evaluate_checkpoint(dir / "q.qmodel", stream);
    const EvalResult full = evaluate_checkpoint(dir / "deq.ckpt", stream);
    EXPECT_EQ(packed.ppl, full.ppl);
    EXPECT_EQ(packed.nll, full.nll);

    std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
    EXPECT_THROW(evaluate_checkpoint(dir / "junk.ckpt", stream), FormatError);
}

TEST(BitMapIo, RoundTripAndErrors) {
    const BitMap bits{{"embed", 2}, {"layer0.attn", 8}, {"out", 32}};
    std::stringstream ss;
    write_bit_map(ss, bits);
    EXPECT_EQ(read_bit_map(ss), bits);
    std::istringstream dup("cluster,n_bits\nembed,2\nembed,4\n");
    EXPECT_THROW(read_bit_map(dup), FormatError);
    std::istringstream bad("cluster,n_bits\nembed,two\n");
    EXPECT_THROW(read_bit_map(bad), FormatError);
}

std::string tiny_text(std::size_t lines, std::uint64_t seed) {
    static const char* words[] = {"the", "cat", "sat", "on", "a", "mat", "and", "dog", "ran"};
    std::string text;
    std::uint64_t s = seed;
    for (std::size_t l = 0; l < lines; ++l) {
        for (int w = 0; w < 5; ++w) {
            s = s * 6364136223846793005ull + 1442695040888963407ull;
            text += words[(s >> 33) % 9];
            text += w < 4 ? ' ' : '\n';
        }
    }
    return text;
}

ExperimentConfig tiny_experiment(const fs::path& dir) {
    ExperimentConfig c;
    c.model = tiny_model(0);
    c.train.epochs = 2;
    c.train.batch_size = 4;
    c.train.seq_len = 16;
    c.admm.epochs = 2;
    c.admm.batch_size = 4;
    c.admm.seq_len = 16;
    c.admm.rho_growth = 1.5;
    c.admm.rho_max = 5;
    c.sensitivity.samples = 2;
    c.sensitivity.probe_tokens = 64;
    c.sensitivity.seq_len = 16;
    c.nas.epochs = 1;
    c.nas.batch_size = 4;
    c.nas.seq_len = 16;
    c.manual_bits = {{"layer0.attn", 4}, {"layer0.ffn", 2}, {"layer1.attn", 2},
                     {"layer1.ffn", 1}, {"embed", 2},       {"out", 4}};
    c.output_dir = dir;
    return c;
}

const Corpus& tiny_corpus() {
    static const Corpus c = build_corpus(tiny_text(60, 1), tiny_text(10, 2), tiny_text(10, 3), TokenMode::kChar);
    return c;
}

TEST(Pipeline, BaselineOnlyGivesOneRow) {
    auto cfg = tiny_experiment(fresh_dir("baseline"));
    cfg.stages = {"baseline"};
    const auto rows = run_pipeline(cfg, tiny_corpus());
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].method, "none");
    EXPECT_EQ(rows[0].bits, 32.0);
    EXPECT_EQ(rows[0].ratio, 1.0);
    EXPECT_EQ(format_row(rows[0])[6], "-");
    EXPECT_TRUE(fs::exists(cfg.output_dir / "baseline.ckpt"));
    EXPECT_TRUE(fs::exists(cfg.output_dir / "report.txt"));
}

TEST(Pipeline, FailingStageIsNamedAndEarlierCheckpointsPersist) {
    auto cfg = tiny_experiment(fresh_dir("failing"));
    cfg.stages = {"minsen"};
    try {
        run_pipeline(cfg, tiny_corpus());
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("stage minsen"), std::string::npos);
        EXPECT_EQ(e.code(), ExitCode::kData);
    }

    cfg.stages = {"baseline", "minsen"};
    cfg.budget = 0.5;
    try {
        run_pipeline(cfg, tiny_corpus());
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ExitCode::kInfeasible);
    }
    EXPECT_TRUE(fs::exists(cfg.output_dir / "baseline.ckpt"));
}

TEST(Pipeline, AllStagesReproducibleAndReloadable) {
    const auto a = tiny_experiment(fresh_dir("full_a"));
    const auto b = tiny_experiment(fresh_dir("full_b"));
    const auto rows = run_pipeline(a, tiny_corpus());
    run_pipeline(b, tiny_corpus());
    ASSERT_EQ(rows.size(), 8u);
    EXPECT_EQ(file_bytes(a.output_dir / "report.csv"), file_bytes(b.output_dir / "report.csv"));
    EXPECT_FALSE(file_bytes(a.output_dir / "report.csv").empty());

    const std::vector<std::pair<std::string, std::string>> files{
        {"none", "baseline.ckpt"},   {"uniform", "uniform1.qmodel"},   {"uniform", "uniform2.qmodel"},
        {"uniform", "uniform4.qmodel"}, {"uniform", "uniform8.qmodel"}, {"admm-manual", "manual.qmodel"},
        {"minsen", "minsen.qmodel"}, {"nas", "nas.qmodel"}};
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(rows[i].method, files[i].first);
        const EvalResult r = evaluate_checkpoint(a.output_dir / files[i].second, tiny_corpus().test);
        EXPECT_EQ(rounded({"", "", rows[i].method, 0, r.ppl, 0, 0, 0}).ppl, rows[i].ppl) << files[i].second;
    }
    EXPECT_EQ(rows[1].bits, 1.0);
    EXPECT_EQ(rows[4].bits, 8.0);
    // Narrower uniform widths compress more.
    for (std::size_t i = 1; i + 1 < 5; ++i) EXPECT_GT(rows[i].ratio, rows[i + 1].ratio);
    EXPECT_GT(rows[4].ratio, 1.0);
}

}  // namespace
}  // namespace mpq
