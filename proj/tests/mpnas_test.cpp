#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "mpq/errors.hpp"
#include "mpq/mpnas.hpp"
#include "mpq/random.hpp"
#include "support/layer_oracle.hpp"

namespace mpq {
namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab = 7;
    c.d_model = 4;
    c.d_ff = 8;
    c.n_heads = 2;
    c.n_layers = 2;
    c.max_len = 8;
    return c;
}

// Mostly "next token = previous + 1", with occasional random jumps.
std::vector<std::size_t> pattern_stream(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::size_t> s{0};
    while (s.size() < n) s.push_back(rng.uniform() < 0.1 ? rng.below(7) : (s.back() + 1) % 7);
    return s;
}

const TransformerLM& trained_model() {
    static const TransformerLM model = [] {
        TransformerLM m(tiny_config(), 3);
        TrainConfig tc;
        tc.lr = 0.3;
        tc.epochs = 20;
        tc.batch_size = 8;
        tc.seq_len = 8;
        train_sgd(m, pattern_stream(2048, 1), tc);
        return m;
    }();
    return model;
}

// Layer clusters at `bits`, embedding and output at 2 bits in every model.
QuantizedModel uniform_at(const TransformerLM& model, int bits) {
    const auto clusters = model_clusters(model.config());
    BitMap map = uniform_bit_map(clusters, bits);
    map["embed"] = 2;
    map["out"] = 2;
    return quantize_model(model, clusters, map);
}

std::map<int, QuantizedModel> uniform_models(const TransformerLM& model, std::vector<int> widths) {
    std::map<int, QuantizedModel> out;
    for (int b : widths) out.emplace(b, uniform_at(model, b));
    return out;
}

std::vector<float> logits_of(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

void expect_close(const std::vector<float>& a, const std::vector<float>& b, double tol) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << i;
}

void set_all(Supernet& net, const std::vector<double>& logits) {
    for (const auto& d : net.selection(0.0).decisions) net.set_logits(d.id, logits);
}

const std::vector<std::size_t> kTokens{0, 1, 2, 3, 4, 6, 0, 1, 5, 6, 0, 1, 2, 3, 4, 5};

TEST(Supernet, SingleCandidateIsThatModel) {
    const auto models = uniform_models(trained_model(), {4});
    const Supernet net(models, 4);
    const TransformerLM plain = models.at(4).dequantize();
    expect_close(logits_of(net.forward_logits(kTokens, 8)), logits_of(forward_logits(plain, kTokens, 8)), 1e-6);
}

TEST(Supernet, ZeroLogitsGiveUniformWeights) {
    const Supernet net(uniform_models(trained_model(), {1, 2, 4, 8}), 2);
    const auto sel = net.selection(0.01);
    ASSERT_EQ(sel.decisions.size(), 4u);
    for (const auto& d : sel.decisions) {
        EXPECT_EQ(d.bits, (std::vector<int>{1, 2, 4, 8}));
        for (double w : d.weights) EXPECT_DOUBLE_EQ(w, 0.25);
    }
    EXPECT_EQ(sel.fixed_bits, (BitMap{{"embed", 2}, {"out", 2}}));
    EXPECT_EQ(sel.fixed_sizes.at("embed"), 7u * 4 + 8u * 4);
}

TEST(Supernet, CandidatesAreCopies) {
    auto models = uniform_models(trained_model(), {2, 4});
    const Supernet net(models, 2);
    const auto before = logits_of(net.forward_logits(kTokens, 8));
    for (auto& [b, qm] : models) {
        for (auto& c : qm.clusters) c.table.alpha *= 3.0;
        for (auto& r : qm.residue) r.tensor = Tensor(r.tensor.shape(), 0.5f);
    }
    EXPECT_EQ(logits_of(net.forward_logits(kTokens, 8)), before);

    // Training the supernet leaves the other supernet built from the same models alone.
    Supernet a(models, 2);
    const Supernet b(models, 2);
    const auto b_before = logits_of(b.forward_logits(kTokens, 8));
    NasConfig cfg;
    cfg.epochs = 1;
    cfg.seq_len = 8;
    cfg.batch_size = 4;
    search(a, pattern_stream(256, 2), cfg);
    EXPECT_EQ(logits_of(b.forward_logits(kTokens, 8)), b_before);
    EXPECT_NE(logits_of(a.forward_logits(kTokens, 8)), b_before);
}

TEST(Supernet, RejectsIncompatibleModels) {
    auto models = uniform_models(trained_model(), {2, 4});
    EXPECT_THROW(Supernet(models, 8), IncompatibleError);

    ModelConfig wide = tiny_config();
    wide.d_model = 8;
    models.emplace(8, uniform_at(TransformerLM(wide, 1), 8));
    EXPECT_THROW(Supernet(models, 2), IncompatibleError);

    auto mislabeled = uniform_models(trained_model(), {2});
    mislabeled.emplace(4, uniform_at(trained_model(), 8));
    EXPECT_THROW(Supernet(mislabeled, 2), IncompatibleError);
}

TEST(Supernet, OneHotSelectionReproducesUniformModel) {
    const auto models = uniform_models(trained_model(), {1, 2, 4, 8});
    Supernet net(models, 2);
    const auto stream = pattern_stream(300, 9);
    for (std::size_t i = 0; i < 4; ++i) {
        std::vector<double> logits(4, -200.0);
        logits[i] = 0.0;
        set_all(net, logits);
        const int b = net.candidate_bits()[i];
        const TransformerLM plain = models.at(b).dequantize();
        expect_close(logits_of(net.forward_logits(kTokens, 8)), logits_of(forward_logits(plain, kTokens, 8)), 1e-5);
        const auto [nll_net, n_net] = supernet_total_nll(net, stream);
        const auto [nll, n] = total_nll(plain, stream);
        EXPECT_EQ(n_net, n);
        EXPECT_NEAR(nll_net / n_net, nll / n, 1e-5) << b;

        BitMap pick;
        for (const auto& d : net.selection(0.0).decisions) pick[d.id] = b;
        expect_close(logits_of(forward_logits(net.extract(pick), kTokens, 8)),
                     logits_of(forward_logits(plain, kTokens, 8)), 1e-6);
    }
}

TEST(Supernet, IdenticalCandidatesAnyWeights) {
    // The same 2-bit weights offered again under the 4-bit label.
    auto models = uniform_models(trained_model(), {2});
    QuantizedModel relabeled = models.at(2);
    for (auto& c : relabeled.clusters) {
        if (c.id.rfind("layer", 0) == 0) c.table.n_bits = 4;
    }
    models.emplace(4, relabeled);
    Supernet net(models, 2);
    const auto expect = logits_of(forward_logits(models.at(2).dequantize(), kTokens, 8));
    Rng rng(4);
    for (int trial = 0; trial < 5; ++trial) {
        for (const auto& d : net.selection(0.0).decisions) {
            const std::vector<double> l{rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)};
            net.set_logits(d.id, l);
        }
        expect_close(logits_of(net.forward_logits(kTokens, 8)), expect, 1e-5);
    }
}

// Scalar-loop evaluation of the combined network for one sequence.
std::vector<ref::Vec> supernet_oracle(const std::vector<TransformerLM>& cands, const SelectionWeights& sel,
                                      const TransformerLM& shared, std::span<const std::size_t> tokens) {
    const std::size_t d = shared.config().d_model, v = shared.config().vocab;
    std::vector<ref::Vec> xs;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        ref::Vec x(d);
        for (std::size_t i = 0; i < d; ++i) {
            x[i] = shared.token_embedding().data()[tokens[t] * d + i] + shared.position_embedding().data()[t * d + i];
        }
        xs.push_back(x);
    }
    for (std::size_t l = 0; l < shared.layers().size(); ++l) {
        const auto& wa = sel.decisions[2 * l].weights;
        const auto& wf = sel.decisions[2 * l + 1].weights;
        std::vector<ref::Vec> mixed(xs.size(), ref::Vec(d, 0.0));
        for (std::size_t c = 0; c < cands.size(); ++c) {
            const auto out = oracle::attention_oracle(cands[c].layers()[l], xs);
            for (std::size_t t = 0; t < xs.size(); ++t)
                for (std::size_t i = 0; i < d; ++i) mixed[t][i] += wa[c] * out[t][i];
        }
        xs = mixed;
        for (auto& x : xs) {
            ref::Vec y(d, 0.0);
            for (std::size_t c = 0; c < cands.size(); ++c) {
                const auto out = oracle::feed_forward_oracle(cands[c].layers()[l], x);
                for (std::size_t i = 0; i < d; ++i) y[i] += wf[c] * out[i];
            }
            x = y;
        }
    }
    for (auto& x : xs) x = ref::linear(x, ref::to_vec(shared.output_projection()), 1, d, v);
    return xs;
}

TEST(Supernet, MatchesScalarCombinationOracle) {
    const auto models = uniform_models(trained_model(), {1, 4});
    Supernet net(models, 4);
    const std::vector<TransformerLM> cands{models.at(1).dequantize(), models.at(4).dequantize()};
    Rng rng(12);
    for (int trial = 0; trial < 10; ++trial) {
        for (const auto& d : net.selection(0.0).decisions) {
            net.set_logits(d.id, std::vector<double>{rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)});
        }
        const auto got = logits_of(net.forward_logits(kTokens, 8));
        const auto sel = net.selection(0.0);
        for (std::size_t s = 0; s < 2; ++s) {
            const auto expect = supernet_oracle(cands, sel, cands[1], std::span(kTokens).subspan(8 * s, 8));
            for (std::size_t t = 0; t < 8; ++t)
                for (std::size_t k = 0; k < 7; ++k) EXPECT_NEAR(got[(8 * s + t) * 7 + k], expect[t][k], 1e-5);
        }
    }
}

TEST(NasLoss, PenaltyExamples) {
    SelectionWeights w;
    w.beta = 0.0;
    w.decisions.push_back({"layer0.attn", 16, {1, 4}, {0.0, 0.0}, {0.5, 0.5}});
    EXPECT_EQ(nas_loss(2.25, w), 2.25);
    w.beta = 1.0;
    EXPECT_DOUBLE_EQ(nas_loss(0.0, w), 1.5);
}

TEST(NasLoss, MatchesHandSummation) {
    Rng rng(31);
    const std::vector<int> bits{1, 2, 4, 8};
    for (int trial = 0; trial < 20; ++trial) {
        SelectionWeights w;
        w.beta = 0.01;
        double expect = 0.0;
        for (int l = 0; l < 2; ++l) {
            SelectionDecision d{"layer" + std::to_string(l) + ".ffn", 1, bits, {}, {}};
            double z = 0.0;
            for (int i = 0; i < 4; ++i) z += d.weights.emplace_back(rng.uniform(0.0, 1.0));
            for (auto& x : d.weights) x /= z;
            expect += d.weights[0] * 1.0 + d.weights[1] * std::sqrt(2.0) + d.weights[2] * 2.0 +
                      d.weights[3] * std::sqrt(8.0);
            w.decisions.push_back(d);
        }
        EXPECT_NEAR(nas_loss(0.75, w), 0.75 + 0.01 * expect, 1e-9);
    }
}

TEST(NasLoss, PenaltyTensorAgrees) {
    Supernet net(uniform_models(trained_model(), {1, 2, 4, 8}), 2);
    Rng rng(6);
    for (const auto& d : net.selection(0.0).decisions) {
        std::vector<double> l(4);
        for (auto& x : l) x = rng.uniform(-2.0, 2.0);
        net.set_logits(d.id, l);
    }
    EXPECT_NEAR(net.penalty(0.3).item(), nas_loss(0.0, net.selection(0.3)), 1e-5);
}

NasConfig small_search(double beta, std::size_t epochs) {
    NasConfig cfg;
    cfg.beta = beta;
    cfg.epochs = epochs;
    cfg.seq_len = 8;
    cfg.batch_size = 8;
    return cfg;
}

TEST(Search, LargeBetaSelectsOneBit) {
    Supernet net(uniform_models(trained_model(), {1, 2, 4, 8}), 2);
    search(net, pattern_stream(1024, 5), small_search(1e3, 3));
    const auto a = extract_1best(net.selection(1e3));
    for (const auto& [id, b] : a.bits) {
        if (id.rfind("layer", 0) == 0) EXPECT_EQ(b, 1) << id;
    }
}

TEST(Search, ZeroBetaFavoursBetterCandidate) {
    // The 1-bit candidate is the trained model with noise on every LayerNorm bias.
    TransformerLM noisy = trained_model().clone();
    Rng rng(9);
    for (auto& l : noisy.layers()) {
        for (Tensor* t : {&l.attn.ln_bias, &l.ffn.ln_bias}) {
            for (float& x : t->data()) x += static_cast<float>(rng.uniform(-2.0, 2.0));
        }
    }
    std::map<int, QuantizedModel> models;
    models.emplace(1, uniform_at(noisy, 1));
    models.emplace(8, uniform_at(trained_model(), 8));
    Supernet net(models, 8);
    auto cfg = small_search(0.0, 3);
    cfg.freeze_weights = true;
    search(net, pattern_stream(1024, 5), cfg);
    for (const auto& d : net.selection(0.0).decisions) EXPECT_GT(d.weights[1], d.weights[0]) << d.id;
}

TEST(Search, FrozenSearchDoesNotRaiseHeldOutLoss) {
    Supernet net(uniform_models(trained_model(), {1, 2, 4, 8}), 2);
    const auto stream = pattern_stream(1024, 5);
    const auto held = std::span(stream).subspan(stream.size() / 2);
    const auto [before, n] = supernet_total_nll(net, held);
    auto cfg = small_search(0.0, 4);
    cfg.freeze_weights = true;
    const auto log = search(net, stream, cfg);
    EXPECT_EQ(log.size(), 4u);
    EXPECT_LE(supernet_total_nll(net, held).first / n, before / n);
}

TEST(Search, SelectionStaysNormalizedAndCandidatesOnGrid) {
    const auto models = uniform_models(trained_model(), {1, 2, 4, 8});
    Supernet net(models, 2);
    const auto stream = pattern_stream(512, 8);
    for (int round = 0; round < 3; ++round) {
        const auto log = search(net, stream, small_search(0.01, 1));
        EXPECT_TRUE(std::isfinite(log[0].weight_loss));
        EXPECT_GE(log[0].expected_bits, 1.0);
        EXPECT_LE(log[0].expected_bits, 8.0);
        for (const auto& d : net.selection(0.01).decisions) {
            double s = 0.0;
            for (double w : d.weights) {
                EXPECT_GE(w, 0.0);
                s += w;
            }
            EXPECT_NEAR(s, 1.0, 1e-6) << d.id;
        }
    }
    // After re-projection each candidate's matrices take at most 2^n - 1 distinct values.
    for (const auto& p : net.weight_parameters()) {
        const auto b_at = p.name.find(".b");
        if (b_at == std::string::npos || p.name.find("ln_") != std::string::npos || p.name.back() == '1' ||
            p.name.back() == '2') {
            continue;
        }
        const int bits = std::stoi(p.name.substr(b_at + 2));
        std::set<float> distinct(p.tensor.data().begin(), p.tensor.data().end());
        EXPECT_LE(distinct.size(), bits == 1 ? 2u : (1u << bits) - 1) << p.name;
    }
}

TEST(Search, NonFiniteWeightsDiverge) {
    Supernet net(uniform_models(trained_model(), {1, 2}), 2);
    Tensor w = net.weight_parameters().back().tensor;
    w.data()[0] = NAN;
    EXPECT_THROW(search(net, pattern_stream(512, 8), small_search(0.01, 1)), TrainingDivergedError);
}

TEST(Search, LargerBetaNeverWidens) {
    const auto models = uniform_models(trained_model(), {1, 2, 4, 8});
    const auto stream = pattern_stream(1024, 5);
    double last = INFINITY;
    for (double beta : {0.0, 0.01, 0.1, 1.0, 10.0}) {
        Supernet net(models, 2);
        search(net, stream, small_search(beta, 2));
        const double avg = extract_1best(net.selection(beta)).average_bits;
        EXPECT_LE(avg, last) << beta;
        last = avg;
    }
}

SelectionWeights selection_of(const std::vector<double>& weights) {
    SelectionWeights w;
    w.decisions.push_back({"layer0.attn", 64, {1, 2, 4, 8}, {}, weights});
    for (double x : weights) w.decisions[0].logits.push_back(std::log(x));
    return w;
}

TEST(Extract1Best, LargestWeightWins) {
    const auto a = extract_1best(selection_of({0.1, 0.6, 0.2, 0.1}));
    EXPECT_EQ(a.bits.at("layer0.attn"), 2);
    EXPECT_EQ(a.average_bits, 2.0);
}

TEST(Extract1Best, UniformTiesToOneBit) {
    EXPECT_EQ(extract_1best(selection_of({0.25, 0.25, 0.25, 0.25})).bits.at("layer0.attn"), 1);
}

TEST(Extract1Best, MatchesMaxScanAndIgnoresLogitShift) {
    Rng rng(17);
    Supernet net(uniform_models(trained_model(), {1, 2, 4, 8}), 2);
    for (int trial = 0; trial < 50; ++trial) {
        std::map<std::string, std::vector<double>> chosen;
        for (const auto& d : net.selection(0.0).decisions) {
            std::vector<double> l(4);
            for (auto& x : l) x = rng.uniform(-3.0, 3.0);
            net.set_logits(d.id, l);
            chosen[d.id] = l;
        }
        const auto a = extract_1best(net.selection(0.0));
        for (const auto& [id, l] : chosen) {
            std::size_t best = 0;
            for (std::size_t i = 0; i < l.size(); ++i) {
                if (static_cast<float>(l[i]) > static_cast<float>(l[best])) best = i;
            }
            EXPECT_EQ(a.bits.at(id), net.candidate_bits()[best]);
            const double shift = rng.uniform(-5.0, 5.0);
            std::vector<double> shifted = l;
            for (auto& x : shifted) x += shift;
            net.set_logits(id, shifted);
        }
        EXPECT_EQ(extract_1best(net.selection(0.0)).bits, a.bits);
    }
}

TEST(Extract1Best, AverageIncludesFixedClusters) {
    auto w = selection_of({0.1, 0.1, 0.7, 0.1});
    w.fixed_bits["embed"] = 2;
    w.fixed_sizes["embed"] = 32;
    const auto a = extract_1best(w);
    EXPECT_EQ(a.bits.at("embed"), 2);
    EXPECT_DOUBLE_EQ(a.average_bits, (64.0 * 4 + 32.0 * 2) / 96.0);
}

TEST(SelectionIo, RoundTrip) {
    Supernet net(uniform_models(trained_model(), {1, 2, 4, 8}), 2);
    net.set_logits("layer1.ffn", std::vector<double>{0.5, -1.0, 2.0, 0.125});
    const auto sel = net.selection(0.1);
    std::stringstream ss;
    write_selection(ss, sel);
    const auto back = read_selection(ss);
    EXPECT_EQ(back.beta, 0.1);
    EXPECT_EQ(back.fixed_bits, sel.fixed_bits);
    EXPECT_EQ(back.fixed_sizes, sel.fixed_sizes);
    ASSERT_EQ(back.decisions.size(), sel.decisions.size());
    for (std::size_t i = 0; i < sel.decisions.size(); ++i) {
        EXPECT_EQ(back.decisions[i].id, sel.decisions[i].id);
        EXPECT_EQ(back.decisions[i].size, sel.decisions[i].size);
        EXPECT_EQ(back.decisions[i].bits, sel.decisions[i].bits);
        EXPECT_EQ(back.decisions[i].logits, sel.decisions[i].logits);
        EXPECT_EQ(back.decisions[i].weights, sel.decisions[i].weights);
    }
    EXPECT_EQ(extract_1best(back).bits, extract_1best(sel).bits);
}

TEST(SelectionIo, MalformedInput) {
    const auto fails = [](const std::string& text, const std::string& needle) {
        std::istringstream is(text);
        try {
            read_selection(is);
        } catch (const FormatError& e) {
            return std::string(e.what()).find(needle) != std::string::npos;
        }
        return false;
    };
    const std::string header = "layer,sublayer,size,n_bits,logit,weight\n";
    EXPECT_TRUE(fails("", "no records"));
    EXPECT_TRUE(fails("0,attn,16,1,0,1\n", "line 1"));
    EXPECT_TRUE(fails(header + "0,attn,16,x,0,1\n", "line 2"));
    EXPECT_TRUE(fails(header + "0,conv,16,1,0,1\n", "line 2"));
    EXPECT_TRUE(fails(header + "0,attn,16,1,0,0.5\n", "sum to 1"));
    EXPECT_TRUE(fails(header + "0,attn,16,1,0,1\n0,ffn,16,1,0,1\n0,attn,16,2,0,0\n", "line 4"));
    EXPECT_TRUE(fails("#beta\n" + header, "line 1"));
}

}  // namespace
}  // namespace mpq
