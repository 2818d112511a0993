#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "mpq/errors.hpp"
#include "mpq/trainer.hpp"

namespace mpq {
namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab = 5;
    c.d_model = 8;
    c.d_ff = 16;
    c.n_heads = 2;
    c.n_layers = 1;
    c.max_len = 8;
    return c;
}

// A periodic stream is easy to learn, so a few epochs must cut the loss.
std::vector<std::size_t> periodic_stream(std::size_t n) {
    std::vector<std::size_t> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = (i * 3 + i / 5) % 5;
    return s;
}

TEST(Trainer, LossDecreasesOnLearnableStream) {
    TransformerLM model(tiny_config(), 1);
    const auto stream = periodic_stream(400);
    TrainConfig tc;
    tc.lr = 0.2;
    tc.epochs = 8;
    tc.batch_size = 4;
    tc.seq_len = 8;
    const double before = perplexity(model, stream);
    const auto log = train_sgd(model, stream, tc);
    ASSERT_EQ(log.size(), 8u);
    EXPECT_LT(log.back().train_loss, log.front().train_loss);
    EXPECT_LT(perplexity(model, stream), before);
}

TEST(Trainer, SameSeedIsBitIdentical) {
    const auto stream = periodic_stream(300);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 3;
    tc.seq_len = 8;
    TransformerLM a(tiny_config(), 3), b(tiny_config(), 3);
    train_sgd(a, stream, tc);
    train_sgd(b, stream, tc);
    const auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_TRUE(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()))
            << pa[i].name;
    }
}

TEST(Trainer, EpochOrderIsSeededPermutation) {
    const auto a = epoch_order(20, 7, 0);
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(sorted[i], i);
    EXPECT_EQ(a, epoch_order(20, 7, 0));
    EXPECT_NE(a, epoch_order(20, 7, 1));
}

TEST(Trainer, HookSeesClippedGradients) {
    TransformerLM model(tiny_config(), 2);
    const auto batches = make_batches(periodic_stream(100), 8, 4);
    double seen_norm = -1.0;
    sgd_step(model, batches[0], 0.1, 1e-3, [&](const std::vector<NamedTensor>& params, std::vector<Tensor>& grads) {
        EXPECT_EQ(params.size(), grads.size());
        seen_norm = global_norm(grads);
    });
    EXPECT_NEAR(seen_norm, 1e-3, 1e-9);
}

TEST(Trainer, NonFiniteWeightsDiverge) {
    TransformerLM model(tiny_config(), 2);
    model.layers()[0].attn.Q.data()[0] = std::numeric_limits<float>::quiet_NaN();
    const auto batches = make_batches(periodic_stream(100), 8, 4);
    EXPECT_THROW(sgd_step(model, batches[0], 0.1, 5.0), TrainingDivergedError);
}

TEST(Trainer, EmptyBatchListThrows) {
    TransformerLM model(tiny_config(), 2);
    TrainConfig tc;
    EXPECT_THROW(train_epoch(model, {}, tc, 0), EmptyInputError);
}

TEST(Trainer, ParametersAreFrozenAfterStep) {
    TransformerLM model(tiny_config(), 2);
    const auto batches = make_batches(periodic_stream(100), 8, 4);
    sgd_step(model, batches[0], 0.1, 5.0);
    for (const auto& p : model.parameters()) EXPECT_FALSE(p.tensor.requires_grad()) << p.name;
}

}  // namespace
}  // namespace mpq
