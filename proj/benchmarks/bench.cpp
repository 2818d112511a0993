#include <benchmark/benchmark.h>

#include <vector>

#include "mpq/hessian.hpp"
#include "mpq/ops.hpp"
#include "mpq/quant.hpp"
#include "mpq/random.hpp"
#include "mpq/trainer.hpp"

namespace {

using namespace mpq;

std::vector<float> normal_weights(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> w(n);
    for (float& x : w) x = static_cast<float>(rng.normal() * 0.1);
    return w;
}

void BM_GemmNN(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = normal_weights(n * n, 1), b = normal_weights(n * n, 2);
    std::vector<float> c(n * n);
    for (auto _ : state) {
        kernels::gemm_nn(a, b, c, n, n, n, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_GemmNN)->Arg(64)->Arg(128)->Arg(256);

void BM_QuantizeValue(benchmark::State& state) {
    const auto w = normal_weights(4096, 3);
    const QuantTable t{static_cast<int>(state.range(0)), 0.05};
    for (auto _ : state) {
        std::int32_t acc = 0;
        for (float x : w) acc += quantize_value(x, t).level;
        benchmark::DoNotOptimize(acc);
    }
    state.SetItemsProcessed(state.iterations() * 4096);
}
BENCHMARK(BM_QuantizeValue)->Arg(1)->Arg(2)->Arg(8);

void BM_FitScale(benchmark::State& state) {
    const auto w = normal_weights(static_cast<std::size_t>(state.range(0)), 4);
    for (auto _ : state) benchmark::DoNotOptimize(fit_scale(w, static_cast<int>(state.range(1))).alpha);
}
BENCHMARK(BM_FitScale)->Args({16384, 2})->Args({16384, 8})->Args({65536, 2});

void BM_PackLevels(benchmark::State& state) {
    const int bits = static_cast<int>(state.range(0));
    const QuantTable t{bits, 0.05};
    std::vector<std::int32_t> levels;
    for (float x : normal_weights(65536, 5)) levels.push_back(quantize_value(x, t).level);
    for (auto _ : state) {
        const auto bytes = pack_levels(levels, bits);
        benchmark::DoNotOptimize(unpack_levels(bytes, levels.size(), bits).data());
    }
}
BENCHMARK(BM_PackLevels)->Arg(1)->Arg(2)->Arg(4)->Arg(8);

ModelConfig desk_model() {
    ModelConfig c;
    c.vocab = 64;
    c.d_model = 64;
    c.d_ff = 256;
    c.n_heads = 2;
    c.n_layers = 2;
    c.max_len = 64;
    return c;
}

Batch random_batch(std::size_t batch, std::size_t seq, std::size_t vocab) {
    Rng rng(6);
    std::vector<std::size_t> stream(batch * seq + 1);
    for (auto& t : stream) t = rng.below(vocab);
    return make_batches(stream, seq, batch).front();
}

void BM_TrainStep(benchmark::State& state) {
    TransformerLM model(desk_model(), 7);
    const Batch batch = random_batch(16, 64, 64);
    for (auto _ : state) benchmark::DoNotOptimize(sgd_step(model, batch, 1e-3, kDefaultClipNorm));
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_Hvp(benchmark::State& state) {
    const TransformerLM model(desk_model(), 8);
    const Batch batch = random_batch(4, 64, 64);
    const auto params = model.parameters();
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    Rng rng(9);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    const LossFn loss = [&] { return batch_loss(model, batch); };
    for (auto _ : state) benchmark::DoNotOptimize(hvp(params, loss, v).data());
}
BENCHMARK(BM_Hvp)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
