#include "mpq/trainer.hpp"

#include <cmath>
#include <numeric>

#include "mpq/errors.hpp"
#include "mpq/random.hpp"

namespace mpq {

namespace {

struct TrainableScope {
    const std::vector<NamedTensor>& params;
    explicit TrainableScope(const std::vector<NamedTensor>& p) : params(p) {
        for (const auto& x : params) Tensor(x.tensor).set_requires_grad(true);
    }
    ~TrainableScope() {
        for (const auto& x : params) Tensor(x.tensor).set_requires_grad(false);
    }
};

}  // namespace

std::vector<Tensor> loss_gradient(const std::vector<NamedTensor>& params, const LossFn& loss) {
    TrainableScope scope(params);
    std::vector<Tensor> tensors;
    tensors.reserve(params.size());
    for (const auto& p : params) tensors.push_back(p.tensor);
    return gradient(loss(), tensors);
}

double sgd_step(const std::vector<NamedTensor>& params, const LossFn& loss_fn, double lr, double clip,
                const GradientHook& hook) {
    TrainableScope scope(params);
    std::vector<Tensor> tensors;
    tensors.reserve(params.size());
    for (const auto& p : params) tensors.push_back(p.tensor);

    double loss_value = 0.0;
    std::vector<Tensor> grads;
    try {
        Tensor loss = loss_fn();
        loss_value = loss.item();
        grads = gradient(loss, tensors);
    } catch (const NumericalError& e) {
        throw TrainingDivergedError(std::string("training diverged: ") + e.what());
    }
    if (!std::isfinite(loss_value)) throw TrainingDivergedError("training diverged: loss is not finite");
    const double norm = clip_global_norm(grads, clip);
    if (!std::isfinite(norm)) throw TrainingDivergedError("training diverged: gradient norm is not finite");
    if (hook) hook(params, grads);
    for (std::size_t i = 0; i < tensors.size(); ++i) sgd_update(tensors[i], grads[i], lr);
    return loss_value;
}

double sgd_step(TransformerLM& model, const Batch& batch, double lr, double clip, const GradientHook& hook) {
    const TransformerLM& m = model;
    return sgd_step(model.parameters(), [&] { return batch_loss(m, batch); }, lr, clip, hook);
}

std::vector<std::size_t> epoch_order(std::size_t n_batches, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n_batches);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed * 0x9E3779B97F4A7C15ull + epoch + 1);
    rng.shuffle(std::span(order));
    return order;
}

double train_epoch(TransformerLM& model, const std::vector<Batch>& batches, const TrainConfig& config,
                   std::size_t epoch, const GradientHook& hook) {
    if (batches.empty()) throw EmptyInputError("training split yields no batches");
    double total = 0.0;
    for (std::size_t b : epoch_order(batches.size(), config.seed, epoch)) {
        total += sgd_step(model, batches[b], config.lr, config.clip, hook);
    }
    return total / static_cast<double>(batches.size());
}

std::vector<EpochLog> train_sgd(TransformerLM& model, std::span<const std::size_t> stream, const TrainConfig& config) {
    const auto batches = make_batches(stream, std::min(config.seq_len, model.config().max_len), config.batch_size);
    std::vector<EpochLog> log;
    for (std::size_t e = 0; e < config.epochs; ++e) log.push_back({e, train_epoch(model, batches, config, e)});
    return log;
}

}  // namespace mpq
