#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mpq/optim.hpp"
#include "mpq/transformer.hpp"

namespace mpq {

struct TrainConfig {
    double lr = 0.1;
    std::size_t epochs = 10;
    std::size_t batch_size = 16;
    std::size_t seq_len = 64;
    double clip = kDefaultClipNorm;
    std::uint64_t seed = 1;
};

/// Called after clipping with the parameters and their loss gradients; may
/// add extra terms (e.g. an augmented-Lagrangian penalty) in place.
using GradientHook = std::function<void(const std::vector<NamedTensor>& params, std::vector<Tensor>& grads)>;

/// Builds the scalar loss graph over the current parameter values.
using LossFn = std::function<Tensor()>;

/// Gradient of `loss` with respect to each of `params`, in order. Parameters
/// track gradients only for the duration of the call.
std::vector<Tensor> loss_gradient(const std::vector<NamedTensor>& params, const LossFn& loss);

/// One SGD step on `loss` over `params`. The loss gradient is clipped by
/// global norm before `hook` runs. Returns the loss value. Parameters track
/// gradients only for the duration of the step.
/// Throws TrainingDivergedError on a non-finite loss or gradient.
double sgd_step(const std::vector<NamedTensor>& params, const LossFn& loss, double lr, double clip,
                const GradientHook& hook = {});

/// sgd_step on the mean cross-entropy of `batch`.
double sgd_step(TransformerLM& model, const Batch& batch, double lr, double clip, const GradientHook& hook = {});

/// Batch visiting order for `epoch`; a pure function of (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n_batches, std::uint64_t seed, std::size_t epoch);

/// Runs one epoch over `batches` in epoch_order; returns the mean batch loss.
double train_epoch(TransformerLM& model, const std::vector<Batch>& batches, const TrainConfig& config,
                   std::size_t epoch, const GradientHook& hook = {});

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
};

/// Plain full-precision SGD training.
std::vector<EpochLog> train_sgd(TransformerLM& model, std::span<const std::size_t> stream, const TrainConfig& config);

}  // namespace mpq
