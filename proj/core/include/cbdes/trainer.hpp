// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cbdes/dataset.hpp"
#include "cbdes/model.hpp"
#include "cbdes/moe.hpp"
#include "cbdes/optim.hpp"

namespace cbdes {

/// Training hyper-parameters. The learning rate is ten times the value used
/// for pretrained backbones because desk-scale experts start from scratch.
struct TrainConfig {
    double lr = 5e-4;
    double weight_decay = 0.01;
    /// 0 selects 5% of the total steps when the run is shorter than 10000
    /// steps, else 500.
    std::size_t warmup_iters = 0;
    std::size_t epochs = 20;
    std::size_t batch_size = 4;
    double lambda = kDefaultBalanceWeight;
    std::uint64_t seed = 1;
    std::size_t train_size = 512;
    std::size_t eval_size = 256;
    ModelConfig model;

    void validate() const;
    std::size_t steps_per_epoch() const { return (train_size + batch_size - 1) / batch_size; }
    std::size_t total_steps() const { return epochs * steps_per_epoch(); }
    std::size_t effective_warmup() const;
};

/// Seeds of the derived random streams of a run.
std::uint64_t train_data_seed(std::uint64_t seed);
std::uint64_t eval_data_seed(std::uint64_t seed);
std::uint64_t model_seed(std::uint64_t seed);

/// One optimization step with soft gating: all experts, routing, fusion,
/// head, cross-entropy + lambda * balance loss, backward, AdamW at the
/// scheduled learning rate for `step`.
LossReport train_step(MoeModel& model, AdamW& optimizer, std::span<const SyntheticScene> data,
                      std::span<const std::size_t> batch, const TrainConfig& config, std::size_t step);

struct EvalResult {
    double accuracy = 0.0;
    std::vector<double> mean_routing;
    std::vector<std::size_t> selection_counts;
    double selection_entropy = 0.0;
    double max_expert_share = 0.0;
    /// Routing probabilities, one row per scene (empty without a router).
    std::vector<std::vector<double>> routing_rows;
};

/// Eval-mode pass over `data` in batches of `batch_size`.
EvalResult evaluate(MoeModel& model, std::span<const SyntheticScene> data, FusionMode fusion,
                    std::size_t batch_size = 16);

/// Base-2 Shannon entropy of the normalized histogram.
double selection_entropy(std::span<const std::size_t> counts);

using StepCallback = std::function<void(std::size_t step, const LossReport&)>;

/// Runs config.total_steps() steps over `data`, reshuffling every epoch.
std::vector<LossReport> train(MoeModel& model, std::span<const SyntheticScene> data, const TrainConfig& config,
                              const StepCallback& on_step = {});

}  // namespace cbdes
