// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cbdes/model.hpp"
#include "cbdes/trainer.hpp"

namespace cbdes::cli {

/// A finished training run: model, per-step history and its evaluation.
struct RunResult {
    MoeModel model;
    std::vector<LossReport> history;
    EvalResult eval;
    double seconds = 0.0;
};

/// Trains from scratch on the run's generated datasets and evaluates under
/// `eval_fusion`.
RunResult run_training(const TrainConfig& config, FusionMode eval_fusion,
                       const StepCallback& on_step = {});

/// Mean task loss over the last epoch of `history`.
double final_epoch_loss(const std::vector<LossReport>& history, std::size_t steps_per_epoch);

struct AblationRow {
    std::uint64_t seed = 0;
    double lambda = 0.0;
    double accuracy = 0.0;
    double selection_entropy = 0.0;
    double max_expert_share = 0.0;
    double initial_loss = 0.0;
    double final_epoch_loss = 0.0;
    std::vector<std::size_t> selection_counts;
};

struct Ablation {
    /// Two rows per seed, the unregularized run first.
    std::vector<AblationRow> rows;
    /// Per-lambda medians of accuracy, entropy, max share and losses.
    AblationRow median_unregularized;
    AblationRow median_regularized;
    /// Top-1 evaluation routing rows of the first seed for each lambda.
    std::vector<std::vector<double>> routing_unregularized;
    std::vector<std::vector<double>> routing_regularized;
    double seconds = 0.0;
};

using Progress = std::function<void(const std::string&)>;

/// Paired runs at lambda = 0 and lambda = `lambda` for every seed; every
/// other setting comes from `base`.
Ablation run_ablation(const TrainConfig& base, const std::vector<std::uint64_t>& seeds, double lambda,
                      const Progress& progress = {});

/// Desk-scale settings of the load-balance ablation: smaller dataset and
/// fewer epochs than a full training run so that six runs fit a coffee
/// break on one core.
TrainConfig ablation_defaults();

struct BenchRow {
    std::size_t batch = 0;
    std::size_t repetitions = 0;
    double soft_median_ms = 0.0;
    double top1_median_ms = 0.0;
    double router_median_ms = 0.0;
    std::size_t soft_forwards = 0;
    std::size_t top1_forwards = 0;
    double speedup() const { return top1_median_ms > 0.0 ? soft_median_ms / top1_median_ms : 0.0; }
};

/// Times the expert stage (experts + fusion, routing precomputed) under
/// SoftAll and TopK(1) for each batch size. Router time is reported
/// separately.
std::vector<BenchRow> bench_expert_stage(MoeModel& model, const std::vector<std::size_t>& batches,
                                         std::size_t repetitions, std::uint64_t seed);

double median(std::vector<double> values);

}  // namespace cbdes::cli
