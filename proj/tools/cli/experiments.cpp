// SPDX-License-Identifier: Apache-2.0
#include "experiments.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

#include "cbdes/dataset.hpp"
#include "cbdes/moe.hpp"

namespace cbdes::cli {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
    return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

AblationRow row_of(const RunResult& run, const TrainConfig& config) {
    AblationRow row;
    row.seed = config.seed;
    row.lambda = config.lambda;
    row.accuracy = run.eval.accuracy;
    row.selection_entropy = run.eval.selection_entropy;
    row.max_expert_share = run.eval.max_expert_share;
    row.initial_loss = run.history.front().task_loss;
    row.final_epoch_loss = final_epoch_loss(run.history, config.steps_per_epoch());
    row.selection_counts = run.eval.selection_counts;
    return row;
}

AblationRow median_row(const std::vector<AblationRow>& rows, double lambda) {
    std::vector<double> acc, entropy, share, initial, final;
    for (const auto& r : rows) {
        if (r.lambda != lambda) continue;
        acc.push_back(r.accuracy);
        entropy.push_back(r.selection_entropy);
        share.push_back(r.max_expert_share);
        initial.push_back(r.initial_loss);
        final.push_back(r.final_epoch_loss);
    }
    AblationRow m;
    m.lambda = lambda;
    m.accuracy = median(acc);
    m.selection_entropy = median(entropy);
    m.max_expert_share = median(share);
    m.initial_loss = median(initial);
    m.final_epoch_loss = median(final);
    return m;
}

}  // namespace

double median(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

RunResult run_training(const TrainConfig& config, FusionMode eval_fusion, const StepCallback& on_step) {
    config.validate();
    const auto train_data = generate_dataset(config.train_size, train_data_seed(config.seed));
    const auto eval_data = generate_dataset(config.eval_size, eval_data_seed(config.seed));
    const auto start = Clock::now();
    RunResult run{MoeModel(config.model, model_seed(config.seed)), {}, {}, 0.0};
    run.history = train(run.model, train_data, config, on_step);
    run.eval = evaluate(run.model, eval_data, eval_fusion);
    run.seconds = elapsed_ms(start) / 1000.0;
    return run;
}

double final_epoch_loss(const std::vector<LossReport>& history, std::size_t steps_per_epoch) {
    if (history.empty()) return 0.0;
    const std::size_t n = std::min(steps_per_epoch, history.size());
    double total = 0.0;
    for (std::size_t i = history.size() - n; i < history.size(); ++i) total += history[i].task_loss;
    return total / static_cast<double>(n);
}

TrainConfig ablation_defaults() {
    TrainConfig c;
    c.train_size = 256;
    c.eval_size = 256;
    c.epochs = 6;
    c.batch_size = 8;
    return c;
}

Ablation run_ablation(const TrainConfig& base, const std::vector<std::uint64_t>& seeds, double lambda,
                      const Progress& progress) {
    if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
    if (!(lambda > 0.0)) throw ConfigError("ablation lambda must be positive");
    if (base.model.single_expert) throw ConfigError("ablation needs a routed mixture, not a single expert");
    const auto start = Clock::now();
    Ablation result;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
        for (double l : {0.0, lambda}) {
            TrainConfig config = base;
            config.seed = seeds[s];
            config.lambda = l;
            auto run = run_training(config, FusionMode::top_k(1));
            result.rows.push_back(row_of(run, config));
            if (s == 0) (l == 0.0 ? result.routing_unregularized : result.routing_regularized) = run.eval.routing_rows;
            if (progress) {
                std::ostringstream msg;
                msg << "seed " << config.seed << " lambda " << l << ": entropy " << run.eval.selection_entropy
                    << ", max share " << run.eval.max_expert_share << ", accuracy " << run.eval.accuracy << " ("
                    << run.seconds << " s)";
                progress(msg.str());
            }
        }
    }
    result.median_unregularized = median_row(result.rows, 0.0);
    result.median_regularized = median_row(result.rows, lambda);
    result.seconds = elapsed_ms(start) / 1000.0;
    return result;
}

std::vector<BenchRow> bench_expert_stage(MoeModel& model, const std::vector<std::size_t>& batches,
                                         std::size_t repetitions, std::uint64_t seed) {
    if (!model.has_router()) throw ConfigError("benchmark needs a routed mixture");
    if (repetitions == 0) throw ConfigError("benchmark needs at least one repetition");
    NoGradGuard no_grad;
    auto& bundle = model.experts();
    const std::size_t max_batch = batches.empty() ? 0 : *std::max_element(batches.begin(), batches.end());
    const auto scenes = generate_dataset(std::max<std::size_t>(max_batch, 1), seed);
    std::vector<BenchRow> rows;
    for (std::size_t b : batches) {
        if (b == 0) throw ConfigError("benchmark batch sizes must be positive");
        std::vector<std::size_t> idx(b);
        for (std::size_t i = 0; i < b; ++i) idx[i] = i;
        const auto images = stack_images(scenes, idx);

        BenchRow row;
        row.batch = b;
        row.repetitions = repetitions;
        std::vector<double> soft, top1, router;
        auto routing = model.router().route(images, Mode::Eval);
        // One untimed pass of each path to settle allocations.
        fuse_soft(bundle.forward_all(images, Mode::Eval), routing);
        infer_sparse(bundle, routing, images, 1);
        for (std::size_t r = 0; r < repetitions; ++r) {
            auto t = Clock::now();
            routing = model.router().route(images, Mode::Eval);
            router.push_back(elapsed_ms(t));

            ForwardStats stats;
            t = Clock::now();
            auto fused = fuse_soft(bundle.forward_all(images, Mode::Eval, &stats), routing);
            soft.push_back(elapsed_ms(t));
            row.soft_forwards = stats.expert_forwards;

            t = Clock::now();
            auto sparse = infer_sparse(bundle, routing, images, 1);
            top1.push_back(elapsed_ms(t));
            row.top1_forwards = sparse.expert_forwards;
        }
        row.soft_median_ms = median(soft);
        row.top1_median_ms = median(top1);
        row.router_median_ms = median(router);
        rows.push_back(row);
    }
    return rows;
}

}  // namespace cbdes::cli
