// SPDX-License-Identifier: Apache-2.0
#include "cbdes/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace cbdes {

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
    if (epochs == 0) throw ConfigError("epochs must be at least 1");
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
    if (train_size == 0 || eval_size == 0) throw ConfigError("dataset sizes must be at least 1");
    if (effective_warmup() >= total_steps()) throw ConfigError("warm-up must be shorter than the run");
}

std::size_t TrainConfig::effective_warmup() const {
    if (warmup_iters != 0) return warmup_iters;
    const std::size_t total = total_steps();
    return total < 10000 ? total / 20 : 500;
}

std::uint64_t train_data_seed(std::uint64_t seed) { return mix_seed(seed, 101); }
std::uint64_t eval_data_seed(std::uint64_t seed) { return mix_seed(seed, 202); }
std::uint64_t model_seed(std::uint64_t seed) { return mix_seed(seed, 303); }

LossReport train_step(MoeModel& model, AdamW& optimizer, std::span<const SyntheticScene> data,
                      std::span<const std::size_t> batch, const TrainConfig& config, std::size_t step) {
    if (batch.empty()) throw ConfigError("train_step: empty batch");
    const auto images = stack_images(data, batch);
    const auto labels = gather_labels(data, batch);

    optimizer.zero_grad();
    auto out = model.forward(images, FusionMode::soft_all(), Mode::Train);
    auto task = cross_entropy(out.logits, labels);
    const double task_value = task.item();

    LossReport report;
    if (out.routing) {
        auto balance = load_balance_loss(*out.routing);
        auto objective = add(task, scale(balance, config.lambda));
        report = total_loss(task_value, *out.routing, config.lambda);
        objective.backward();
    } else {
        // Single-expert baseline: one expert carries all traffic.
        report = total_loss(task_value, RoutingMatrix::one_hot(std::vector<std::size_t>(batch.size(), 0), 1),
                            0.0);
        report.lambda = config.lambda;
        report.balance_loss = 0.0;
        report.total = task_value;
        task.backward();
    }
    const double lr = cosine_warmup_lr(step, config.total_steps(), config.effective_warmup(), config.lr);
    optimizer.step(lr, config.weight_decay);
    return report;
}

double selection_entropy(std::span<const std::size_t> counts) {
    const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
    if (total == 0.0) return 0.0;
    double h = 0.0;
    for (auto c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / total;
        h -= p * std::log2(p);
    }
    return h;
}

EvalResult evaluate(MoeModel& model, std::span<const SyntheticScene> data, FusionMode fusion,
                    std::size_t batch_size) {
    if (data.empty()) throw ConfigError("evaluate: empty dataset");
    if (batch_size == 0) throw ConfigError("evaluate: batch size must be at least 1");
    NoGradGuard no_grad;
    const std::size_t k = model.has_router() ? model.experts().size() : 1;
    EvalResult result;
    result.mean_routing.assign(k, 0.0);
    result.selection_counts.assign(k, 0);
    std::size_t correct = 0;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        std::vector<std::size_t> idx(std::min(batch_size, data.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        auto out = model.forward(stack_images(data, idx), fusion, Mode::Eval);
        const auto logits = out.logits.data();
        const std::size_t classes = out.logits.dim(1);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto row = logits.subspan(i * classes, classes);
            const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
            if (pred == data[idx[i]].label) ++correct;
            ++result.selection_counts[out.top1[i]];
            if (out.routing) {
                auto r = out.routing->row(i);
                for (std::size_t j = 0; j < k; ++j) result.mean_routing[j] += r[j];
                result.routing_rows.push_back(std::move(r));
            } else {
                result.mean_routing[0] += 1.0;
            }
        }
    }
    const double n = static_cast<double>(data.size());
    result.accuracy = static_cast<double>(correct) / n;
    for (auto& m : result.mean_routing) m /= n;
    result.selection_entropy = selection_entropy(result.selection_counts);
    result.max_expert_share =
        static_cast<double>(*std::max_element(result.selection_counts.begin(), result.selection_counts.end())) / n;
    return result;
}

std::vector<LossReport> train(MoeModel& model, std::span<const SyntheticScene> data, const TrainConfig& config,
                              const StepCallback& on_step) {
    config.validate();
    if (data.empty()) throw ConfigError("train: empty dataset");
    AdamW optimizer(model.trainable());
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t steps_per_epoch = (data.size() + config.batch_size - 1) / config.batch_size;
    TrainConfig run = config;
    run.train_size = data.size();
    std::vector<LossReport> history;
    history.reserve(run.total_steps());
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < run.epochs; ++epoch) {
        std::mt19937_64 rng(mix_seed(config.seed, 1000 + epoch));
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
            const std::size_t begin = s * run.batch_size;
            const std::size_t end = std::min(begin + run.batch_size, order.size());
            const std::span<const std::size_t> batch(order.data() + begin, end - begin);
            history.push_back(train_step(model, optimizer, data, batch, run, step));
            if (on_step) on_step(step, history.back());
        }
    }
    return history;
}

}  // namespace cbdes
