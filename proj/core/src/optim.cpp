// SPDX-License-Identifier: Apache-2.0
#include "cbdes/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace cbdes {

void adamw_update(std::span<double> param, std::span<const double> grad, AdamWMoments& moments,
                  std::size_t step, double lr, double weight_decay, const AdamWOptions& options) {
    if (step == 0) throw ConfigError("adamw_update: step count is 1-based");
    if (moments.m.empty()) {
        moments.m.assign(param.size(), 0.0);
        moments.v.assign(param.size(), 0.0);
    }
    const double correction1 = 1.0 - std::pow(options.beta1, static_cast<double>(step));
    const double correction2 = 1.0 - std::pow(options.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad.empty() ? 0.0 : grad[i];
        param[i] -= lr * weight_decay * param[i];
        moments.m[i] = options.beta1 * moments.m[i] + (1.0 - options.beta1) * g;
        moments.v[i] = options.beta2 * moments.v[i] + (1.0 - options.beta2) * g * g;
        const double m_hat = moments.m[i] / correction1;
        const double v_hat = moments.v[i] / correction2;
        param[i] -= lr * m_hat / (std::sqrt(v_hat) + options.eps);
    }
}

AdamW::AdamW(std::vector<Tensor> params, AdamWOptions options)
    : params_(std::move(params)), moments_(params_.size()), options_(options) {}

void AdamW::step(double lr, double weight_decay) {
    ++steps_;
    for (std::size_t i = 0; i < params_.size(); ++i)
        adamw_update(params_[i].data(), params_[i].grad(), moments_[i], steps_, lr, weight_decay, options_);
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

double cosine_warmup_lr(std::size_t step, std::size_t total, std::size_t warmup, double lr_max) {
    if (total <= warmup)
        throw ConfigError("cosine schedule: total steps " + std::to_string(total) + " must exceed warm-up " +
                          std::to_string(warmup));
    if (step > total) throw ConfigError("cosine schedule: step beyond total");
    if (step < warmup) return lr_max * static_cast<double>(step) / static_cast<double>(warmup);
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    return lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace cbdes
