// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cbdes/tensor.hpp"

namespace cbdes {

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First and second moment estimates of one parameter tensor.
struct AdamWMoments {
    std::vector<double> m;
    std::vector<double> v;
};

/// One AdamW update of `param` in place. `step` is the 1-based update count
/// used for bias correction. Weight decay is decoupled: it shrinks the
/// weights directly instead of entering the gradient.
void adamw_update(std::span<double> param, std::span<const double> grad, AdamWMoments& moments,
                  std::size_t step, double lr, double weight_decay, const AdamWOptions& options = {});

/// AdamW over a fixed list of parameter tensors. Tensors without a gradient
/// are treated as having a zero gradient.
class AdamW {
public:
    explicit AdamW(std::vector<Tensor> params, AdamWOptions options = {});

    void step(double lr, double weight_decay);
    void zero_grad();
    std::size_t steps() const noexcept { return steps_; }

private:
    std::vector<Tensor> params_;
    std::vector<AdamWMoments> moments_;
    AdamWOptions options_;
    std::size_t steps_ = 0;
};

/// Linear warm-up from 0 to lr_max over `warmup` steps, then cosine decay to
/// 0 at `total`.
double cosine_warmup_lr(std::size_t step, std::size_t total, std::size_t warmup, double lr_max);

}  // namespace cbdes
