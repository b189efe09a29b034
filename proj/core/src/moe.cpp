// SPDX-License-Identifier: Apache-2.0
#include "cbdes/moe.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace cbdes {

FusionMode FusionMode::top_k(std::size_t k) {
    if (k == 0) throw ConfigError("top-k fusion needs k >= 1");
    return FusionMode(Kind::TopK, k);
}

Tensor fuse_soft(std::span<const Tensor> outputs, const RoutingMatrix& routing) {
    if (outputs.empty()) throw DimensionError("fuse_soft: no expert outputs");
    const std::size_t k = outputs.size();
    if (routing.experts() != k)
        throw DimensionError("fuse_soft: routing has " + std::to_string(routing.experts()) + " columns for " +
                             std::to_string(k) + " experts");
    const Shape& shape = outputs[0].shape();
    for (const auto& o : outputs)
        if (o.shape() != shape) throw DimensionError("fuse_soft: expert outputs differ in shape");
    const std::size_t batch = shape[0];
    if (routing.rows() != batch)
        throw DimensionError("fuse_soft: routing has " + std::to_string(routing.rows()) + " rows for batch " +
                             std::to_string(batch));
    const std::size_t per_image = outputs[0].size() / batch;
    const Tensor& probs = routing.tensor();
    const auto p = probs.data();

    std::vector<double> out(outputs[0].size(), 0.0);
    for (std::size_t e = 0; e < k; ++e) {
        const auto f = outputs[e].data();
        for (std::size_t b = 0; b < batch; ++b) {
            const double w = p[b * k + e];
            const std::size_t base = b * per_image;
            for (std::size_t i = 0; i < per_image; ++i) out[base + i] += w * f[base + i];
        }
    }

    std::vector<Tensor> inputs(outputs.begin(), outputs.end());
    inputs.push_back(probs);
    return make_result(shape, std::move(out), inputs,
                       [inputs, k, batch, per_image](std::span<const double>, std::span<const double> gy) {
                           const Tensor& probs = inputs.back();
                           const auto p = probs.data();
                           auto gp = grad_sink(probs);
                           for (std::size_t e = 0; e < k; ++e) {
                               auto gf = grad_sink(inputs[e]);
                               const auto f = inputs[e].data();
                               for (std::size_t b = 0; b < batch; ++b) {
                                   const double w = p[b * k + e];
                                   const std::size_t base = b * per_image;
                                   double dot = 0.0;
                                   for (std::size_t i = 0; i < per_image; ++i) {
                                       if (!gf.empty()) gf[base + i] += w * gy[base + i];
                                       dot += gy[base + i] * f[base + i];
                                   }
                                   if (!gp.empty()) gp[b * k + e] += dot;
                               }
                           }
                       });
}

std::vector<std::size_t> top_k_experts(std::span<const double> row, std::size_t k) {
    if (k == 0 || k > row.size())
        throw std::out_of_range("top-k: k=" + std::to_string(k) + " outside [1," + std::to_string(row.size()) +
                                "]");
    std::vector<std::size_t> order(row.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    order.resize(k);
    return order;
}

namespace {

Tensor gather_images(const Tensor& batch, const std::vector<std::size_t>& rows) {
    const std::size_t per_image = batch.size() / batch.dim(0);
    Shape shape = batch.shape();
    shape[0] = rows.size();
    std::vector<double> out(rows.size() * per_image);
    const auto src = batch.data();
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(src.begin() + static_cast<long>(rows[i] * per_image), per_image,
                    out.begin() + static_cast<long>(i * per_image));
    return Tensor(std::move(shape), std::move(out));
}

}  // namespace

SparseInference infer_sparse(ExpertBundle& bundle, const RoutingMatrix& routing, const Tensor& image,
                             std::size_t k) {
    const std::size_t num_experts = bundle.size();
    if (k == 0 || k > num_experts)
        throw std::out_of_range("infer_sparse: k=" + std::to_string(k) + " outside [1," +
                                std::to_string(num_experts) + "]");
    require_rank(image, 4, "infer_sparse input");
    const std::size_t batch = image.dim(0);
    if (routing.rows() != batch || routing.experts() != num_experts)
        throw DimensionError("infer_sparse: routing matrix does not match batch/expert count");

    NoGradGuard no_grad;
    SparseInference result{Tensor(), {}, routing, 0};
    result.selected.resize(batch);
    std::vector<std::vector<std::size_t>> images_of(num_experts);
    for (std::size_t b = 0; b < batch; ++b) {
        result.selected[b] = top_k_experts(routing.row(b), k);
        for (auto e : result.selected[b]) images_of[e].push_back(b);
    }

    // Expert outputs keyed by (expert, image); each selected expert runs once
    // on the sub-batch of images that chose it.
    ForwardStats stats;
    std::vector<Tensor> expert_out(num_experts);
    std::vector<std::vector<std::size_t>> slot(num_experts, std::vector<std::size_t>(batch, 0));
    for (std::size_t e = 0; e < num_experts; ++e) {
        if (images_of[e].empty()) continue;
        expert_out[e] = bundle.forward(e, gather_images(image, images_of[e]), Mode::Eval, &stats);
        for (std::size_t i = 0; i < images_of[e].size(); ++i) slot[e][images_of[e][i]] = i;
    }
    result.expert_forwards = stats.expert_forwards;

    Shape out_shape;
    for (const auto& t : expert_out)
        if (t.defined()) out_shape = t.shape();
    out_shape[0] = batch;
    const std::size_t per_image = numel(out_shape) / batch;
    std::vector<double> out(numel(out_shape), 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        const auto& chosen = result.selected[b];
        double* dst = out.data() + b * per_image;
        if (k == 1) {
            const std::size_t e = chosen[0];
            const auto src = expert_out[e].data().subspan(slot[e][b] * per_image, per_image);
            std::copy(src.begin(), src.end(), dst);
            continue;
        }
        double mass = 0.0;
        for (auto e : chosen) mass += routing(b, e);
        for (auto e : chosen) {
            const double w = routing(b, e) / mass;
            const auto src = expert_out[e].data().subspan(slot[e][b] * per_image, per_image);
            for (std::size_t i = 0; i < per_image; ++i) dst[i] += w * src[i];
        }
    }
    result.output = Tensor(std::move(out_shape), std::move(out));
    return result;
}

SparseInference infer_sparse(ExpertBundle& bundle, SelfAttentionRouter& router, const Tensor& image,
                             std::size_t k) {
    NoGradGuard no_grad;
    return infer_sparse(bundle, router.route(image, Mode::Eval), image, k);
}

ExpertUsage expert_usage(const RoutingMatrix& routing) {
    const std::size_t n = routing.rows(), k = routing.experts();
    ExpertUsage usage{std::vector<double>(k, 0.0), std::vector<double>(k, 0.0)};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) usage.load[j] += routing(i, j);
    for (std::size_t j = 0; j < k; ++j) usage.mean_activation[j] = usage.load[j] / static_cast<double>(n);
    return usage;
}

Tensor load_balance_loss(const RoutingMatrix& routing) {
    const std::size_t n = routing.rows(), k = routing.experts();
    if (n == 0) throw DimensionError("load_balance_loss: empty routing matrix");
    const auto usage = expert_usage(routing);
    double loss = 0.0;
    for (std::size_t j = 0; j < k; ++j) loss += usage.mean_activation[j] * usage.load[j];
    const Tensor& probs = routing.tensor();
    return make_result({1}, {loss}, {probs},
                       [probs, n, k, usage](std::span<const double>, std::span<const double> gy) {
                           // d/dP_ij of sum_j pbar_j * l_j = l_j / N + pbar_j
                           auto gp = grad_sink(probs);
                           for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < k; ++j)
                                   gp[i * k + j] +=
                                       gy[0] * (usage.load[j] / static_cast<double>(n) + usage.mean_activation[j]);
                       });
}

LossReport total_loss(double task_loss, const RoutingMatrix& routing, double lambda) {
    if (!(lambda >= 0.0)) throw ConfigError("balance weight lambda must be non-negative");
    LossReport report;
    report.task_loss = task_loss;
    {
        NoGradGuard no_grad;
        report.balance_loss = load_balance_loss(routing).item();
    }
    report.lambda = lambda;
    report.total = task_loss + lambda * report.balance_loss;
    auto usage = expert_usage(routing);
    report.expert_mean_activation = std::move(usage.mean_activation);
    report.expert_load = std::move(usage.load);
    report.selection_counts.assign(routing.experts(), 0);
    for (auto e : routing.argmax()) ++report.selection_counts[e];
    return report;
}

}  // namespace cbdes
