// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cbdes/experts.hpp"
#include "cbdes/router.hpp"
#include "cbdes/tensor.hpp"

namespace cbdes {

/// How expert outputs are combined: all experts under soft weights, or only
/// the k most probable experts per image.
class FusionMode {
public:
    enum class Kind { SoftAll, TopK };

    static FusionMode soft_all() noexcept { return FusionMode(Kind::SoftAll, 0); }
    static FusionMode top_k(std::size_t k);

    Kind kind() const noexcept { return kind_; }
    /// Number of experts evaluated per image; `num_experts` for SoftAll.
    std::size_t k(std::size_t num_experts) const noexcept { return kind_ == Kind::SoftAll ? num_experts : k_; }

    friend bool operator==(const FusionMode&, const FusionMode&) = default;

private:
    FusionMode(Kind kind, std::size_t k) : kind_(kind), k_(k) {}
    Kind kind_;
    std::size_t k_;
};

/// F[b] = sum_k P[b,k] * F_k[b], each image's scalar weights broadcast over
/// channels and space. Differentiable in the outputs and in P.
Tensor fuse_soft(std::span<const Tensor> outputs, const RoutingMatrix& routing);

struct SparseInference {
    Tensor output;
    /// Experts evaluated for each image, most probable first.
    std::vector<std::vector<std::size_t>> selected;
    RoutingMatrix routing;
    std::size_t expert_forwards = 0;
};

/// Evaluates only the top-k experts of each image under `routing` (ties go
/// to the lowest index). k = 1 returns the selected expert's raw output;
/// k > 1 renormalizes the selected probabilities and fuses.
SparseInference infer_sparse(ExpertBundle& bundle, const RoutingMatrix& routing, const Tensor& image,
                             std::size_t k);
/// Routes with `router` in eval mode, then as above.
SparseInference infer_sparse(ExpertBundle& bundle, SelfAttentionRouter& router, const Tensor& image,
                             std::size_t k);

/// Top-k expert indices of one probability row, most probable first, ties to
/// the lowest index.
std::vector<std::size_t> top_k_experts(std::span<const double> row, std::size_t k);

/// Expert mean activation and per-expert routing load of a routing matrix.
struct ExpertUsage {
    std::vector<double> mean_activation;  // (1/N) sum_i P_i
    std::vector<double> load;             // sum_i P_i
};

ExpertUsage expert_usage(const RoutingMatrix& routing);

/// sum_j mean_activation_j * load_j, as a differentiable scalar.
Tensor load_balance_loss(const RoutingMatrix& routing);

inline constexpr double kDefaultBalanceWeight = 0.01;

struct LossReport {
    double task_loss = 0.0;
    double balance_loss = 0.0;
    double total = 0.0;
    double lambda = kDefaultBalanceWeight;
    std::vector<double> expert_mean_activation;
    std::vector<double> expert_load;
    std::vector<std::size_t> selection_counts;
};

/// total = task + lambda * balance, with usage statistics and top-1
/// selection counts of `routing`.
LossReport total_loss(double task_loss, const RoutingMatrix& routing, double lambda = kDefaultBalanceWeight);

}  // namespace cbdes
