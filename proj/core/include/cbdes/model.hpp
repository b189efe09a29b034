// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "cbdes/experts.hpp"
#include "cbdes/layers.hpp"
#include "cbdes/moe.hpp"
#include "cbdes/router.hpp"

namespace cbdes {

struct ModelConfig {
    std::size_t num_experts = 4;
    /// When set, the model is a single-expert baseline without a router.
    std::optional<ExpertKind> single_expert;
    std::size_t in_channels = 3;
    std::size_t out_channels = ExpertBundle::kDefaultOutChannels;
    std::size_t expert_width = 1;
    std::size_t d_emb = 128;
    std::size_t heads = 4;
    std::size_t mlp_hidden = 64;
    std::size_t num_classes = 10;
    bool zero_router_output = false;

    SarConfig router_config() const;
};

/// Expert pool + self-attention router + classification head (global
/// average pool of the fused features, then one linear layer).
class MoeModel {
public:
    MoeModel(const ModelConfig& config, std::uint64_t seed);

    MoeModel(MoeModel&&) = default;
    MoeModel& operator=(MoeModel&&) = default;
    MoeModel(const MoeModel&) = delete;
    MoeModel& operator=(const MoeModel&) = delete;

    struct Output {
        Tensor logits;
        std::optional<RoutingMatrix> routing;
        /// Expert evaluated first for each image: argmax of the routing row
        /// (or 0 for a single-expert model).
        std::vector<std::size_t> top1;
        std::size_t expert_forwards = 0;
    };

    /// SoftAll evaluates every expert and fuses them; TopK runs sparse
    /// inference and is only meaningful in eval mode.
    Output forward(const Tensor& images, FusionMode fusion, Mode mode);

    const ModelConfig& config() const noexcept { return config_; }
    ExpertBundle& experts() noexcept { return experts_; }
    const ExpertBundle& experts() const noexcept { return experts_; }
    bool has_router() const noexcept { return router_.has_value(); }
    SelfAttentionRouter& router() { return router_.value(); }

    /// All parameters and buffers, prefixed "experts.", "router.", "head.".
    const ParameterSet& parameters() const noexcept { return all_; }
    std::vector<Tensor> trainable() const;

private:
    ModelConfig config_;
    ExpertBundle experts_;
    std::optional<SelfAttentionRouter> router_;
    ParameterSet head_params_;
    Linear head_;
    ParameterSet all_;
};

}  // namespace cbdes
