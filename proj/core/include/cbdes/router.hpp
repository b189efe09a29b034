// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "cbdes/layers.hpp"
#include "cbdes/tensor.hpp"

namespace cbdes {

struct SarConfig {
    std::size_t in_channels = 3;
    std::size_t d_emb = 128;
    std::size_t heads = 4;
    std::size_t num_experts = 4;
    std::size_t c1 = 32;
    std::size_t c2 = 64;
    std::size_t mlp_hidden = 64;

    /// Throws ConfigError unless d_emb % heads == 0, K >= 2 and
    /// c1 < c2 <= d_emb.
    void validate() const;
};

/// B x K matrix of per-image expert probabilities; each row sums to one.
///
/// Holds the differentiable tensor so that losses computed from it reach
/// the router parameters.
class RoutingMatrix {
public:
    inline static constexpr double kRowTolerance = 1e-9;

    /// Validates shape [B,K] and row-stochasticity.
    explicit RoutingMatrix(Tensor probabilities);

    /// One-hot rows on the given experts; no gradient.
    static RoutingMatrix one_hot(const std::vector<std::size_t>& experts, std::size_t num_experts);

    const Tensor& tensor() const noexcept { return probs_; }
    std::size_t rows() const { return probs_.dim(0); }
    std::size_t experts() const { return probs_.dim(1); }
    double operator()(std::size_t row, std::size_t expert) const {
        return probs_.data()[row * experts() + expert];
    }
    std::vector<double> row(std::size_t r) const;

    /// Index of the largest entry of each row; ties go to the lowest index.
    std::vector<std::size_t> argmax() const;

private:
    Tensor probs_;
};

/// Self-attention router: conv pyramid, one multi-head self-attention layer
/// with post-norm, token mean, 3-layer PReLU MLP, softmax.
class SelfAttentionRouter {
public:
    SelfAttentionRouter(SarConfig config, std::uint64_t seed);

    const SarConfig& config() const noexcept { return config_; }
    const ParameterSet& parameters() const noexcept { return params_; }
    std::size_t parameter_count() const { return params_.parameter_count(); }

    /// [B,C,H,W] -> [B,d_emb,H/8,W/8]
    Tensor extract_pyramid(const Tensor& image, Mode mode);
    /// [B,d_emb,H',W'] -> [B,d_emb] global descriptor.
    Tensor attend_and_pool(const Tensor& features) const;
    /// [B,d_emb] -> [B,K] expert logits.
    Tensor score_experts(const Tensor& descriptor) const;
    RoutingMatrix route(const Tensor& image, Mode mode);

    /// Zeroes the last MLP layer so that every image routes uniformly.
    void zero_output_layer();

    // Exposed for compositional checks.
    const Attention& attention() const noexcept { return attention_; }
    const LayerNorm& token_norm() const noexcept { return token_norm_; }
    const Linear& mlp_layer(std::size_t i) const { return mlp_.at(i); }
    const PReLU& mlp_activation(std::size_t i) const { return mlp_act_.at(i); }

private:
    struct ConvModule {
        Conv2d conv;
        BatchNorm norm;
        PReLU act;
    };

    SarConfig config_;
    ParameterSet params_;
    std::vector<ConvModule> pyramid_;
    Attention attention_;
    LayerNorm token_norm_;
    std::vector<Linear> mlp_;
    std::vector<PReLU> mlp_act_;
};

}  // namespace cbdes
