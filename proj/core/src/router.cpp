// SPDX-License-Identifier: Apache-2.0
#include "cbdes/router.hpp"

#include <cmath>
#include <string>

namespace cbdes {

void SarConfig::validate() const {
    if (in_channels == 0) throw ConfigError("router: in_channels must be positive");
    if (heads == 0 || d_emb % heads != 0)
        throw ConfigError("router: d_emb " + std::to_string(d_emb) + " not divisible by " +
                          std::to_string(heads) + " heads");
    if (num_experts < 2) throw ConfigError("router: needs at least 2 experts");
    if (!(c1 < c2 && c2 <= d_emb))
        throw ConfigError("router: channel progression must satisfy c1 < c2 <= d_emb");
    if (mlp_hidden == 0) throw ConfigError("router: mlp_hidden must be positive");
}

RoutingMatrix::RoutingMatrix(Tensor probabilities) : probs_(std::move(probabilities)) {
    require_rank(probs_, 2, "routing matrix");
    const std::size_t k = probs_.dim(1);
    const auto p = probs_.data();
    for (std::size_t r = 0; r < probs_.dim(0); ++r) {
        double total = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            const double v = p[r * k + j];
            if (!(v >= 0.0 && v <= 1.0)) throw DimensionError("routing matrix entry outside [0,1]");
            total += v;
        }
        if (std::abs(total - 1.0) > kRowTolerance)
            throw DimensionError("routing matrix row " + std::to_string(r) + " sums to " + std::to_string(total));
    }
}

RoutingMatrix RoutingMatrix::one_hot(const std::vector<std::size_t>& experts, std::size_t num_experts) {
    Tensor p({experts.size(), num_experts}, 0.0);
    for (std::size_t r = 0; r < experts.size(); ++r) {
        if (experts[r] >= num_experts) throw std::out_of_range("one_hot: expert index out of range");
        p.data()[r * num_experts + experts[r]] = 1.0;
    }
    return RoutingMatrix(p);
}

std::vector<double> RoutingMatrix::row(std::size_t r) const {
    const auto p = probs_.data();
    return {p.begin() + static_cast<long>(r * experts()), p.begin() + static_cast<long>((r + 1) * experts())};
}

std::vector<std::size_t> RoutingMatrix::argmax() const {
    std::vector<std::size_t> out(rows());
    for (std::size_t r = 0; r < rows(); ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < experts(); ++j)
            if ((*this)(r, j) > (*this)(r, best)) best = j;
        out[r] = best;
    }
    return out;
}

SelfAttentionRouter::SelfAttentionRouter(SarConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Initializer init(seed);
    const std::size_t channels[4] = {config_.in_channels, config_.c1, config_.c2, config_.d_emb};
    for (int s = 0; s < 3; ++s) {
        const std::string name = "pyramid" + std::to_string(s);
        pyramid_.push_back({Conv2d(params_, name + ".conv", init, channels[s], channels[s + 1], 3, 1, 1),
                            BatchNorm(params_, name + ".bn", channels[s + 1]),
                            PReLU(params_, name + ".act", channels[s + 1])});
    }
    attention_ = Attention(params_, "attention", init, config_.d_emb, config_.heads);
    token_norm_ = LayerNorm(params_, "token_norm", config_.d_emb);
    const std::size_t widths[4] = {config_.d_emb, config_.mlp_hidden, config_.mlp_hidden, config_.num_experts};
    for (int i = 0; i < 3; ++i) {
        const std::string name = "mlp" + std::to_string(i);
        mlp_.emplace_back(params_, name, init, widths[i], widths[i + 1]);
        if (i < 2) mlp_act_.emplace_back(params_, name + ".act", 1);
    }
}

Tensor SelfAttentionRouter::extract_pyramid(const Tensor& image, Mode mode) {
    require_rank(image, 4, "router input");
    if (image.dim(1) != config_.in_channels)
        throw DimensionError("router input has " + std::to_string(image.dim(1)) + " channels, expected " +
                             std::to_string(config_.in_channels));
    if (image.dim(2) % 8 != 0 || image.dim(3) % 8 != 0)
        throw DimensionError("router input spatial dims must be divisible by 8, got " + to_string(image.shape()));
    Tensor x = image;
    for (auto& stage : pyramid_) x = maxpool2x2(stage.act(stage.norm(stage.conv(x), mode)));
    return x;
}

Tensor SelfAttentionRouter::attend_and_pool(const Tensor& features) const {
    require_rank(features, 4, "attend_and_pool input");
    if (features.dim(1) != config_.d_emb)
        throw DimensionError("attend_and_pool: expected " + std::to_string(config_.d_emb) + " channels");
    auto tokens = to_tokens(features);
    return mean_tokens(token_norm_(attention_(tokens)));
}

Tensor SelfAttentionRouter::score_experts(const Tensor& descriptor) const {
    auto h = mlp_act_[0](mlp_[0](descriptor));
    h = mlp_act_[1](mlp_[1](h));
    return mlp_[2](h);
}

RoutingMatrix SelfAttentionRouter::route(const Tensor& image, Mode mode) {
    return RoutingMatrix(softmax(score_experts(attend_and_pool(extract_pyramid(image, mode)))));
}

void SelfAttentionRouter::zero_output_layer() {
    for (auto& v : mlp_[2].weight.data()) v = 0.0;
    for (auto& v : mlp_[2].bias.data()) v = 0.0;
}

}  // namespace cbdes
