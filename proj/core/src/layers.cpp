// SPDX-License-Identifier: Apache-2.0
#include "cbdes/layers.hpp"

#include <algorithm>
#include <cmath>

namespace cbdes {

void ParameterSet::claim(const std::string& name) {
    if (std::find(names_.begin(), names_.end(), name) != names_.end())
        throw ConfigError("duplicate parameter name: " + name);
    names_.push_back(name);
}

Tensor ParameterSet::add_parameter(const std::string& name, Tensor value) {
    claim(name);
    value.set_requires_grad(true);
    parameters_.push_back({name, value});
    return value;
}

Tensor ParameterSet::add_buffer(const std::string& name, Tensor value) {
    claim(name);
    buffers_.push_back({name, value});
    return value;
}

std::size_t ParameterSet::parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : parameters_) total += p.tensor.size();
    return total;
}

void ParameterSet::append(const ParameterSet& other, const std::string& prefix) {
    for (const auto& p : other.parameters_) {
        claim(prefix + p.name);
        parameters_.push_back({prefix + p.name, p.tensor});
    }
    for (const auto& b : other.buffers_) {
        claim(prefix + b.name);
        buffers_.push_back({prefix + b.name, b.tensor});
    }
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Tensor Initializer::he_normal(Shape shape, std::size_t fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = dist(engine_);
    return t;
}

Tensor Initializer::xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = dist(engine_);
    return t;
}

Conv2d::Conv2d(ParameterSet& params, const std::string& name, Initializer& init, std::size_t in_channels,
               std::size_t out_channels, std::size_t kernel, std::size_t stride_, std::size_t padding_,
               std::size_t groups_)
    : stride(stride_), padding(padding_), groups(groups_) {
    const std::size_t fan_in = in_channels / groups * kernel * kernel;
    weight = params.add_parameter(name + ".weight",
                                  init.he_normal({out_channels, in_channels / groups, kernel, kernel}, fan_in));
    bias = params.add_parameter(name + ".bias", Tensor({out_channels}, 0.0));
}

Linear::Linear(ParameterSet& params, const std::string& name, Initializer& init, std::size_t in_features,
               std::size_t out_features) {
    weight = params.add_parameter(name + ".weight",
                                  init.xavier_uniform({out_features, in_features}, in_features, out_features));
    bias = params.add_parameter(name + ".bias", Tensor({out_features}, 0.0));
}

BatchNorm::BatchNorm(ParameterSet& params, const std::string& name, std::size_t channels)
    : stats(channels) {
    gamma = params.add_parameter(name + ".gamma", Tensor({channels}, 1.0));
    beta = params.add_parameter(name + ".beta", Tensor({channels}, 0.0));
    params.add_buffer(name + ".running_mean", stats.mean);
    params.add_buffer(name + ".running_var", stats.var);
}

LayerNorm::LayerNorm(ParameterSet& params, const std::string& name, std::size_t features) {
    gamma = params.add_parameter(name + ".gamma", Tensor({features}, 1.0));
    beta = params.add_parameter(name + ".beta", Tensor({features}, 0.0));
}

PReLU::PReLU(ParameterSet& params, const std::string& name, std::size_t channels) {
    alpha = params.add_parameter(name + ".alpha", Tensor({channels}, 0.25));
}

Attention::Attention(ParameterSet& params, const std::string& name, Initializer& init, std::size_t dim,
                     std::size_t heads_)
    : heads(heads_) {
    if (heads == 0 || dim % heads != 0)
        throw ConfigError("attention: dim " + std::to_string(dim) + " not divisible by " +
                          std::to_string(heads) + " heads");
    auto proj = [&](const char* tag, Tensor& w, Tensor& b) {
        w = params.add_parameter(name + "." + tag + ".weight", init.xavier_uniform({dim, dim}, dim, dim));
        b = params.add_parameter(name + "." + tag + ".bias", Tensor({dim}, 0.0));
    };
    proj("q", weights.wq, weights.bq);
    proj("k", weights.wk, weights.bk);
    proj("v", weights.wv, weights.bv);
    proj("o", weights.wo, weights.bo);
}

Tensor to_tokens(const Tensor& feature_map) {
    require_rank(feature_map, 4, "to_tokens");
    const auto& s = feature_map.shape();
    return reshape(permute(feature_map, {0, 2, 3, 1}), {s[0], s[2] * s[3], s[1]});
}

Tensor from_tokens(const Tensor& tokens, std::size_t height, std::size_t width) {
    require_rank(tokens, 3, "from_tokens");
    if (tokens.dim(1) != height * width)
        throw DimensionError("from_tokens: token count does not match " + std::to_string(height) + "x" +
                             std::to_string(width));
    return permute(reshape(tokens, {tokens.dim(0), height, width, tokens.dim(2)}), {0, 3, 1, 2});
}

}  // namespace cbdes
