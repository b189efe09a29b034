// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cbdes/ops.hpp"
#include "cbdes/tensor.hpp"

namespace cbdes {

enum class Mode { Train, Eval };

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// Learnable parameters and persistent buffers of a component, in
/// registration order. Names are unique within a set.
class ParameterSet {
public:
    Tensor add_parameter(const std::string& name, Tensor value);
    Tensor add_buffer(const std::string& name, Tensor value);

    const std::vector<NamedTensor>& parameters() const noexcept { return parameters_; }
    const std::vector<NamedTensor>& buffers() const noexcept { return buffers_; }
    std::size_t parameter_count() const;

    /// Adds every entry of `other` with `prefix` prepended to its name.
    void append(const ParameterSet& other, const std::string& prefix);

private:
    void claim(const std::string& name);

    std::vector<NamedTensor> parameters_;
    std::vector<NamedTensor> buffers_;
    std::vector<std::string> names_;
};

/// splitmix64 finalizer; derives independent seeds for sub-components.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) noexcept;

/// Deterministic weight initialization.
class Initializer {
public:
    explicit Initializer(std::uint64_t seed) : engine_(seed) {}

    Tensor he_normal(Shape shape, std::size_t fan_in);
    Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out);

private:
    std::mt19937_64 engine_;
};

struct Conv2d {
    Tensor weight, bias;
    std::size_t stride = 1, padding = 0, groups = 1;

    Conv2d() = default;
    Conv2d(ParameterSet& params, const std::string& name, Initializer& init, std::size_t in_channels,
           std::size_t out_channels, std::size_t kernel, std::size_t stride, std::size_t padding,
           std::size_t groups = 1);
    Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding, groups); }
};

struct Linear {
    Tensor weight, bias;

    Linear() = default;
    Linear(ParameterSet& params, const std::string& name, Initializer& init, std::size_t in_features,
           std::size_t out_features);
    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

struct BatchNorm {
    Tensor gamma, beta;
    RunningStats stats{1};

    BatchNorm() = default;
    BatchNorm(ParameterSet& params, const std::string& name, std::size_t channels);
    Tensor operator()(const Tensor& x, Mode mode) {
        return channel_norm(x, gamma, beta, stats, mode == Mode::Train);
    }
};

struct LayerNorm {
    Tensor gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParameterSet& params, const std::string& name, std::size_t features);
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

struct PReLU {
    Tensor alpha;

    PReLU() = default;
    /// channels == 1 gives a single shared slope.
    PReLU(ParameterSet& params, const std::string& name, std::size_t channels);
    Tensor operator()(const Tensor& x) const { return prelu(x, alpha); }
};

struct Attention {
    AttentionWeights weights;
    std::size_t heads = 1;

    Attention() = default;
    Attention(ParameterSet& params, const std::string& name, Initializer& init, std::size_t dim,
              std::size_t heads);
    Tensor operator()(const Tensor& tokens) const { return multi_head_attention(tokens, weights, heads); }
    Tensor operator()(const Tensor& queries, const Tensor& keys_values) const {
        return multi_head_attention(queries, keys_values, weights, heads);
    }
};

/// [B,C,H,W] -> [B,H*W,C], tokens in row-major spatial order.
Tensor to_tokens(const Tensor& feature_map);
/// [B,H*W,C] -> [B,C,H,W]
Tensor from_tokens(const Tensor& tokens, std::size_t height, std::size_t width);

}  // namespace cbdes
