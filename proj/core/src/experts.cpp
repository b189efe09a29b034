// SPDX-License-Identifier: Apache-2.0
#include "cbdes/experts.hpp"

#include <string>

namespace cbdes {

std::string_view expert_kind_name(ExpertKind kind) {
    switch (kind) {
        case ExpertKind::WindowedAttention: return "windowed_attention";
        case ExpertKind::ResidualConv: return "residual_conv";
        case ExpertKind::ModernConv: return "modern_conv";
        case ExpertKind::PyramidAttention: return "pyramid_attention";
    }
    throw ConfigError("unknown expert kind");
}

ExpertKind expert_kind_from_id(int id) {
    if (id < 0 || id > 3) throw ConfigError("unknown expert kind id " + std::to_string(id));
    return static_cast<ExpertKind>(id);
}

std::optional<ExpertKind> parse_expert_kind(std::string_view name) {
    for (auto kind : kAllExpertKinds)
        if (expert_kind_name(kind) == name) return kind;
    return std::nullopt;
}

namespace {

// Channels-last helpers; feature maps inside attention experts are [B,H,W,C].

Tensor nchw_to_nhwc(const Tensor& x) { return permute(x, {0, 2, 3, 1}); }
Tensor nhwc_to_nchw(const Tensor& x) { return permute(x, {0, 3, 1, 2}); }

// [B,H,W,C] -> [B*(H/2)*(W/2), 4, C]
Tensor window_partition(const Tensor& x) {
    const auto& s = x.shape();
    const std::size_t b = s[0], h = s[1], w = s[2], c = s[3];
    auto t = permute(reshape(x, {b, h / 2, 2, w / 2, 2, c}), {0, 1, 3, 2, 4, 5});
    return reshape(t, {b * (h / 2) * (w / 2), 4, c});
}

Tensor window_reverse(const Tensor& windows, std::size_t b, std::size_t h, std::size_t w) {
    const std::size_t c = windows.dim(2);
    auto t = permute(reshape(windows, {b, h / 2, w / 2, 2, 2, c}), {0, 1, 3, 2, 4, 5});
    return reshape(t, {b, h, w, c});
}

// 2x2 neighbourhoods concatenated along channels: [B,H,W,C] -> [B,H/2,W/2,4C]
Tensor space_to_depth(const Tensor& x) {
    const auto& s = x.shape();
    const std::size_t b = s[0], h = s[1], w = s[2], c = s[3];
    auto t = permute(reshape(x, {b, h / 2, 2, w / 2, 2, c}), {0, 1, 3, 2, 4, 5});
    return reshape(t, {b, h / 2, w / 2, 4 * c});
}

struct TokenMlp {
    Linear fc1, fc2;

    TokenMlp() = default;
    TokenMlp(ParameterSet& p, const std::string& name, Initializer& init, std::size_t dim, std::size_t ratio)
        : fc1(p, name + ".fc1", init, dim, dim * ratio), fc2(p, name + ".fc2", init, dim * ratio, dim) {}
    Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
};

// Swin-style: conv patch embedding, attention restricted to non-overlapping
// 2x2 windows, patch merging between stages.
class WindowedAttentionExpert final : public Expert {
public:
    WindowedAttentionExpert(std::size_t in_channels, std::uint64_t seed, std::size_t width)
        : Expert(in_channels) {
        Initializer init(seed);
        const std::size_t dims[3] = {24 * width, 48 * width, 96 * width};
        const std::size_t heads[3] = {2, 4, 4};
        stem_ = Conv2d(params_, "stem", init, in_channels, dims[0], 3, 2, 1);
        stem_norm_ = LayerNorm(params_, "stem_norm", dims[0]);
        for (int s = 0; s < 3; ++s) {
            const std::string name = "stage" + std::to_string(s);
            auto& st = stages_[s];
            if (s > 0) {
                st.merge_norm = LayerNorm(params_, name + ".merge_norm", 4 * dims[s - 1]);
                st.merge = Linear(params_, name + ".merge", init, 4 * dims[s - 1], dims[s]);
            }
            st.norm1 = LayerNorm(params_, name + ".norm1", dims[s]);
            st.attn = Attention(params_, name + ".attn", init, dims[s], heads[s]);
            st.norm2 = LayerNorm(params_, name + ".norm2", dims[s]);
            st.mlp = TokenMlp(params_, name + ".mlp", init, dims[s], 2);
        }
        out_channels_ = dims[2];
    }

    ExpertKind kind() const noexcept override { return ExpertKind::WindowedAttention; }
    std::size_t out_channels() const noexcept override { return out_channels_; }

    Tensor run(const Tensor& image, Mode) override {
        auto x = stem_norm_(nchw_to_nhwc(stem_(image)));
        for (int s = 0; s < 3; ++s) {
            auto& st = stages_[s];
            if (s > 0) x = st.merge(st.merge_norm(space_to_depth(x)));
            const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
            auto normed = st.norm1(x);
            Tensor mixed;
            if (h % 2 == 0 && w % 2 == 0) {
                mixed = window_reverse(st.attn(window_partition(normed)), b, h, w);
            } else {
                // Too small to tile: one window covering the whole map.
                mixed = reshape(st.attn(reshape(normed, {b, h * w, c})), {b, h, w, c});
            }
            x = add(x, mixed);
            x = add(x, st.mlp(st.norm2(x)));
        }
        return nhwc_to_nchw(x);
    }

private:
    struct Stage {
        LayerNorm merge_norm;
        Linear merge;
        LayerNorm norm1, norm2;
        Attention attn;
        TokenMlp mlp;
    };
    Conv2d stem_;
    LayerNorm stem_norm_;
    Stage stages_[3];
    std::size_t out_channels_ = 0;
};

// ResNet-style: 3x3 conv basic blocks with additive (projected) skips.
class ResidualConvExpert final : public Expert {
public:
    ResidualConvExpert(std::size_t in_channels, std::uint64_t seed, std::size_t width)
        : Expert(in_channels) {
        Initializer init(seed);
        const std::size_t stem = 16 * width;
        const std::size_t dims[3] = {24 * width, 48 * width, 64 * width};
        stem_ = Conv2d(params_, "stem", init, in_channels, stem, 3, 1, 1);
        stem_bn_ = BatchNorm(params_, "stem_bn", stem);
        stem_act_ = PReLU(params_, "stem_act", stem);
        std::size_t prev = stem;
        for (int s = 0; s < 3; ++s) {
            const std::string name = "block" + std::to_string(s);
            auto& b = blocks_[s];
            b.conv1 = Conv2d(params_, name + ".conv1", init, prev, dims[s], 3, 2, 1);
            b.bn1 = BatchNorm(params_, name + ".bn1", dims[s]);
            b.act1 = PReLU(params_, name + ".act1", dims[s]);
            b.conv2 = Conv2d(params_, name + ".conv2", init, dims[s], dims[s], 3, 1, 1);
            b.bn2 = BatchNorm(params_, name + ".bn2", dims[s]);
            b.skip = Conv2d(params_, name + ".skip", init, prev, dims[s], 1, 2, 0);
            b.skip_bn = BatchNorm(params_, name + ".skip_bn", dims[s]);
            b.act2 = PReLU(params_, name + ".act2", dims[s]);
            prev = dims[s];
        }
        out_channels_ = prev;
    }

    ExpertKind kind() const noexcept override { return ExpertKind::ResidualConv; }
    std::size_t out_channels() const noexcept override { return out_channels_; }

    Tensor run(const Tensor& image, Mode mode) override {
        auto x = stem_act_(stem_bn_(stem_(image), mode));
        for (auto& b : blocks_) {
            auto main = b.bn2(b.conv2(b.act1(b.bn1(b.conv1(x), mode))), mode);
            auto shortcut = b.skip_bn(b.skip(x), mode);
            x = b.act2(add(main, shortcut));
        }
        return x;
    }

private:
    struct Block {
        Conv2d conv1, conv2, skip;
        BatchNorm bn1, bn2, skip_bn;
        PReLU act1, act2;
    };
    Conv2d stem_;
    BatchNorm stem_bn_;
    PReLU stem_act_;
    Block blocks_[3];
    std::size_t out_channels_ = 0;
};

// ConvNeXt-style: depthwise 3x3, channel layer norm, inverted-bottleneck
// pointwise MLP with GELU, residual; strided conv downsampling.
class ModernConvExpert final : public Expert {
public:
    ModernConvExpert(std::size_t in_channels, std::uint64_t seed, std::size_t width)
        : Expert(in_channels) {
        Initializer init(seed);
        const std::size_t dims[3] = {32 * width, 48 * width, 80 * width};
        std::size_t prev = in_channels;
        for (int s = 0; s < 3; ++s) {
            const std::string name = "stage" + std::to_string(s);
            auto& st = stages_[s];
            if (s > 0) st.down_norm = LayerNorm(params_, name + ".down_norm", prev);
            st.down = Conv2d(params_, name + ".down", init, prev, dims[s], 3, 2, 1);
            if (s == 0) st.down_norm = LayerNorm(params_, name + ".stem_norm", dims[s]);
            st.dwconv = Conv2d(params_, name + ".dwconv", init, dims[s], dims[s], 3, 1, 1, dims[s]);
            st.norm = LayerNorm(params_, name + ".norm", dims[s]);
            st.expand = Linear(params_, name + ".expand", init, dims[s], 4 * dims[s]);
            st.reduce = Linear(params_, name + ".reduce", init, 4 * dims[s], dims[s]);
            prev = dims[s];
        }
        out_channels_ = prev;
    }

    ExpertKind kind() const noexcept override { return ExpertKind::ModernConv; }
    std::size_t out_channels() const noexcept override { return out_channels_; }

    Tensor run(const Tensor& image, Mode) override {
        Tensor x = image;
        for (int s = 0; s < 3; ++s) {
            auto& st = stages_[s];
            if (s == 0) {
                x = channel_layer_norm(st.down(x), st.down_norm);
            } else {
                x = st.down(channel_layer_norm(x, st.down_norm));
            }
            auto y = nchw_to_nhwc(st.dwconv(x));
            y = st.reduce(gelu(st.expand(st.norm(y))));
            x = add(x, nhwc_to_nchw(y));
        }
        return x;
    }

private:
    static Tensor channel_layer_norm(const Tensor& x, const LayerNorm& norm) {
        return nhwc_to_nchw(norm(nchw_to_nhwc(x)));
    }

    struct Stage {
        LayerNorm down_norm;
        Conv2d down, dwconv;
        LayerNorm norm;
        Linear expand, reduce;
    };
    Stage stages_[3];
    std::size_t out_channels_ = 0;
};

// PVT-style: overlapping conv patch embedding per stage, attention whose
// keys and values come from a 2x2 max-pooled copy of the token map.
class PyramidAttentionExpert final : public Expert {
public:
    PyramidAttentionExpert(std::size_t in_channels, std::uint64_t seed, std::size_t width)
        : Expert(in_channels) {
        Initializer init(seed);
        const std::size_t dims[3] = {32 * width, 64 * width, 96 * width};
        const std::size_t heads[3] = {2, 2, 4};
        std::size_t prev = in_channels;
        for (int s = 0; s < 3; ++s) {
            const std::string name = "stage" + std::to_string(s);
            auto& st = stages_[s];
            st.embed = Conv2d(params_, name + ".embed", init, prev, dims[s], 3, 2, 1);
            st.embed_norm = LayerNorm(params_, name + ".embed_norm", dims[s]);
            st.norm1 = LayerNorm(params_, name + ".norm1", dims[s]);
            st.attn = Attention(params_, name + ".attn", init, dims[s], heads[s]);
            st.norm2 = LayerNorm(params_, name + ".norm2", dims[s]);
            st.mlp = TokenMlp(params_, name + ".mlp", init, dims[s], 2);
            prev = dims[s];
        }
        out_channels_ = prev;
    }

    ExpertKind kind() const noexcept override { return ExpertKind::PyramidAttention; }
    std::size_t out_channels() const noexcept override { return out_channels_; }

    Tensor run(const Tensor& image, Mode) override {
        Tensor x = image;
        for (auto& st : stages_) {
            auto map = st.embed(x);
            const std::size_t h = map.dim(2), w = map.dim(3);
            auto tokens = st.embed_norm(to_tokens(map));
            auto normed = st.norm1(tokens);
            Tensor kv = normed;
            if (h % 2 == 0 && w % 2 == 0) kv = to_tokens(maxpool2x2(from_tokens(normed, h, w)));
            tokens = add(tokens, st.attn(normed, kv));
            tokens = add(tokens, st.mlp(st.norm2(tokens)));
            x = from_tokens(tokens, h, w);
        }
        return x;
    }

private:
    struct Stage {
        Conv2d embed;
        LayerNorm embed_norm, norm1, norm2;
        Attention attn;
        TokenMlp mlp;
    };
    Stage stages_[3];
    std::size_t out_channels_ = 0;
};

}  // namespace

std::unique_ptr<Expert> build_expert(ExpertKind kind, std::size_t in_channels, std::uint64_t seed,
                                     std::size_t width) {
    if (in_channels == 0) throw ConfigError("build_expert: in_channels must be at least 1");
    if (width == 0) throw ConfigError("build_expert: width must be at least 1");
    switch (kind) {
        case ExpertKind::WindowedAttention:
            return std::make_unique<WindowedAttentionExpert>(in_channels, seed, width);
        case ExpertKind::ResidualConv: return std::make_unique<ResidualConvExpert>(in_channels, seed, width);
        case ExpertKind::ModernConv: return std::make_unique<ModernConvExpert>(in_channels, seed, width);
        case ExpertKind::PyramidAttention:
            return std::make_unique<PyramidAttentionExpert>(in_channels, seed, width);
    }
    throw ConfigError("build_expert: unknown expert kind " + std::to_string(static_cast<int>(kind)));
}

std::vector<ExpertKind> default_expert_kinds(std::size_t k) {
    std::vector<ExpertKind> kinds;
    for (std::size_t i = 0; i < k; ++i) kinds.push_back(kAllExpertKinds[i % kAllExpertKinds.size()]);
    return kinds;
}

ExpertBundle::ExpertBundle(std::vector<ExpertKind> kinds, std::size_t in_channels, std::uint64_t seed,
                           std::size_t out_channels, std::size_t width)
    : kinds_(std::move(kinds)), in_channels_(in_channels), out_channels_(out_channels) {
    if (kinds_.empty()) throw ConfigError("expert bundle needs at least one expert");
    if (out_channels_ == 0) throw ConfigError("expert bundle: out_channels must be at least 1");
    adapter_params_.resize(kinds_.size());
    for (std::size_t k = 0; k < kinds_.size(); ++k) {
        experts_.push_back(build_expert(kinds_[k], in_channels, mix_seed(seed, 2 * k), width));
        Initializer init(mix_seed(seed, 2 * k + 1));
        adapters_.emplace_back(adapter_params_[k], "proj", init, experts_[k]->out_channels(), out_channels_, 1,
                               1, 0);
    }
}

Tensor Expert::forward(const Tensor& image, Mode mode) {
    require_rank(image, 4, "expert input");
    if (image.dim(1) != in_channels_)
        throw DimensionError("expert input has " + std::to_string(image.dim(1)) + " channels, expected " +
                             std::to_string(in_channels_));
    if (image.dim(2) % kExpertDownsample != 0 || image.dim(3) % kExpertDownsample != 0)
        throw DimensionError("expert input spatial dims must be divisible by 8, got " +
                             to_string(image.shape()));
    return run(image, mode);
}

Tensor ExpertBundle::forward(std::size_t k, const Tensor& image, Mode mode, ForwardStats* stats) {
    if (k >= experts_.size())
        throw std::out_of_range("expert index " + std::to_string(k) + " out of range for " +
                                std::to_string(experts_.size()) + " experts");
    if (stats) stats->expert_forwards += image.dim(0);
    return adapters_[k](experts_[k]->forward(image, mode));
}

std::vector<Tensor> ExpertBundle::forward_all(const Tensor& image, Mode mode, ForwardStats* stats) {
    std::vector<Tensor> outputs;
    outputs.reserve(experts_.size());
    for (std::size_t k = 0; k < experts_.size(); ++k) outputs.push_back(forward(k, image, mode, stats));
    return outputs;
}

ParameterSet ExpertBundle::parameters() const {
    ParameterSet all;
    for (std::size_t k = 0; k < experts_.size(); ++k) {
        all.append(experts_[k]->parameters(), "expert" + std::to_string(k) + ".");
        all.append(adapter_params_[k], "adapter" + std::to_string(k) + ".");
    }
    return all;
}

}  // namespace cbdes
