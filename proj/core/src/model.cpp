// SPDX-License-Identifier: Apache-2.0
#include "cbdes/model.hpp"

namespace cbdes {

SarConfig ModelConfig::router_config() const {
    SarConfig sar;
    sar.in_channels = in_channels;
    sar.d_emb = d_emb;
    sar.heads = heads;
    sar.num_experts = num_experts;
    sar.mlp_hidden = mlp_hidden;
    return sar;
}

namespace {

std::vector<ExpertKind> kinds_for(const ModelConfig& config) {
    if (config.single_expert) return {*config.single_expert};
    if (config.num_experts < 2) throw ConfigError("a mixture needs at least 2 experts");
    return default_expert_kinds(config.num_experts);
}

}  // namespace

MoeModel::MoeModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config),
      experts_(kinds_for(config), config.in_channels, mix_seed(seed, 0), config.out_channels, config.expert_width) {
    if (!config_.single_expert) {
        router_.emplace(config_.router_config(), mix_seed(seed, 1));
        if (config_.zero_router_output) router_->zero_output_layer();
    }
    Initializer init(mix_seed(seed, 2));
    head_ = Linear(head_params_, "fc", init, config_.out_channels, config_.num_classes);

    all_.append(experts_.parameters(), "experts.");
    if (router_) all_.append(router_->parameters(), "router.");
    all_.append(head_params_, "head.");
}

std::vector<Tensor> MoeModel::trainable() const {
    std::vector<Tensor> out;
    for (const auto& p : all_.parameters()) out.push_back(p.tensor);
    return out;
}

MoeModel::Output MoeModel::forward(const Tensor& images, FusionMode fusion, Mode mode) {
    Output out;
    const std::size_t batch = images.dim(0);
    Tensor features;
    if (!router_) {
        ForwardStats stats;
        features = experts_.forward(0, images, mode, &stats);
        out.expert_forwards = stats.expert_forwards;
        out.top1.assign(batch, 0);
    } else if (fusion.kind() == FusionMode::Kind::SoftAll) {
        ForwardStats stats;
        auto outputs = experts_.forward_all(images, mode, &stats);
        auto routing = router_->route(images, mode);
        features = fuse_soft(outputs, routing);
        out.expert_forwards = stats.expert_forwards;
        out.top1 = routing.argmax();
        out.routing.emplace(std::move(routing));
    } else {
        auto sparse = infer_sparse(experts_, *router_, images, fusion.k(experts_.size()));
        features = sparse.output;
        out.expert_forwards = sparse.expert_forwards;
        for (const auto& sel : sparse.selected) out.top1.push_back(sel.front());
        out.routing.emplace(std::move(sparse.routing));
    }
    out.logits = head_(global_avg_pool(features));
    return out;
}

}  // namespace cbdes
