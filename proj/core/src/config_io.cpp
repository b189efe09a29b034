// SPDX-License-Identifier: Apache-2.0
#include "cbdes/config_io.hpp"

#include <nlohmann/json.hpp>

namespace cbdes {

using nlohmann::json;

std::string to_json(const TrainConfig& c) {
    json j;
    j["lr"] = c.lr;
    j["weight_decay"] = c.weight_decay;
    j["warmup_iters"] = c.warmup_iters;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["lambda"] = c.lambda;
    j["seed"] = c.seed;
    j["train_size"] = c.train_size;
    j["eval_size"] = c.eval_size;
    j["experts"] = c.model.num_experts;
    j["single_expert"] = c.model.single_expert ? std::string(expert_kind_name(*c.model.single_expert)) : "";
    j["in_channels"] = c.model.in_channels;
    j["out_channels"] = c.model.out_channels;
    j["expert_width"] = c.model.expert_width;
    j["d_emb"] = c.model.d_emb;
    j["heads"] = c.model.heads;
    j["mlp_hidden"] = c.model.mlp_hidden;
    j["num_classes"] = c.model.num_classes;
    j["zero_router_output"] = c.model.zero_router_output;
    return j.dump();
}

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
}

}  // namespace

TrainConfig apply_json(std::string_view text, TrainConfig c) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    static const char* const known[] = {"lr",           "weight_decay", "warmup_iters", "epochs",
                                        "batch_size",   "lambda",       "seed",         "train_size",
                                        "eval_size",    "experts",      "single_expert", "in_channels",
                                        "out_channels", "expert_width", "d_emb",        "heads",
                                        "mlp_hidden",   "num_classes",  "zero_router_output"};
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw ConfigError("unknown config key '" + key + "'");
    }
    read(j, "lr", c.lr);
    read(j, "weight_decay", c.weight_decay);
    read(j, "warmup_iters", c.warmup_iters);
    read(j, "epochs", c.epochs);
    read(j, "batch_size", c.batch_size);
    read(j, "lambda", c.lambda);
    read(j, "seed", c.seed);
    read(j, "train_size", c.train_size);
    read(j, "eval_size", c.eval_size);
    read(j, "experts", c.model.num_experts);
    read(j, "in_channels", c.model.in_channels);
    read(j, "out_channels", c.model.out_channels);
    read(j, "expert_width", c.model.expert_width);
    read(j, "d_emb", c.model.d_emb);
    read(j, "heads", c.model.heads);
    read(j, "mlp_hidden", c.model.mlp_hidden);
    read(j, "num_classes", c.model.num_classes);
    read(j, "zero_router_output", c.model.zero_router_output);
    if (j.contains("single_expert")) {
        std::string name;
        read(j, "single_expert", name);
        if (name.empty()) {
            c.model.single_expert.reset();
        } else {
            auto kind = parse_expert_kind(name);
            if (!kind) throw ConfigError("unknown expert kind '" + name + "'");
            c.model.single_expert = kind;
        }
    }
    return c;
}

}  // namespace cbdes
