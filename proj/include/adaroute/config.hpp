#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "adaroute/adaroute_block.hpp"
#include "adaroute/backbone.hpp"
#include "adaroute/trainer.hpp"

namespace adaroute {

using nlohmann::json;

// Full experiment description; every field has a spelled-out default and a
// run is a pure function of (config, seed).
struct RunConfig {
    int schema_version = 1;
    std::uint64_t seed = 1;
    std::string out_dir = "runs/out";

    BackboneConfig backbone;
    AdapterConfig adapter;
    bool adapters_enabled = true;
    bool static_one_hot = false; // classical input-agnostic adapter control

    TaskSpec task;
    TrainHyper train;
    bool debug_finite_checks = false;
};

namespace detail {

template <class T>
void read_field(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace detail

inline json to_json(const RunConfig& c) {
    json j;
    j["schema_version"] = c.schema_version;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["backbone"] = {
        {"style", style_name(c.backbone.style)},
        {"depths", c.backbone.depths},
        {"dims", c.backbone.dims},
        {"patch", c.backbone.patch},
        {"in_channels", c.backbone.in_channels},
        {"attn_heads", c.backbone.attn_heads},
        {"mlp_ratio", c.backbone.mlp_ratio},
    };
    j["adapter"] = {
        {"enabled", c.adapters_enabled},
        {"static_one_hot", c.static_one_hot},
        {"m_multiplier", c.adapter.m_multiplier},
        {"latent", c.adapter.latent},
        {"latent_per_stage", c.adapter.latent_per_stage},
        {"kernel_sizes", c.adapter.kernel_sizes},
        {"use_sa", c.adapter.use_sa},
        {"layout", layout_name(c.adapter.layout)},
        {"router_activation", router_activation_name(c.adapter.activation)},
        {"router_hidden", c.adapter.router_hidden},
        {"top_k", c.adapter.top_k},
        {"top_k_renormalize", c.adapter.top_k_renormalize},
        {"init", init_name(c.adapter.init)},
        {"group_size", c.adapter.group_size},
        {"nonlinearity", c.adapter.nonlinearity == AdapterNonlinearity::Gelu ? "gelu" : "none"},
    };
    j["task"] = {
        {"kind", task_name(c.task.kind)},
        {"n_classes", c.task.n_classes},
        {"image_size", c.task.image_size},
        {"in_channels", c.task.in_channels},
    };
    j["train"] = {
        {"steps", c.train.steps},
        {"batch", c.train.batch},
        {"lr", c.train.adamw.lr},
        {"weight_decay", c.train.adamw.weight_decay},
        {"beta1", c.train.adamw.beta1},
        {"beta2", c.train.adamw.beta2},
        {"eps", c.train.adamw.eps},
        {"schedule", c.train.schedule},
        {"total_steps", c.train.total_steps},
        {"eval_every", c.train.eval_every},
        {"eval_batches", c.train.eval_batches},
    };
    j["debug_finite_checks"] = c.debug_finite_checks;
    return j;
}

inline RunConfig config_from_json(const json& j) {
    RunConfig c;
    try {
        detail::read_field(j, "schema_version", c.schema_version);
        if (c.schema_version != 1)
            throw ConfigError("unsupported config schema_version " +
                              std::to_string(c.schema_version));
        detail::read_field(j, "seed", c.seed);
        detail::read_field(j, "out_dir", c.out_dir);
        if (j.contains("backbone")) {
            const json& b = j.at("backbone");
            if (b.contains("style")) c.backbone.style = parse_style(b.at("style"));
            detail::read_field(b, "depths", c.backbone.depths);
            detail::read_field(b, "dims", c.backbone.dims);
            detail::read_field(b, "patch", c.backbone.patch);
            detail::read_field(b, "in_channels", c.backbone.in_channels);
            detail::read_field(b, "attn_heads", c.backbone.attn_heads);
            detail::read_field(b, "mlp_ratio", c.backbone.mlp_ratio);
        }
        if (j.contains("adapter")) {
            const json& a = j.at("adapter");
            detail::read_field(a, "enabled", c.adapters_enabled);
            detail::read_field(a, "static_one_hot", c.static_one_hot);
            detail::read_field(a, "m_multiplier", c.adapter.m_multiplier);
            detail::read_field(a, "latent", c.adapter.latent);
            detail::read_field(a, "latent_per_stage", c.adapter.latent_per_stage);
            detail::read_field(a, "kernel_sizes", c.adapter.kernel_sizes);
            detail::read_field(a, "use_sa", c.adapter.use_sa);
            if (a.contains("layout")) c.adapter.layout = parse_layout(a.at("layout"));
            if (a.contains("router_activation"))
                c.adapter.activation = parse_router_activation(a.at("router_activation"));
            detail::read_field(a, "router_hidden", c.adapter.router_hidden);
            detail::read_field(a, "top_k", c.adapter.top_k);
            detail::read_field(a, "top_k_renormalize", c.adapter.top_k_renormalize);
            if (a.contains("init")) c.adapter.init = parse_init(a.at("init"));
            detail::read_field(a, "group_size", c.adapter.group_size);
            if (a.contains("nonlinearity"))
                c.adapter.nonlinearity = parse_nonlinearity(a.at("nonlinearity"));
        }
        if (j.contains("task")) {
            const json& t = j.at("task");
            if (t.contains("kind")) c.task.kind = parse_task(t.at("kind"));
            detail::read_field(t, "n_classes", c.task.n_classes);
            detail::read_field(t, "image_size", c.task.image_size);
            detail::read_field(t, "in_channels", c.task.in_channels);
        }
        if (j.contains("train")) {
            const json& t = j.at("train");
            detail::read_field(t, "steps", c.train.steps);
            detail::read_field(t, "batch", c.train.batch);
            detail::read_field(t, "lr", c.train.adamw.lr);
            detail::read_field(t, "weight_decay", c.train.adamw.weight_decay);
            detail::read_field(t, "beta1", c.train.adamw.beta1);
            detail::read_field(t, "beta2", c.train.adamw.beta2);
            detail::read_field(t, "eps", c.train.adamw.eps);
            detail::read_field(t, "schedule", c.train.schedule);
            detail::read_field(t, "total_steps", c.train.total_steps);
            detail::read_field(t, "eval_every", c.train.eval_every);
            detail::read_field(t, "eval_batches", c.train.eval_batches);
        }
        detail::read_field(j, "debug_finite_checks", c.debug_finite_checks);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config parse: ") + e.what());
    }
    c.task.seed = c.seed;
    c.backbone.in_channels = c.task.in_channels;
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("invalid JSON in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

// Builds the model a config describes (backbone, adapters, head).
inline ModelGraph build_model(const RunConfig& c) {
    ModelGraph g = build_backbone(c.backbone, c.seed);
    if (c.adapters_enabled) {
        AdapterConfig a = c.adapter;
        insert_adapters(g, a, mix_seed(c.seed, 0xada));
        const bool sa_active = a.use_sa && a.kernel_sizes.size() > 1;
        for (auto& p : g.params) {
            if (p.category == ParamCategory::SA && !sa_active) {
                p.frozen = true;
                p.tensor.set_requires_grad(false);
            }
            if (p.category == ParamCategory::Router && c.static_one_hot) {
                p.frozen = true;
                p.tensor.set_requires_grad(false);
            }
        }
        if (c.static_one_hot)
            for (std::size_t i = 0; i < g.sites.size(); ++i) g.sites[i].static_gate = i;
    }
    attach_head(g,
                c.task.kind == TaskKind::BlobSeg ? HeadKind::Segmentation
                                                 : HeadKind::Classification,
                c.task.n_classes, mix_seed(c.seed, 0x4ead0));
    return g;
}

} // namespace adaroute
