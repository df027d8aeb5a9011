#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "adaroute/adaroute_block.hpp"
#include "adaroute/expert_center.hpp"
#include "adaroute/router.hpp"
#include "adaroute/tensor.hpp"

namespace adaroute {

enum class BackboneStyle { SwinLike, ConvNextLike };

inline BackboneStyle parse_style(const std::string& s) {
    if (s == "swin_like") return BackboneStyle::SwinLike;
    if (s == "convnext_like") return BackboneStyle::ConvNextLike;
    throw ConfigError("unknown backbone style: " + s);
}

inline std::string style_name(BackboneStyle s) {
    return s == BackboneStyle::SwinLike ? "swin_like" : "convnext_like";
}

struct BackboneConfig {
    BackboneStyle style = BackboneStyle::SwinLike;
    std::vector<std::size_t> depths = {2, 2};
    std::vector<std::size_t> dims = {16, 32};
    std::vector<std::size_t> patch = {2, 2}; // per-stage downsampling factor
    std::size_t in_channels = 3;
    std::size_t attn_heads = 2;
    double mlp_ratio = 2.0;

    std::size_t n_stages() const { return depths.size(); }

    void validate() const {
        if (depths.empty() || depths.size() != dims.size() || patch.size() != depths.size())
            throw ConfigError("backbone: depths, dims and patch must have equal length");
        for (std::size_t i = 0; i < depths.size(); ++i) {
            if (depths[i] == 0 || dims[i] == 0) throw ConfigError("backbone: zero extent");
            if (i > 0 && dims[i] <= dims[i - 1])
                throw ConfigError("backbone: dims must be strictly increasing");
            if (patch[i] == 0) throw ConfigError("backbone: zero patch factor");
        }
        if (style == BackboneStyle::SwinLike)
            for (std::size_t d : dims)
                if (d % attn_heads != 0)
                    throw ConfigError("backbone: dims must divide by attention heads");
    }
};

// Adapter wiring knobs, mirroring the ablation axes.
struct AdapterConfig {
    double m_multiplier = 1.0;  // M = round(mult * blocks in scope), min 1
    std::size_t latent = 8;     // global latent width
    std::vector<std::size_t> latent_per_stage; // optional per-stage override
    std::vector<std::size_t> kernel_sizes = {3, 5, 7};
    bool use_sa = true;
    MixLayout layout = MixLayout::SequentialRes;
    RouterActivation activation = RouterActivation::Softmax;
    std::size_t router_hidden = 8;
    std::size_t top_k = 0; // 0 = dense
    bool top_k_renormalize = true;
    InitStrategy init = InitStrategy::TruncNormal;
    std::size_t group_size = 0; // sites per center; 0 = whole stage
    AdapterNonlinearity nonlinearity = AdapterNonlinearity::Gelu;

    std::size_t latent_for_stage(std::size_t s, std::size_t stage_dim) const {
        std::size_t l = latent_per_stage.empty() ? latent : latent_per_stage.at(s);
        if (l < 1 || l >= stage_dim)
            throw ConfigError("adapter: latent width " + std::to_string(l) +
                              " must satisfy 1 <= latent < " + std::to_string(stage_dim));
        return l;
    }
};

enum class ParamCategory { Backbone, Center, Router, SA, Head };

struct ParamEntry {
    std::string name;
    Tensor tensor;
    bool frozen = false;
    ParamCategory category = ParamCategory::Backbone;
};

namespace detail {

struct SwinBlock {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct ConvNextBlock {
    Tensor dw_kernel; // [C x 3 x 3]
    Tensor ln_g, ln_b;
    Tensor pw_w1, pw_b1, pw_w2, pw_b2;
};

struct PatchEmbed {
    Tensor w, b;     // [(C_in * p^2) x C_out], [C_out]
    Tensor ln_g, ln_b;
};

struct Stage {
    PatchEmbed embed;
    std::vector<SwinBlock> swin_blocks;
    std::vector<ConvNextBlock> convnext_blocks;
    std::vector<std::shared_ptr<ExpertCenter>> centers;
};

} // namespace detail

enum class HeadKind { None, Segmentation, Classification };

// Frozen toy backbone plus inserted adapters, a task head, and the freeze
// mask, addressable as a flat named-parameter registry for checkpoints.
struct ModelGraph {
    BackboneConfig cfg;
    AdapterConfig acfg;
    bool adapters_inserted = false;
    std::uint64_t backbone_seed = 0;

    std::vector<detail::Stage> stages;
    std::vector<AdaRouteModule> sites; // global site order
    std::vector<std::size_t> site_stage; // stage index per site

    HeadKind head_kind = HeadKind::None;
    std::size_t n_classes = 0;
    Tensor head_w, head_b;

    std::vector<ParamEntry> params;

    std::vector<Tensor> trainable() const {
        std::vector<Tensor> out;
        for (const auto& p : params)
            if (!p.frozen) out.push_back(p.tensor);
        return out;
    }

    const ParamEntry& find(const std::string& name) const {
        for (const auto& p : params)
            if (p.name == name) return p;
        throw UsageError("no parameter named " + name);
    }
};

namespace detail {

inline void reg(ModelGraph& g, const std::string& name, const Tensor& t, bool frozen,
                ParamCategory cat) {
    t.set_requires_grad(!frozen);
    g.params.push_back({name, t, frozen, cat});
}

inline Tensor frozen_weight(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    const double std_ = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.data()) v = rng.normal(0.0, std_);
    return t;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

inline ModelGraph build_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelGraph g;
    g.cfg = cfg;
    g.backbone_seed = seed;

    std::size_t prev_c = cfg.in_channels;
    for (std::size_t s = 0; s < cfg.n_stages(); ++s) {
        detail::Stage stage;
        const std::size_t c = cfg.dims[s];
        const std::string sp = "backbone.stage" + std::to_string(s);
        Rng rng(mix_seed(seed, 7000 + s));

        const std::size_t pin = prev_c * cfg.patch[s] * cfg.patch[s];
        stage.embed.w = detail::frozen_weight({pin, c}, pin, rng);
        stage.embed.b = Tensor::zeros({c});
        stage.embed.ln_g = Tensor::full({c}, 1.0);
        stage.embed.ln_b = Tensor::zeros({c});
        detail::reg(g, sp + ".embed.w", stage.embed.w, true, ParamCategory::Backbone);
        detail::reg(g, sp + ".embed.b", stage.embed.b, true, ParamCategory::Backbone);
        detail::reg(g, sp + ".embed.ln_g", stage.embed.ln_g, true, ParamCategory::Backbone);
        detail::reg(g, sp + ".embed.ln_b", stage.embed.ln_b, true, ParamCategory::Backbone);

        for (std::size_t b = 0; b < cfg.depths[s]; ++b) {
            const std::string bp = sp + ".block" + std::to_string(b);
            Rng brng(mix_seed(seed, (s + 1) * 1000 + b));
            if (cfg.style == BackboneStyle::SwinLike) {
                detail::SwinBlock blk;
                blk.ln1_g = Tensor::full({c}, 1.0);
                blk.ln1_b = Tensor::zeros({c});
                blk.wq = detail::frozen_weight({c, c}, c, brng);
                blk.bq = Tensor::zeros({c});
                blk.wk = detail::frozen_weight({c, c}, c, brng);
                blk.bk = Tensor::zeros({c});
                blk.wv = detail::frozen_weight({c, c}, c, brng);
                blk.bv = Tensor::zeros({c});
                blk.wo = detail::frozen_weight({c, c}, c, brng);
                blk.bo = Tensor::zeros({c});
                blk.ln2_g = Tensor::full({c}, 1.0);
                blk.ln2_b = Tensor::zeros({c});
                const std::size_t hid = static_cast<std::size_t>(cfg.mlp_ratio * c);
                blk.mlp_w1 = detail::frozen_weight({c, hid}, c, brng);
                blk.mlp_b1 = Tensor::zeros({hid});
                blk.mlp_w2 = detail::frozen_weight({hid, c}, hid, brng);
                blk.mlp_b2 = Tensor::zeros({c});
                detail::reg(g, bp + ".ln1_g", blk.ln1_g, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".ln1_b", blk.ln1_b, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".wq", blk.wq, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".bq", blk.bq, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".wk", blk.wk, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".bk", blk.bk, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".wv", blk.wv, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".bv", blk.bv, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".wo", blk.wo, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".bo", blk.bo, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".ln2_g", blk.ln2_g, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".ln2_b", blk.ln2_b, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".mlp_w1", blk.mlp_w1, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".mlp_b1", blk.mlp_b1, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".mlp_w2", blk.mlp_w2, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".mlp_b2", blk.mlp_b2, true, ParamCategory::Backbone);
                stage.swin_blocks.push_back(blk);
            } else {
                detail::ConvNextBlock blk;
                blk.dw_kernel = detail::frozen_weight({c, 3, 3}, 9, brng);
                blk.ln_g = Tensor::full({c}, 1.0);
                blk.ln_b = Tensor::zeros({c});
                const std::size_t hid = static_cast<std::size_t>(cfg.mlp_ratio * c);
                blk.pw_w1 = detail::frozen_weight({c, hid}, c, brng);
                blk.pw_b1 = Tensor::zeros({hid});
                blk.pw_w2 = detail::frozen_weight({hid, c}, hid, brng);
                blk.pw_b2 = Tensor::zeros({c});
                detail::reg(g, bp + ".dw", blk.dw_kernel, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".ln_g", blk.ln_g, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".ln_b", blk.ln_b, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".pw_w1", blk.pw_w1, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".pw_b1", blk.pw_b1, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".pw_w2", blk.pw_w2, true, ParamCategory::Backbone);
                detail::reg(g, bp + ".pw_b2", blk.pw_b2, true, ParamCategory::Backbone);
                stage.convnext_blocks.push_back(blk);
            }
        }
        g.stages.push_back(std::move(stage));
        prev_c = c;
    }
    return g;
}

inline std::size_t sites_per_block(BackboneStyle style) {
    return style == BackboneStyle::SwinLike ? 2 : 1;
}

inline void insert_adapters(ModelGraph& g, const AdapterConfig& acfg, std::uint64_t seed) {
    if (g.adapters_inserted) throw UsageError("insert_adapters: adapters already present");
    g.acfg = acfg;
    const std::size_t spb = sites_per_block(g.cfg.style);
    std::size_t global_site = 0;
    for (std::size_t s = 0; s < g.cfg.n_stages(); ++s) {
        const std::size_t c = g.cfg.dims[s];
        const std::size_t latent = acfg.latent_for_stage(s, c);
        std::vector<std::size_t> site_blocks;
        for (std::size_t b = 0; b < g.cfg.depths[s]; ++b)
            for (std::size_t r = 0; r < spb; ++r) site_blocks.push_back(b);

        const std::size_t group =
            acfg.group_size == 0 ? site_blocks.size() : acfg.group_size;
        auto groups = partition_scope(site_blocks, group);

        std::vector<std::shared_ptr<ExpertCenter>> centers;
        std::vector<std::size_t> site_center(site_blocks.size());
        for (std::size_t gi = 0; gi < groups.size(); ++gi) {
            const std::size_t m = std::max<std::size_t>(
                1, static_cast<std::size_t>(
                       std::llround(acfg.m_multiplier * static_cast<double>(groups[gi].n_blocks))));
            auto center = std::make_shared<ExpertCenter>(
                init_center(m, c, latent, acfg.kernel_sizes, acfg.init,
                            mix_seed(seed, 31000 + s * 100 + gi)));
            const std::string cp =
                "adapter.stage" + std::to_string(s) + ".center" + std::to_string(gi);
            detail::reg(g, cp + ".e_down", center->e_down, false, ParamCategory::Center);
            detail::reg(g, cp + ".e_up", center->e_up, false, ParamCategory::Center);
            for (std::size_t ki = 0; ki < center->spatial.size(); ++ki)
                detail::reg(g, cp + ".s" + std::to_string(ki), center->spatial[ki], false,
                            ParamCategory::Center);
            for (std::size_t local : groups[gi].sites) site_center[local] = gi;
            centers.push_back(center);
        }
        g.stages[s].centers = centers;

        for (std::size_t local = 0; local < site_blocks.size(); ++local) {
            auto center = centers[site_center[local]];
            center->scope.push_back(global_site);
            AdaRouteModule m = init_adaroute_module(center, acfg.router_hidden, acfg.init,
                                                    mix_seed(seed, 61000 + global_site));
            m.layout = acfg.layout;
            m.use_sa = acfg.use_sa;
            m.nonlinearity = acfg.nonlinearity;
            m.top_k = acfg.top_k;
            m.top_k_renormalize = acfg.top_k_renormalize;
            m.router.activation = acfg.activation;
            const std::string mp = "adapter.site" + std::to_string(global_site);
            detail::reg(g, mp + ".router.w_hidden", m.router.w_hidden, false,
                        ParamCategory::Router);
            detail::reg(g, mp + ".router.b_hidden", m.router.b_hidden, false,
                        ParamCategory::Router);
            for (std::size_t h = 0; h < m.router.w_heads.size(); ++h) {
                detail::reg(g, mp + ".router.head" + std::to_string(h) + ".w",
                            m.router.w_heads[h], false, ParamCategory::Router);
                detail::reg(g, mp + ".router.head" + std::to_string(h) + ".b",
                            m.router.b_heads[h], false, ParamCategory::Router);
            }
            detail::reg(g, mp + ".sa.w", m.sa_w, false, ParamCategory::SA);
            detail::reg(g, mp + ".sa.b", m.sa_b, false, ParamCategory::SA);
            g.sites.push_back(std::move(m));
            g.site_stage.push_back(s);
            ++global_site;
        }
    }
    g.adapters_inserted = true;
}

inline void attach_head(ModelGraph& g, HeadKind kind, std::size_t n_classes,
                        std::uint64_t seed) {
    if (g.head_kind != HeadKind::None) throw UsageError("attach_head: head already present");
    if (n_classes < 2) throw ConfigError("attach_head: need at least two classes");
    Rng rng(mix_seed(seed, 0x4ead));
    std::size_t in = 0;
    if (kind == HeadKind::Segmentation) {
        for (std::size_t d : g.cfg.dims) in += d;
    } else {
        in = g.cfg.dims.back();
    }
    g.head_kind = kind;
    g.n_classes = n_classes;
    g.head_w = detail::frozen_weight({in, n_classes}, in, rng);
    g.head_b = Tensor::zeros({n_classes});
    detail::reg(g, "head.w", g.head_w, false, ParamCategory::Head);
    detail::reg(g, "head.b", g.head_b, false, ParamCategory::Head);
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

inline Tensor to_tokens(const Tensor& x) {
    return transpose2d(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}));
}

inline Tensor to_chw(const Tensor& tokens, std::size_t h, std::size_t w) {
    return reshape(transpose2d(tokens), {tokens.dim(1), h, w});
}

struct ForwardHooks {
    std::vector<Tensor>* block_features = nullptr;   // post-adapter block outputs
    std::vector<GatingVectors>* gates = nullptr;     // per adapter site, forward order
};

namespace detail {

inline Tensor swin_attention(const Tensor& tokens, const SwinBlock& blk, std::size_t heads) {
    const std::size_t c = tokens.dim(1);
    const std::size_t d = c / heads;
    Tensor q = affine(tokens, blk.wq, blk.bq);
    Tensor k = affine(tokens, blk.wk, blk.bk);
    Tensor v = affine(tokens, blk.wv, blk.bv);
    std::vector<Tensor> outs;
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * d, (h + 1) * d);
        Tensor kh = slice_cols(k, h * d, (h + 1) * d);
        Tensor vh = slice_cols(v, h * d, (h + 1) * d);
        Tensor scores = scale(matmul(qh, transpose2d(kh)), 1.0 / std::sqrt(static_cast<double>(d)));
        outs.push_back(matmul(softmax_rows(scores), vh));
    }
    Tensor merged = heads == 1 ? outs[0] : concat_cols(outs);
    return affine(merged, blk.wo, blk.bo);
}

inline Tensor run_adapter_site(const ModelGraph& g, std::size_t site, const Tensor& x,
                               ForwardHooks* hooks) {
    const AdaRouteModule& m = g.sites[site];
    GatingVectors gates = m.static_gate >= 0 ? m.static_gates() : route(x, m.router);
    gates = sparsify_gates(gates, m.top_k, m.top_k_renormalize);
    if (hooks && hooks->gates) hooks->gates->push_back(gates);
    return adaroute_forward_with_gates(x, m, gates);
}

} // namespace detail

// Runs the backbone (with any inserted adapters) on one [C_in x H x W] image.
// Returns per-stage final feature maps; hooks collect block-level taps.
inline std::vector<Tensor> stage_features(const ModelGraph& g, const Tensor& image,
                                          ForwardHooks* hooks = nullptr) {
    if (image.ndim() != 3 || image.dim(0) != g.cfg.in_channels)
        throw ShapeError("forward: image " + shape_str(image.shape()) + " vs in_channels " +
                         std::to_string(g.cfg.in_channels));
    std::vector<Tensor> per_stage;
    Tensor x = image;
    std::size_t site = 0;
    for (std::size_t s = 0; s < g.cfg.n_stages(); ++s) {
        const auto& stage = g.stages[s];
        Tensor p = patch_merge(x, g.cfg.patch[s]);
        const std::size_t h = p.dim(1), w = p.dim(2);
        Tensor tokens = affine(to_tokens(p), stage.embed.w, stage.embed.b);
        tokens = layer_norm(tokens, stage.embed.ln_g, stage.embed.ln_b);
        x = to_chw(tokens, h, w);

        for (std::size_t b = 0; b < g.cfg.depths[s]; ++b) {
            if (g.cfg.style == BackboneStyle::SwinLike) {
                const auto& blk = stage.swin_blocks[b];
                Tensor t = to_tokens(x);
                t = add(t, detail::swin_attention(layer_norm(t, blk.ln1_g, blk.ln1_b), blk,
                                                  g.cfg.attn_heads));
                x = to_chw(t, h, w);
                if (g.adapters_inserted) x = detail::run_adapter_site(g, site++, x, hooks);
                t = to_tokens(x);
                Tensor m = affine(layer_norm(t, blk.ln2_g, blk.ln2_b), blk.mlp_w1, blk.mlp_b1);
                m = affine(gelu(m), blk.mlp_w2, blk.mlp_b2);
                t = add(t, m);
                x = to_chw(t, h, w);
                if (g.adapters_inserted) x = detail::run_adapter_site(g, site++, x, hooks);
            } else {
                const auto& blk = stage.convnext_blocks[b];
                Tensor y = dwconv2d(x, blk.dw_kernel);
                Tensor t = layer_norm(to_tokens(y), blk.ln_g, blk.ln_b);
                t = affine(gelu(affine(t, blk.pw_w1, blk.pw_b1)), blk.pw_w2, blk.pw_b2);
                x = add(x, to_chw(t, h, w));
                if (g.adapters_inserted) x = detail::run_adapter_site(g, site++, x, hooks);
            }
            if (hooks && hooks->block_features) hooks->block_features->push_back(x);
        }
        per_stage.push_back(x);
    }
    return per_stage;
}

// Per-pixel class logits at the input resolution: upsampled stage features
// are concatenated and passed through a 1x1 projection. Returns [HW x K].
inline Tensor seg_logits(const ModelGraph& g, const Tensor& image,
                         ForwardHooks* hooks = nullptr) {
    if (g.head_kind != HeadKind::Segmentation) throw UsageError("model has no segmentation head");
    std::vector<Tensor> feats = stage_features(g, image, hooks);
    const std::size_t h0 = image.dim(1), w0 = image.dim(2);
    Tensor fused;
    std::size_t stride = 1;
    for (std::size_t s = 0; s < feats.size(); ++s) {
        stride *= g.cfg.patch[s];
        Tensor up = upsample_nearest(feats[s], stride);
        if (up.dim(1) != h0 || up.dim(2) != w0)
            throw ShapeError("seg head: upsampled features do not match input resolution");
        fused = (s == 0) ? up : concat_chan(fused, up);
    }
    return affine(to_tokens(fused), g.head_w, g.head_b);
}

// Class logits from pooled final-stage features. Returns [K].
inline Tensor cls_logits(const ModelGraph& g, const Tensor& image,
                         ForwardHooks* hooks = nullptr) {
    if (g.head_kind != HeadKind::Classification)
        throw UsageError("model has no classification head");
    std::vector<Tensor> feats = stage_features(g, image, hooks);
    return affine(gap2d(feats.back()), g.head_w, g.head_b);
}

// ---------------------------------------------------------------------------
// Freeze contract
// ---------------------------------------------------------------------------

// Values of every tensor marked frozen at snapshot time.
struct FreezeSnapshot {
    std::vector<std::pair<std::string, std::vector<double>>> values;
};

inline FreezeSnapshot take_freeze_snapshot(const ModelGraph& g) {
    FreezeSnapshot s;
    for (const auto& p : g.params)
        if (p.frozen) s.values.emplace_back(p.name, p.tensor.data());
    return s;
}

inline bool freeze_check(const ModelGraph& g, const FreezeSnapshot& snapshot) {
    for (const auto& [name, data] : snapshot.values) {
        const ParamEntry& p = g.find(name);
        if (p.tensor.data() != data) return false;
    }
    return true;
}

} // namespace adaroute
