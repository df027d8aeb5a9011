#pragma once

#include <cmath>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "adaroute/backbone.hpp"
#include "adaroute/tensor.hpp"

namespace adaroute {

// ---------------------------------------------------------------------------
// Linear centered kernel alignment
// ---------------------------------------------------------------------------

// CKA between [n x d1] and [n x d2] feature matrices (rows are samples).
// Computed from the n x n Gram matrices of the column-centered features:
//   ||Yc' Xc||_F^2 = tr(Kx Ky),  ||Xc' Xc||_F = sqrt(tr(Kx Kx)).
// Zero-variance inputs are defined as similarity 0 (with a warning).
inline double linear_cka(const Tensor& x, const Tensor& y) {
    if (x.ndim() != 2 || y.ndim() != 2 || x.dim(0) != y.dim(0))
        throw ShapeError("linear_cka: need matching sample counts, got " +
                         shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    const std::size_t n = x.dim(0);
    if (n < 2) throw ShapeError("linear_cka: need at least two samples");

    auto center_gram = [n](const Tensor& m) {
        const std::size_t d = m.dim(1);
        std::vector<double> centered(n * d);
        for (std::size_t j = 0; j < d; ++j) {
            double mu = 0.0;
            for (std::size_t i = 0; i < n; ++i) mu += m(i, j);
            mu /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) centered[i * d + j] = m(i, j) - mu;
        }
        std::vector<double> gram(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < d; ++k)
                    acc += centered[i * d + k] * centered[j * d + k];
                gram[i * n + j] = acc;
                gram[j * n + i] = acc;
            }
        return gram;
    };

    const std::vector<double> kx = center_gram(x);
    const std::vector<double> ky = center_gram(y);
    double hsic_xy = 0.0, hsic_xx = 0.0, hsic_yy = 0.0;
    for (std::size_t i = 0; i < n * n; ++i) {
        hsic_xy += kx[i] * ky[i];
        hsic_xx += kx[i] * kx[i];
        hsic_yy += ky[i] * ky[i];
    }
    const double denom = std::sqrt(hsic_xx) * std::sqrt(hsic_yy);
    if (denom <= 0.0) {
        std::cerr << "linear_cka: zero-variance input, similarity defined as 0\n";
        return 0.0;
    }
    return hsic_xy / denom;
}

struct CKAMatrix {
    std::size_t n_layers = 0;
    std::vector<double> values; // row-major n_layers x n_layers
    std::vector<std::string> labels;

    double at(std::size_t i, std::size_t j) const { return values[i * n_layers + j]; }
};

// Pairwise CKA of every block's post-adapter output over the probe inputs.
inline CKAMatrix cka_matrix(const ModelGraph& g, const std::vector<Tensor>& probes) {
    if (probes.size() < 2) throw UsageError("cka_matrix: need at least two probe inputs");
    NoGradGuard ng;
    std::vector<Tensor> layer_features; // [n_probes x d] per layer
    std::size_t n_layers = 0;
    std::vector<std::vector<double>> rows_per_layer;
    for (const Tensor& probe : probes) {
        std::vector<Tensor> feats;
        ForwardHooks hooks;
        hooks.block_features = &feats;
        stage_features(g, probe, &hooks);
        if (n_layers == 0) {
            n_layers = feats.size();
            rows_per_layer.assign(n_layers, {});
        }
        for (std::size_t l = 0; l < feats.size(); ++l)
            rows_per_layer[l].insert(rows_per_layer[l].end(), feats[l].data().begin(),
                                     feats[l].data().end());
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
        const std::size_t d = rows_per_layer[l].size() / probes.size();
        layer_features.push_back(
            Tensor::from_data({probes.size(), d}, std::move(rows_per_layer[l])));
    }

    CKAMatrix m;
    m.n_layers = n_layers;
    m.values.assign(n_layers * n_layers, 0.0);
    for (std::size_t l = 0; l < n_layers; ++l) m.labels.push_back("block" + std::to_string(l));
    for (std::size_t i = 0; i < n_layers; ++i)
        for (std::size_t j = i; j < n_layers; ++j) {
            const double v = linear_cka(layer_features[i], layer_features[j]);
            m.values[i * n_layers + j] = v;
            m.values[j * n_layers + i] = v;
        }
    return m;
}

// ---------------------------------------------------------------------------
// Effective receptive field
// ---------------------------------------------------------------------------

struct ERFMap {
    std::size_t height = 0, width = 0;
    std::vector<double> values; // max-normalized, non-negative

    double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }

    std::size_t support_size(double threshold) const {
        std::size_t n = 0;
        for (double v : values)
            if (v > threshold) ++n;
        return n;
    }
};

// Gradient of the center output unit (summed over channels) with respect to
// the input, |grad| accumulated over probes and input channels, then
// max-normalized.
inline ERFMap erf_map(const std::function<Tensor(const Tensor&)>& forward, Shape input_shape,
                      std::size_t n_probes, std::uint64_t seed) {
    if (input_shape.size() != 3) throw ShapeError("erf_map: input must be CxHxW");
    const std::size_t h = input_shape[1], w = input_shape[2];
    ERFMap map;
    map.height = h;
    map.width = w;
    map.values.assign(h * w, 0.0);

    Rng rng(mix_seed(seed, 0xe7f));
    for (std::size_t p = 0; p < n_probes; ++p) {
        Tape::active().reset();
        Tensor x = rand_normal(input_shape, rng, 0.0, 1.0, true);
        Tensor y = forward(x);
        if (y.ndim() != 3) throw ShapeError("erf_map: tapped output must be CxHxW");
        Tensor mask = Tensor::zeros(y.shape());
        for (std::size_t c = 0; c < y.dim(0); ++c) mask(c, y.dim(1) / 2, y.dim(2) / 2) = 1.0;
        backward(sum(mul(y, mask)));
        const auto& gx = x.grad();
        for (std::size_t c = 0; c < input_shape[0]; ++c)
            for (std::size_t i = 0; i < h * w; ++i) map.values[i] += std::abs(gx[c * h * w + i]);
    }
    double mx = 0.0;
    for (double v : map.values) mx = std::max(mx, v);
    if (mx > 0.0)
        for (double& v : map.values) v /= mx;
    return map;
}

// ERF of a model's block output (layer = block index; npos-1 for the last).
inline ERFMap erf_map_model(const ModelGraph& g, std::size_t layer, Shape input_shape,
                            std::size_t n_probes, std::uint64_t seed) {
    return erf_map(
        [&](const Tensor& x) {
            std::vector<Tensor> feats;
            ForwardHooks hooks;
            hooks.block_features = &feats;
            stage_features(g, x, &hooks);
            if (layer >= feats.size()) throw UsageError("erf_map: layer out of range");
            return feats[layer];
        },
        std::move(input_shape), n_probes, seed);
}

// ---------------------------------------------------------------------------
// Expert activation maps
// ---------------------------------------------------------------------------

enum class GateHead { G1, G2, GA, GB, GC };

inline GateHead parse_gate_head(const std::string& s) {
    if (s == "G1") return GateHead::G1;
    if (s == "G2") return GateHead::G2;
    if (s == "GA") return GateHead::GA;
    if (s == "GB") return GateHead::GB;
    if (s == "GC") return GateHead::GC;
    throw ConfigError("unknown gate head: " + s);
}

struct ActivationMap {
    std::size_t n_rows = 0;  // adapter sites in the stage, layer order
    std::size_t capacity = 0;
    std::vector<double> values; // row-major n_rows x capacity

    double at(std::size_t r, std::size_t m) const { return values[r * capacity + m]; }
};

// Mean gate distribution of one head over the probe images, one row per
// adapter site of the chosen stage.
inline ActivationMap expert_activation_map(const ModelGraph& g, const std::vector<Tensor>& images,
                                           GateHead head, std::size_t stage) {
    if (!g.adapters_inserted) throw UsageError("expert_activation_map: no adapters");
    if (stage >= g.cfg.n_stages()) throw ConfigError("expert_activation_map: bad stage");
    if (images.empty()) throw UsageError("expert_activation_map: no probe images");

    std::vector<std::size_t> stage_sites;
    for (std::size_t i = 0; i < g.site_stage.size(); ++i)
        if (g.site_stage[i] == stage) stage_sites.push_back(i);
    if (stage_sites.empty()) throw UsageError("expert_activation_map: stage has no adapters");

    NoGradGuard ng;
    ActivationMap map;
    map.n_rows = stage_sites.size();
    map.capacity = g.sites[stage_sites[0]].center->capacity;
    map.values.assign(map.n_rows * map.capacity, 0.0);

    for (const Tensor& img : images) {
        std::vector<GatingVectors> gates;
        ForwardHooks hooks;
        hooks.gates = &gates;
        stage_features(g, img, &hooks);
        for (std::size_t r = 0; r < stage_sites.size(); ++r) {
            const GatingVectors& gv = gates[stage_sites[r]];
            const Tensor* gate = nullptr;
            switch (head) {
                case GateHead::G1: gate = &gv.g1; break;
                case GateHead::G2: gate = &gv.g2; break;
                case GateHead::GA: gate = gv.spatial.size() > 0 ? &gv.spatial[0] : nullptr; break;
                case GateHead::GB: gate = gv.spatial.size() > 1 ? &gv.spatial[1] : nullptr; break;
                case GateHead::GC: gate = gv.spatial.size() > 2 ? &gv.spatial[2] : nullptr; break;
            }
            if (!gate) throw ConfigError("expert_activation_map: head not present");
            for (std::size_t m = 0; m < map.capacity; ++m)
                map.values[r * map.capacity + m] += (*gate)(m);
        }
    }
    const double inv = 1.0 / static_cast<double>(images.size());
    for (double& v : map.values) v *= inv;
    return map;
}

// ---------------------------------------------------------------------------
// Parameter audit
// ---------------------------------------------------------------------------

struct AuditItem {
    std::string component; // centers | routers | sa | head
    std::string tensor;
    std::size_t count = 0;
};

struct ParamAudit {
    std::vector<AuditItem> items;
    std::size_t centers_total = 0;
    std::size_t routers_total = 0;
    std::size_t sa_total = 0;
    std::size_t head_total = 0;
    std::size_t grand_total = 0;
    double paper_target_millions = 0.0; // 0 when not a published configuration
    std::vector<std::string> assumptions;
};

struct ArchSpec {
    std::string name;
    BackboneStyle style = BackboneStyle::SwinLike;
    std::vector<std::size_t> depths;
    std::vector<std::size_t> dims;
    double paper_target_millions = 0.0;
};

inline ArchSpec published_arch(const std::string& name) {
    if (name == "swin-b")
        return {name, BackboneStyle::SwinLike, {2, 2, 18, 2}, {128, 256, 512, 1024}, 5.2};
    if (name == "swin-l")
        return {name, BackboneStyle::SwinLike, {2, 2, 18, 2}, {192, 384, 768, 1536}, 7.3};
    if (name == "convnext-b")
        return {name, BackboneStyle::ConvNextLike, {3, 3, 27, 3}, {128, 256, 512, 1024}, 6.5};
    if (name == "convnext-l")
        return {name, BackboneStyle::ConvNextLike, {3, 3, 27, 3}, {192, 384, 768, 1536}, 9.2};
    throw ConfigError("unknown architecture: " + name);
}

// Closed-form enumeration of adapter parameters for an architecture and
// adapter configuration; mirrors insert_adapters exactly. head_inputs > 0
// adds a linear head of that input width.
inline ParamAudit audit_params(const ArchSpec& arch, const AdapterConfig& acfg,
                               std::size_t head_inputs = 0, std::size_t head_classes = 0) {
    ParamAudit audit;
    audit.paper_target_millions = arch.paper_target_millions;
    const std::size_t spb = sites_per_block(arch.style);
    const std::size_t nk = acfg.kernel_sizes.size();
    std::size_t kernel_area = 0;
    for (std::size_t k : acfg.kernel_sizes) kernel_area += k * k;

    for (std::size_t s = 0; s < arch.depths.size(); ++s) {
        const std::size_t c = arch.dims[s];
        const std::size_t latent =
            acfg.latent_per_stage.empty() ? acfg.latent : acfg.latent_per_stage.at(s);
        std::vector<std::size_t> site_blocks;
        for (std::size_t b = 0; b < arch.depths[s]; ++b)
            for (std::size_t r = 0; r < spb; ++r) site_blocks.push_back(b);
        const std::size_t group = acfg.group_size == 0 ? site_blocks.size() : acfg.group_size;
        auto groups = partition_scope(site_blocks, group);

        std::vector<std::size_t> site_capacity(site_blocks.size());
        for (std::size_t gi = 0; gi < groups.size(); ++gi) {
            const std::size_t m = std::max<std::size_t>(
                1, static_cast<std::size_t>(std::llround(
                       acfg.m_multiplier * static_cast<double>(groups[gi].n_blocks))));
            const std::string cp =
                "stage" + std::to_string(s) + ".center" + std::to_string(gi);
            const std::size_t e_pair = 2 * m * c * latent;
            const std::size_t sp = m * latent * kernel_area;
            audit.items.push_back({"centers", cp + ".e_down/e_up", e_pair});
            audit.items.push_back({"centers", cp + ".spatial", sp});
            audit.centers_total += e_pair + sp;
            for (std::size_t site : groups[gi].sites) site_capacity[site] = m;
        }

        std::size_t routers = 0, sa = 0;
        for (std::size_t local = 0; local < site_blocks.size(); ++local) {
            const std::size_t m = site_capacity[local];
            routers += c * acfg.router_hidden + acfg.router_hidden +
                       (2 + nk) * (acfg.router_hidden * m + m);
            sa += latent * nk + nk;
        }
        audit.items.push_back(
            {"routers", "stage" + std::to_string(s) + ".routers", routers});
        audit.items.push_back({"sa", "stage" + std::to_string(s) + ".sa", sa});
        audit.routers_total += routers;
        audit.sa_total += sa;
    }

    if (head_inputs > 0 && head_classes > 0) {
        audit.head_total = head_inputs * head_classes + head_classes;
        audit.items.push_back({"head", "head.w/b", audit.head_total});
    }

    audit.grand_total =
        audit.centers_total + audit.routers_total + audit.sa_total + audit.head_total;

    audit.assumptions = {
        "router: one shared hidden affine (with bias) feeding 2+" + std::to_string(nk) +
            " parallel heads (with biases)",
        "SA projection: latent x " + std::to_string(nk) + " weights plus " +
            std::to_string(nk) + " biases per adapter site",
        "adapter sites per block: " + std::to_string(spb) + " (" + style_name(arch.style) + ")",
        "M per center = round(multiplier * blocks in scope), minimum 1",
        "no adapters in patch-embedding layers",
        "no normalization layers or output scaling inside the adapter",
        "latent width applied globally across stages unless overridden",
    };
    return audit;
}

} // namespace adaroute
