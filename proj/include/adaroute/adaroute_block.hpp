#pragma once

#include <memory>
#include <string>
#include <vector>

#include "adaroute/expert_center.hpp"
#include "adaroute/router.hpp"
#include "adaroute/tensor.hpp"

namespace adaroute {

enum class MixLayout { SequentialRes, SequentialNoRes, Parallel };

inline MixLayout parse_layout(const std::string& s) {
    if (s == "sequential_res") return MixLayout::SequentialRes;
    if (s == "sequential_nores") return MixLayout::SequentialNoRes;
    if (s == "parallel") return MixLayout::Parallel;
    throw ConfigError("unknown layout: " + s);
}

inline std::string layout_name(MixLayout l) {
    switch (l) {
        case MixLayout::SequentialRes: return "sequential_res";
        case MixLayout::SequentialNoRes: return "sequential_nores";
        case MixLayout::Parallel: return "parallel";
    }
    return "?";
}

enum class AdapterNonlinearity { Gelu, None };

inline AdapterNonlinearity parse_nonlinearity(const std::string& s) {
    if (s == "gelu") return AdapterNonlinearity::Gelu;
    if (s == "none") return AdapterNonlinearity::None;
    throw ConfigError("unknown nonlinearity: " + s);
}

// One adapter instance: a router bound to a (possibly shared) expert center
// plus the spatially-varying aggregation (SA) projection.
struct AdaRouteModule {
    std::shared_ptr<ExpertCenter> center;
    RouterParams router;
    Tensor sa_w; // [latent x n_kernels] 1x1 projection
    Tensor sa_b; // [n_kernels]
    MixLayout layout = MixLayout::SequentialRes;
    bool use_sa = true;
    AdapterNonlinearity nonlinearity = AdapterNonlinearity::Gelu;
    std::size_t top_k = 0; // 0 = dense routing
    bool top_k_renormalize = true;
    long static_gate = -1; // >= 0 pins every head to one-hot(static_gate % M)

    // Input-agnostic one-hot gates (the classical static-adapter control).
    GatingVectors static_gates() const {
        const std::size_t m = center->capacity;
        Tensor onehot = Tensor::zeros({m});
        onehot(static_cast<std::size_t>(static_gate) % m) = 1.0;
        GatingVectors g;
        g.g1 = onehot;
        g.g2 = onehot;
        for (std::size_t i = 0; i < center->kernel_sizes.size(); ++i) g.spatial.push_back(onehot);
        return g;
    }

    std::vector<Tensor> trainable_local() const {
        std::vector<Tensor> out = router.trainable();
        out.push_back(sa_w);
        out.push_back(sa_b);
        return out;
    }
};

inline AdaRouteModule init_adaroute_module(std::shared_ptr<ExpertCenter> center,
                                           std::size_t router_hidden, InitStrategy strategy,
                                           std::uint64_t seed) {
    AdaRouteModule m;
    m.center = std::move(center);
    const std::size_t n_kernels = m.center->kernel_sizes.size();
    m.router = init_router(m.center->channels, router_hidden, m.center->capacity, n_kernels,
                           strategy, mix_seed(seed, 0x90a7e2));
    Rng rng(mix_seed(seed, 0x5a11));
    m.sa_w = Tensor::zeros({m.center->latent, n_kernels}, true);
    fill_init(m.sa_w, strategy, m.center->latent, rng);
    m.sa_b = Tensor::zeros({n_kernels}, true);
    return m;
}

// Per-position 1x1 projection latent -> n_scales followed by a softmax over
// the scale logits; each returned map is [H x W] and the maps sum to one at
// every position.
inline std::vector<Tensor> sa_maps(const Tensor& u, const Tensor& sa_w, const Tensor& sa_b) {
    const std::size_t latent = u.dim(0), h = u.dim(1), w = u.dim(2);
    Tensor u_hwc = transpose2d(reshape(u, {latent, h * w}));
    Tensor probs = softmax_rows(affine(u_hwc, sa_w, sa_b)); // [HW x n]
    std::vector<Tensor> maps;
    for (std::size_t i = 0; i < sa_b.dim(0); ++i)
        maps.push_back(reshape(slice_cols(probs, i, i + 1), {h, w}));
    return maps;
}

// Multi-scale depthwise mixing of the latent feature. Kernel sizes ascend;
// with a single kernel the SA stage is bypassed (nothing to weight across).
inline Tensor multiscale_mix(const Tensor& z, const std::vector<Tensor>& kernels,
                             MixLayout layout, bool use_sa, const Tensor& sa_w,
                             const Tensor& sa_b) {
    if (kernels.empty()) throw ConfigError("multiscale_mix: no kernels");
    for (std::size_t i = 1; i < kernels.size(); ++i)
        if (kernels[i].dim(1) <= kernels[i - 1].dim(1))
            throw ConfigError("multiscale_mix: kernels must ascend in size");

    std::vector<Tensor> ys;
    switch (layout) {
        case MixLayout::SequentialRes: {
            Tensor cur = z;
            for (const auto& k : kernels) {
                cur = add(dwconv2d(cur, k), cur);
                ys.push_back(cur);
            }
            break;
        }
        case MixLayout::SequentialNoRes: {
            Tensor cur = z;
            for (const auto& k : kernels) {
                cur = dwconv2d(cur, k);
                ys.push_back(cur);
            }
            break;
        }
        case MixLayout::Parallel: {
            for (const auto& k : kernels) ys.push_back(add(dwconv2d(z, k), z));
            break;
        }
    }

    if (ys.size() == 1) return ys[0];

    Tensor total = ys[0];
    for (std::size_t i = 1; i < ys.size(); ++i) total = add(total, ys[i]);

    if (!use_sa) return scale(total, 1.0 / static_cast<double>(ys.size()));

    std::vector<Tensor> maps = sa_maps(total, sa_w, sa_b);
    Tensor out = scale_by_map(ys[0], maps[0]);
    for (std::size_t i = 1; i < ys.size(); ++i)
        out = add(out, scale_by_map(ys[i], maps[i]));
    return out;
}

// Adapter forward with externally supplied gates (the routing path is
// bypassed; used for static one-hot composition and tests).
inline Tensor adaroute_forward_with_gates(const Tensor& x, const AdaRouteModule& m,
                                          const GatingVectors& gates,
                                          const ExpertCenter* center_override = nullptr) {
    const ExpertCenter& c = center_override ? *center_override : *m.center;
    if (x.ndim() != 3 || x.dim(0) != c.channels)
        throw ShapeError("adaroute_forward: input " + shape_str(x.shape()) +
                         " vs center channels " + std::to_string(c.channels));
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);

    auto [w_down, w_up] = compose_channel_weights(c, gates.g1, gates.g2);
    std::vector<Tensor> kernels = compose_spatial_kernels(c, gates.spatial);

    Tensor x_hwc = transpose2d(reshape(x, {C, H * W}));
    Tensor z = reshape(transpose2d(matmul(x_hwc, w_down)), {c.latent, H, W});

    const bool sa = m.use_sa && kernels.size() > 1;
    Tensor mixed = multiscale_mix(z, kernels, m.layout, sa, m.sa_w, m.sa_b);

    Tensor activated =
        (m.nonlinearity == AdapterNonlinearity::Gelu) ? gelu(mixed) : mixed;

    Tensor a_hwc = transpose2d(reshape(activated, {c.latent, H * W}));
    Tensor delta = reshape(transpose2d(matmul(a_hwc, w_up)), {C, H, W});
    return add(x, delta);
}

// Full adapter: route the input, compose dynamic weights, mix, project back,
// add the residual. Output shape equals input shape.
inline Tensor adaroute_forward(const Tensor& x, const AdaRouteModule& m,
                               const ExpertCenter* center_override = nullptr) {
    GatingVectors gates =
        m.static_gate >= 0 ? m.static_gates() : route(x, m.router);
    gates = sparsify_gates(gates, m.top_k, m.top_k_renormalize);
    return adaroute_forward_with_gates(x, m, gates, center_override);
}

} // namespace adaroute
