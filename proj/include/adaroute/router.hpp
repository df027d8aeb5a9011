#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "adaroute/expert_center.hpp"
#include "adaroute/tensor.hpp"

namespace adaroute {

enum class RouterActivation { Softmax, Relu, Sigmoid };

inline RouterActivation parse_router_activation(const std::string& s) {
    if (s == "softmax") return RouterActivation::Softmax;
    if (s == "relu") return RouterActivation::Relu;
    if (s == "sigmoid") return RouterActivation::Sigmoid;
    throw ConfigError("unknown router activation: " + s);
}

inline std::string router_activation_name(RouterActivation a) {
    switch (a) {
        case RouterActivation::Softmax: return "softmax";
        case RouterActivation::Relu: return "relu";
        case RouterActivation::Sigmoid: return "sigmoid";
    }
    return "?";
}

// Gating network: GAP -> shared hidden affine -> parallel per-head affines.
// Heads 0 and 1 gate the channel projections; the rest gate the spatial
// kernel pools (one per kernel size, three in the default configuration).
struct RouterParams {
    Tensor w_hidden; // [C x h]
    Tensor b_hidden; // [h]
    std::vector<Tensor> w_heads; // [h x M] each
    std::vector<Tensor> b_heads; // [M] each
    RouterActivation activation = RouterActivation::Softmax;

    std::size_t hidden_width() const { return b_hidden.dim(0); }
    std::size_t capacity() const { return b_heads.empty() ? 0 : b_heads[0].dim(0); }

    std::vector<Tensor> trainable() const {
        std::vector<Tensor> out = {w_hidden, b_hidden};
        for (std::size_t i = 0; i < w_heads.size(); ++i) {
            out.push_back(w_heads[i]);
            out.push_back(b_heads[i]);
        }
        return out;
    }
};

// The per-head expert-mixing distributions of one router invocation.
struct GatingVectors {
    Tensor g1, g2;               // channel down / up gates, length M
    std::vector<Tensor> spatial; // one gate per kernel size, length M

    std::vector<Tensor> all() const {
        std::vector<Tensor> v = {g1, g2};
        v.insert(v.end(), spatial.begin(), spatial.end());
        return v;
    }
};

inline RouterParams init_router(std::size_t channels, std::size_t hidden, std::size_t capacity,
                                std::size_t n_spatial_heads, InitStrategy strategy,
                                std::uint64_t seed) {
    if (hidden < 1) throw ConfigError("init_router: hidden width must be >= 1");
    RouterParams p;
    Rng rng(mix_seed(seed, 0x407e6));
    p.w_hidden = Tensor::zeros({channels, hidden}, true);
    fill_init(p.w_hidden, strategy, channels, rng);
    p.b_hidden = Tensor::zeros({hidden}, true);
    const std::size_t n_heads = 2 + n_spatial_heads;
    for (std::size_t i = 0; i < n_heads; ++i) {
        Tensor w = Tensor::zeros({hidden, capacity}, true);
        fill_init(w, strategy, hidden, rng);
        p.w_heads.push_back(w);
        p.b_heads.push_back(Tensor::zeros({capacity}, true));
    }
    return p;
}

namespace detail {

inline Tensor apply_gate_activation(const Tensor& logits, RouterActivation a) {
    switch (a) {
        case RouterActivation::Softmax: return softmax(logits);
        case RouterActivation::Relu: return relu(logits);
        case RouterActivation::Sigmoid: return sigmoid(logits);
    }
    throw ConfigError("route: bad activation");
}

} // namespace detail

// Produces all gating vectors from one shared hidden representation.
inline GatingVectors route(const Tensor& x, const RouterParams& p) {
    if (x.ndim() != 3 || x.dim(0) != p.w_hidden.dim(0))
        throw ShapeError("route: input " + shape_str(x.shape()) + " vs router channels " +
                         std::to_string(p.w_hidden.dim(0)));
    Tensor pooled = gap2d(x);
    Tensor hidden = affine(pooled, p.w_hidden, p.b_hidden);
    GatingVectors g;
    g.g1 = detail::apply_gate_activation(affine(hidden, p.w_heads[0], p.b_heads[0]), p.activation);
    g.g2 = detail::apply_gate_activation(affine(hidden, p.w_heads[1], p.b_heads[1]), p.activation);
    for (std::size_t i = 2; i < p.w_heads.size(); ++i)
        g.spatial.push_back(detail::apply_gate_activation(
            affine(hidden, p.w_heads[i], p.b_heads[i]), p.activation));
    return g;
}

// Keeps the K largest gate entries (ties broken by lower index) and zeroes
// the rest. Survivors are renormalized to sum 1 unless renormalize is false.
// K == M returns the input unchanged so the dense path is reproduced exactly.
// Gradient is straight-through on survivors, zero on dropped entries.
inline Tensor top_k_sparsify(const Tensor& g, std::size_t k, bool renormalize = true) {
    if (g.ndim() != 1) throw ShapeError("top_k_sparsify: expected a vector");
    const std::size_t m = g.dim(0);
    if (k < 1 || k > m)
        throw ConfigError("top_k_sparsify: K=" + std::to_string(k) + " out of range 1.." +
                          std::to_string(m));
    if (k == m) return g;

    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return g(a) > g(b); // stable: equal values keep lower index first
    });
    std::vector<bool> keep(m, false);
    double kept_sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        keep[order[i]] = true;
        kept_sum += g(order[i]);
    }

    Tensor out = Tensor::zeros({m});
    const double denom = (renormalize && kept_sum > 0.0) ? kept_sum : 1.0;
    for (std::size_t i = 0; i < m; ++i)
        if (keep[i]) out(i) = g(i) / denom;

    if (detail::want_record({&g})) {
        out.set_requires_grad(true);
        Tape::active().record({g, out}, [g, out, keep]() {
            const auto& go = out.grad();
            auto& gg = g.grad();
            for (std::size_t i = 0; i < go.size(); ++i)
                if (keep[i]) gg[i] += go[i];
        });
    }
    return out;
}

// Applies top-K sparsification to every head. k == 0 means dense routing.
inline GatingVectors sparsify_gates(const GatingVectors& g, std::size_t k, bool renormalize) {
    if (k == 0) return g;
    GatingVectors out;
    out.g1 = top_k_sparsify(g.g1, k, renormalize);
    out.g2 = top_k_sparsify(g.g2, k, renormalize);
    for (const auto& s : g.spatial) out.spatial.push_back(top_k_sparsify(s, k, renormalize));
    return out;
}

} // namespace adaroute
