#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "adaroute/tensor.hpp"

namespace adaroute {

enum class InitStrategy { TruncNormal, KaimingNormal, KaimingUniform };

inline InitStrategy parse_init(const std::string& s) {
    if (s == "trunc_normal") return InitStrategy::TruncNormal;
    if (s == "kaiming_normal") return InitStrategy::KaimingNormal;
    if (s == "kaiming_uniform") return InitStrategy::KaimingUniform;
    throw ConfigError("unknown init strategy: " + s);
}

inline std::string init_name(InitStrategy s) {
    switch (s) {
        case InitStrategy::TruncNormal: return "trunc_normal";
        case InitStrategy::KaimingNormal: return "kaiming_normal";
        case InitStrategy::KaimingUniform: return "kaiming_uniform";
    }
    return "?";
}

// Fills a tensor in place. fan_in scales the kaiming variants;
// trunc_normal is N(0, 0.02^2) truncated at +/- 2 sigma.
inline void fill_init(Tensor& t, InitStrategy strategy, std::size_t fan_in, Rng& rng) {
    switch (strategy) {
        case InitStrategy::TruncNormal:
            for (double& v : t.data()) v = rng.trunc_normal(0.0, 0.02);
            break;
        case InitStrategy::KaimingNormal: {
            const double std_ = std::sqrt(2.0 / static_cast<double>(fan_in));
            for (double& v : t.data()) v = rng.normal(0.0, std_);
            break;
        }
        case InitStrategy::KaimingUniform: {
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            for (double& v : t.data()) v = rng.uniform(-bound, bound);
            break;
        }
    }
}

// Stage-level pool of trainable experts. Channel experts come in
// down/up-projection pairs; spatial experts hold flattened depthwise
// convolution kernels, one pool per kernel size.
struct ExpertCenter {
    std::size_t capacity = 0; // M
    std::size_t channels = 0; // C
    std::size_t latent = 0;   // latent width, < C
    std::vector<std::size_t> kernel_sizes;

    Tensor e_down;               // [M x C x latent]
    Tensor e_up;                 // [M x latent x C]
    std::vector<Tensor> spatial; // [M x latent x K_i^2] per kernel size

    std::vector<std::size_t> scope; // adapter site ids sharing this center

    std::vector<Tensor> trainable() const {
        std::vector<Tensor> out = {e_down, e_up};
        out.insert(out.end(), spatial.begin(), spatial.end());
        return out;
    }

    // Same values, gradient tracking severed; used to freeze one adapter's
    // use of the center while others keep the live tensors.
    ExpertCenter detached() const {
        ExpertCenter c = *this;
        c.e_down = e_down.detached();
        c.e_up = e_up.detached();
        c.spatial.clear();
        for (const auto& s : spatial) c.spatial.push_back(s.detached());
        return c;
    }
};

// Input-conditioned weights synthesized from one routing pass.
struct DynamicWeights {
    Tensor w_down;               // [C x latent]
    Tensor w_up;                 // [latent x C]
    std::vector<Tensor> kernels; // [latent x K_i x K_i]
};

inline ExpertCenter init_center(std::size_t capacity, std::size_t channels, std::size_t latent,
                                std::vector<std::size_t> kernel_sizes, InitStrategy strategy,
                                std::uint64_t seed) {
    if (capacity < 1) throw ConfigError("init_center: capacity must be >= 1");
    if (latent < 1 || latent >= channels)
        throw ConfigError("init_center: latent width must satisfy 1 <= latent < channels (got " +
                          std::to_string(latent) + " vs " + std::to_string(channels) + ")");
    if (kernel_sizes.empty()) throw ConfigError("init_center: no kernel sizes");
    for (std::size_t i = 0; i < kernel_sizes.size(); ++i) {
        if (kernel_sizes[i] % 2 == 0)
            throw ConfigError("init_center: kernel sizes must be odd");
        if (i > 0 && kernel_sizes[i] <= kernel_sizes[i - 1])
            throw ConfigError("init_center: kernel sizes must be strictly ascending");
    }

    ExpertCenter c;
    c.capacity = capacity;
    c.channels = channels;
    c.latent = latent;
    c.kernel_sizes = kernel_sizes;

    Rng rng(mix_seed(seed, 0xce17e5));
    c.e_down = Tensor::zeros({capacity, channels, latent}, true);
    fill_init(c.e_down, strategy, channels, rng);
    c.e_up = Tensor::zeros({capacity, latent, channels}, true);
    fill_init(c.e_up, strategy, latent, rng);
    for (std::size_t k : kernel_sizes) {
        Tensor s = Tensor::zeros({capacity, latent, k * k}, true);
        fill_init(s, strategy, k * k, rng);
        c.spatial.push_back(s);
    }
    return c;
}

// W_down = sum_m g1[m] E_down[m], W_up = sum_m g2[m] E_up[m].
inline std::pair<Tensor, Tensor> compose_channel_weights(const ExpertCenter& c, const Tensor& g1,
                                                         const Tensor& g2) {
    return {mix_experts(c.e_down, g1), mix_experts(c.e_up, g2)};
}

// kernel_i = sum_m g_i[m] S_i[m], unflattened row-major to latent x K x K.
inline std::vector<Tensor> compose_spatial_kernels(const ExpertCenter& c,
                                                   const std::vector<Tensor>& gates) {
    if (gates.size() != c.spatial.size())
        throw ShapeError("compose_spatial_kernels: " + std::to_string(gates.size()) +
                         " gates for " + std::to_string(c.spatial.size()) + " pools");
    std::vector<Tensor> kernels;
    for (std::size_t i = 0; i < gates.size(); ++i) {
        const std::size_t k = c.kernel_sizes[i];
        kernels.push_back(reshape(mix_experts(c.spatial[i], gates[i]), {c.latent, k, k}));
    }
    return kernels;
}

// One contiguous group of adapter sites sharing a center.
struct ScopeGroup {
    std::vector<std::size_t> sites;
    std::size_t n_blocks = 0; // distinct backbone blocks covered
};

// Splits an ordered run of adapter sites into consecutive groups of
// `group_size` sites (last group keeps the remainder). site_blocks[i] is the
// backbone block index that site i is attached to; under the M = L policy a
// group's center gets one expert per distinct block it covers.
inline std::vector<ScopeGroup> partition_scope(const std::vector<std::size_t>& site_blocks,
                                               std::size_t group_size) {
    if (group_size == 0) throw ConfigError("partition_scope: group size must be positive");
    std::vector<ScopeGroup> groups;
    for (std::size_t start = 0; start < site_blocks.size(); start += group_size) {
        ScopeGroup g;
        const std::size_t end = std::min(start + group_size, site_blocks.size());
        std::size_t distinct = 0;
        for (std::size_t i = start; i < end; ++i) {
            g.sites.push_back(i);
            if (i == start || site_blocks[i] != site_blocks[i - 1]) ++distinct;
        }
        g.n_blocks = distinct;
        groups.push_back(std::move(g));
    }
    return groups;
}

struct CenterParamCount {
    std::size_t e_down = 0;
    std::size_t e_up = 0;
    std::vector<std::size_t> spatial;
    std::size_t total = 0;
};

inline CenterParamCount count_params(const ExpertCenter& c) {
    CenterParamCount n;
    n.e_down = c.capacity * c.channels * c.latent;
    n.e_up = c.capacity * c.latent * c.channels;
    n.total = n.e_down + n.e_up;
    for (std::size_t k : c.kernel_sizes) {
        n.spatial.push_back(c.capacity * c.latent * k * k);
        n.total += n.spatial.back();
    }
    return n;
}

} // namespace adaroute
