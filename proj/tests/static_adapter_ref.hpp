#pragma once

// Independent reference for a classical static adapter: fixed weight
// matrices and kernels, raw nested loops, no tape. Used as the oracle the
// one-hot-routed dynamic block must reproduce.

#include <cmath>
#include <cstddef>
#include <vector>

namespace static_ref {

struct StaticAdapter {
    std::size_t channels = 0, latent = 0, height = 0, width = 0;
    std::vector<double> w_down;                   // [C][latent]
    std::vector<double> w_up;                     // [latent][C]
    std::vector<std::size_t> kernel_sizes;        // ascending odd
    std::vector<std::vector<double>> kernels;     // each [latent][k][k]
    std::vector<double> sa_w;                     // [latent][n]
    std::vector<double> sa_b;                     // [n]
    bool use_sa = true;
    bool gelu_nonlinearity = true;

    static double gelu_scalar(double v) {
        const double u = 0.7978845608028654 * (v + 0.044715 * v * v * v);
        return 0.5 * v * (1.0 + std::tanh(u));
    }

    std::vector<double> dwconv(const std::vector<double>& in, std::size_t k,
                               const std::vector<double>& ker) const {
        std::vector<double> out(latent * height * width, 0.0);
        const long r = static_cast<long>(k / 2);
        for (std::size_t c = 0; c < latent; ++c)
            for (std::size_t y = 0; y < height; ++y)
                for (std::size_t x = 0; x < width; ++x) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < k; ++i)
                        for (std::size_t j = 0; j < k; ++j) {
                            const long yy = static_cast<long>(y) + static_cast<long>(i) - r;
                            const long xx = static_cast<long>(x) + static_cast<long>(j) - r;
                            if (yy < 0 || yy >= static_cast<long>(height) || xx < 0 ||
                                xx >= static_cast<long>(width))
                                continue;
                            acc += ker[(c * k + i) * k + j] *
                                   in[(c * height + static_cast<std::size_t>(yy)) * width +
                                      static_cast<std::size_t>(xx)];
                        }
                    out[(c * height + y) * width + x] = acc;
                }
        return out;
    }

    // sequential layout with residuals (the default pipeline)
    std::vector<double> forward(const std::vector<double>& x) const {
        const std::size_t hw = height * width;
        // per-position down projection
        std::vector<double> z(latent * hw, 0.0);
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t l = 0; l < latent; ++l) {
                double acc = 0.0;
                for (std::size_t c = 0; c < channels; ++c)
                    acc += x[c * hw + p] * w_down[c * latent + l];
                z[l * hw + p] = acc;
            }

        std::vector<std::vector<double>> ys;
        std::vector<double> cur = z;
        for (std::size_t ki = 0; ki < kernel_sizes.size(); ++ki) {
            std::vector<double> conv = dwconv(cur, kernel_sizes[ki], kernels[ki]);
            for (std::size_t i = 0; i < conv.size(); ++i) conv[i] += cur[i];
            ys.push_back(conv);
            cur = ys.back();
        }

        std::vector<double> mixed(latent * hw, 0.0);
        if (ys.size() == 1) {
            mixed = ys[0];
        } else if (!use_sa) {
            for (std::size_t i = 0; i < mixed.size(); ++i) {
                double acc = 0.0;
                for (const auto& y : ys) acc += y[i];
                mixed[i] = acc / static_cast<double>(ys.size());
            }
        } else {
            const std::size_t n = ys.size();
            for (std::size_t p = 0; p < hw; ++p) {
                std::vector<double> logits(n, 0.0);
                for (std::size_t s = 0; s < n; ++s) {
                    double acc = sa_b[s];
                    for (std::size_t l = 0; l < latent; ++l) {
                        double u = 0.0; // SA input is the plain sum of the scales
                        for (const auto& y : ys) u += y[l * hw + p];
                        acc += u * sa_w[l * n + s];
                    }
                    logits[s] = acc;
                }
                double mx = logits[0];
                for (double v : logits) mx = std::max(mx, v);
                double sum = 0.0;
                std::vector<double> e(n);
                for (std::size_t s = 0; s < n; ++s) {
                    e[s] = std::exp(logits[s] - mx);
                    sum += e[s];
                }
                for (std::size_t l = 0; l < latent; ++l) {
                    double acc = 0.0;
                    for (std::size_t s = 0; s < n; ++s)
                        acc += (e[s] / sum) * ys[s][l * hw + p];
                    mixed[l * hw + p] = acc;
                }
            }
        }

        if (gelu_nonlinearity)
            for (double& v : mixed) v = gelu_scalar(v);

        std::vector<double> out = x;
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t c = 0; c < channels; ++c) {
                double acc = 0.0;
                for (std::size_t l = 0; l < latent; ++l)
                    acc += mixed[l * hw + p] * w_up[l * channels + c];
                out[c * hw + p] += acc;
            }
        return out;
    }
};

} // namespace static_ref
