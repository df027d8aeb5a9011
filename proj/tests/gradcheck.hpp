#pragma once

// Finite-difference gradient oracle (test-only). Independent of the tape:
// the forward pass is re-evaluated under NoGradGuard for each perturbation.

#include <cmath>
#include <functional>
#include <vector>

#include "adaroute/tensor.hpp"

namespace gradcheck {

// Central finite differences of a scalar-valued forward closure with respect
// to each element of each leaf, compared against reverse-mode gradients.
// Returns the worst elementwise relative error, with the denominator clamped
// at 1 so near-zero gradients are compared absolutely.
inline double max_rel_err(const std::function<adaroute::Tensor()>& forward,
                          std::vector<adaroute::Tensor> leaves, double h = 1e-5) {
    using adaroute::NoGradGuard;
    using adaroute::Tape;
    using adaroute::Tensor;

    Tape::active().reset();
    Tensor loss = forward();
    adaroute::backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (auto& l : leaves)
        analytic.push_back(l.has_grad() ? l.grad() : std::vector<double>(l.size(), 0.0));

    double worst = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        for (std::size_t i = 0; i < leaf.size(); ++i) {
            const double orig = leaf.data()[i];
            double fp, fm;
            {
                NoGradGuard ng;
                leaf.data()[i] = orig + h;
                fp = forward().data()[0];
                leaf.data()[i] = orig - h;
                fm = forward().data()[0];
                leaf.data()[i] = orig;
            }
            const double fd = (fp - fm) / (2.0 * h);
            const double an = analytic[li][i];
            const double err =
                std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

} // namespace gradcheck
