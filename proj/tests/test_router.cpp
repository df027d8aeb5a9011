#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "adaroute/router.hpp"
#include "gradcheck.hpp"

using namespace adaroute;

namespace {

RouterParams make_router(std::size_t channels, std::size_t hidden, std::size_t capacity,
                         std::uint64_t seed,
                         RouterActivation act = RouterActivation::Softmax) {
    RouterParams p = init_router(channels, hidden, capacity, 3, InitStrategy::KaimingNormal, seed);
    p.activation = act;
    return p;
}

} // namespace

TEST_CASE("route is invariant to spatial permutations of the input") {
    Rng rng(5);
    RouterParams p = make_router(4, 3, 5, 11);
    // dyadic values keep the pooled sum exact under any summation order
    Tensor x = Tensor::zeros({4, 3, 3});
    for (double& v : x.data()) v = static_cast<double>(rng.uniform_index(512)) / 256.0;
    Tensor perm = Tensor::zeros({4, 3, 3});
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t i = 0; i < 9; ++i)
            perm.data()[c * 9 + i] = x.data()[c * 9 + (8 - i)];
    GatingVectors a = route(x, p);
    GatingVectors b = route(perm, p);
    REQUIRE(a.g1.data() == b.g1.data());
    REQUIRE(a.g2.data() == b.g2.data());
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(a.spatial[i].data() == b.spatial[i].data());
}

TEST_CASE("zero router parameters give uniform gates") {
    RouterParams p = make_router(4, 3, 5, 11);
    for (Tensor t : p.trainable())
        for (double& v : t.data()) v = 0.0;
    Rng rng(6);
    Tensor x = rand_uniform({4, 3, 3}, rng);
    GatingVectors g = route(x, p);
    for (const Tensor& gate : g.all())
        for (double v : gate.data()) REQUIRE(v == Catch::Approx(0.2).margin(1e-15));
}

TEST_CASE("softmax gates lie on the simplex") {
    Rng rng(7);
    RouterParams p = make_router(4, 3, 6, 13);
    for (int rep = 0; rep < 10; ++rep) {
        Tensor x = rand_uniform({4, 4, 4}, rng, -2, 2);
        for (const Tensor& gate : route(x, p).all()) {
            double s = 0.0;
            for (double v : gate.data()) {
                REQUIRE(v >= 0.0);
                s += v;
            }
            REQUIRE(std::abs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("relu and sigmoid gate variants run without the simplex constraint") {
    Rng rng(8);
    Tensor x = rand_uniform({4, 3, 3}, rng);
    for (RouterActivation act : {RouterActivation::Relu, RouterActivation::Sigmoid}) {
        RouterParams p = make_router(4, 3, 5, 17, act);
        GatingVectors g = route(x, p);
        REQUIRE(g.g1.size() == 5);
        REQUIRE(g.spatial.size() == 3);
    }
}

TEST_CASE("route is input-dependent for generic parameters") {
    Rng rng(9);
    RouterParams p = make_router(4, 3, 5, 19);
    Tensor x1 = rand_uniform({4, 3, 3}, rng);
    Tensor x2 = rand_uniform({4, 3, 3}, rng);
    GatingVectors a = route(x1, p);
    GatingVectors b = route(x2, p);
    REQUIRE(a.g1.data() != b.g1.data());
}

TEST_CASE("route gradcheck wrt input and every router parameter") {
    Rng rng(10);
    RouterParams p = make_router(3, 3, 4, 23);
    Tensor x = rand_uniform({3, 3, 3}, rng, -1, 1, true);
    Tensor w1 = rand_uniform({4}, rng);
    Tensor w2 = rand_uniform({4}, rng);
    std::vector<Tensor> leaves = p.trainable();
    leaves.push_back(x);
    double err = gradcheck::max_rel_err(
        [&] {
            GatingVectors g = route(x, p);
            Tensor loss = add(sum(mul(g.g1, w1)), sum(mul(g.g2, w2)));
            for (const auto& s : g.spatial) loss = add(loss, sum(mul(s, w1)));
            return loss;
        },
        leaves);
    REQUIRE(err <= 1e-5);
}

TEST_CASE("top_k with K = M returns the input unchanged") {
    Rng rng(11);
    Tensor g = softmax(rand_uniform({6}, rng));
    Tensor out = top_k_sparsify(g, 6);
    REQUIRE(out.same_storage(g));
}

TEST_CASE("top_k renormalization arithmetic") {
    Tensor g = Tensor::from_data({3}, {0.5, 0.3, 0.2});
    Tensor out = top_k_sparsify(g, 2);
    REQUIRE(out(0) == Catch::Approx(0.625).margin(1e-15));
    REQUIRE(out(1) == Catch::Approx(0.375).margin(1e-15));
    REQUIRE(out(2) == 0.0);
}

TEST_CASE("top_k ties break toward the lower index") {
    Tensor g = Tensor::from_data({4}, {0.25, 0.25, 0.25, 0.25});
    Tensor out = top_k_sparsify(g, 2);
    REQUIRE(out(0) == Catch::Approx(0.5).margin(1e-15));
    REQUIRE(out(1) == Catch::Approx(0.5).margin(1e-15));
    REQUIRE(out(2) == 0.0);
    REQUIRE(out(3) == 0.0);
}

TEST_CASE("top_k property: support <= K, sum 1, idempotent, argmax kept") {
    Rng rng(12);
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t m = 2 + rng.uniform_index(7);
        Tensor g = softmax(rand_uniform({m}, rng, -3, 3));
        const std::size_t k = 1 + rng.uniform_index(m);
        Tensor out = top_k_sparsify(g, k);

        std::size_t support = 0;
        double s = 0.0;
        for (double v : out.data()) {
            if (v != 0.0) ++support;
            s += v;
        }
        REQUIRE(support <= k);
        REQUIRE(std::abs(s - 1.0) <= 1e-12);

        Tensor again = top_k_sparsify(out, k);
        for (std::size_t i = 0; i < m; ++i)
            REQUIRE(std::abs(again(i) - out(i)) <= 1e-12);

        auto argmax = [](const Tensor& t) {
            std::size_t best = 0;
            for (std::size_t i = 1; i < t.size(); ++i)
                if (t(i) > t(best)) best = i;
            return best;
        };
        REQUIRE(argmax(out) == argmax(g));
    }
}

TEST_CASE("top_k without renormalization just masks") {
    Tensor g = Tensor::from_data({3}, {0.5, 0.3, 0.2});
    Tensor out = top_k_sparsify(g, 2, false);
    REQUIRE(out(0) == 0.5);
    REQUIRE(out(1) == 0.3);
    REQUIRE(out(2) == 0.0);
}

TEST_CASE("top_k rejects K out of range") {
    Tensor g = Tensor::from_data({3}, {0.5, 0.3, 0.2});
    REQUIRE_THROWS_AS(top_k_sparsify(g, 0), ConfigError);
    REQUIRE_THROWS_AS(top_k_sparsify(g, 4), ConfigError);
}

TEST_CASE("top_k gradient is straight-through on survivors") {
    Tensor g = Tensor::from_data({3}, {0.5, 0.3, 0.2}, true);
    Tensor w = Tensor::from_data({3}, {1.0, 2.0, 4.0});
    backward(sum(mul(top_k_sparsify(g, 2), w)));
    REQUIRE(g.grad()[0] == 1.0);
    REQUIRE(g.grad()[1] == 2.0);
    REQUIRE(g.grad()[2] == 0.0);
}
