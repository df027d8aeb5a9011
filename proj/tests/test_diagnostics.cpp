#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "adaroute/config.hpp"
#include "adaroute/diagnostics.hpp"

using namespace adaroute;

namespace {

// independent d x d route: ||Yc'Xc||_F^2 / (||Xc'Xc||_F ||Yc'Yc||_F)
double naive_cka(const Tensor& x, const Tensor& y) {
    auto center = [](const Tensor& m) {
        const std::size_t n = m.dim(0), d = m.dim(1);
        std::vector<double> c(n * d);
        for (std::size_t j = 0; j < d; ++j) {
            double mu = 0.0;
            for (std::size_t i = 0; i < n; ++i) mu += m(i, j);
            mu /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) c[i * d + j] = m(i, j) - mu;
        }
        return c;
    };
    const std::size_t n = x.dim(0), d1 = x.dim(1), d2 = y.dim(1);
    auto xc = center(x);
    auto yc = center(y);
    auto frob2_cross = [&](const std::vector<double>& a, std::size_t da,
                           const std::vector<double>& b, std::size_t db) {
        // || B' A ||_F^2 with A [n x da], B [n x db]
        double total = 0.0;
        for (std::size_t i = 0; i < db; ++i)
            for (std::size_t j = 0; j < da; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < n; ++k) acc += b[k * db + i] * a[k * da + j];
                total += acc * acc;
            }
        return total;
    };
    const double num = frob2_cross(xc, d1, yc, d2);
    const double dx = std::sqrt(frob2_cross(xc, d1, xc, d1));
    const double dy = std::sqrt(frob2_cross(yc, d2, yc, d2));
    return num / (dx * dy);
}

} // namespace

TEST_CASE("linear_cka self similarity and scaling/orthogonal invariances") {
    Rng rng(7);
    Tensor x = rand_normal({12, 6}, rng);
    REQUIRE(std::abs(linear_cka(x, x) - 1.0) <= 1e-9);

    for (double alpha : {-2.5, 0.3}) {
        Tensor ax = Tensor::zeros({12, 6});
        for (std::size_t i = 0; i < x.size(); ++i) ax.data()[i] = alpha * x.data()[i];
        REQUIRE(std::abs(linear_cka(x, ax) - 1.0) <= 1e-9);
    }

    // orthogonal Q from Gram-Schmidt on a random matrix
    const std::size_t d = 6;
    std::vector<std::vector<double>> q(d, std::vector<double>(d));
    for (auto& row : q)
        for (double& v : row) v = rng.normal();
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += q[i][k] * q[j][k];
            for (std::size_t k = 0; k < d; ++k) q[i][k] -= dot * q[j][k];
        }
        double norm = 0.0;
        for (double v : q[i]) norm += v * v;
        norm = std::sqrt(norm);
        for (double& v : q[i]) v /= norm;
    }
    Tensor xq = Tensor::zeros({12, 6});
    for (std::size_t i = 0; i < 12; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k) acc += x(i, k) * q[k][j];
            xq(i, j) = acc;
        }
    REQUIRE(std::abs(linear_cka(x, xq) - 1.0) <= 1e-9);
}

TEST_CASE("linear_cka matches the naive Gram oracle") {
    Rng rng(11);
    Tensor x = rand_normal({20, 8}, rng);
    Tensor y = rand_normal({20, 8}, rng);
    const double got = linear_cka(x, y);
    const double want = naive_cka(x, y);
    REQUIRE(std::abs(got - want) <= 1e-9);
    REQUIRE(got >= 0.0);
    REQUIRE(got <= 1.0);
}

TEST_CASE("linear_cka zero-variance input is defined as zero") {
    Rng rng(13);
    Tensor x = Tensor::full({6, 4}, 3.25);
    Tensor y = rand_normal({6, 4}, rng);
    REQUIRE(linear_cka(x, y) == 0.0);
}

TEST_CASE("cka_matrix of an identity-block network is all ones") {
    BackboneConfig cfg;
    cfg.style = BackboneStyle::ConvNextLike;
    cfg.depths = {3};
    cfg.dims = {8};
    cfg.patch = {1};
    ModelGraph g = build_backbone(cfg, 3);
    // zero the second pointwise projection: every block becomes x + 0
    for (auto& s : g.stages)
        for (auto& b : s.convnext_blocks)
            for (double& v : b.pw_w2.data()) v = 0.0;
    Rng rng(4);
    std::vector<Tensor> probes;
    for (int i = 0; i < 3; ++i) probes.push_back(rand_normal({3, 8, 8}, rng));
    CKAMatrix m = cka_matrix(g, probes);
    REQUIRE(m.n_layers == 3);
    for (double v : m.values) REQUIRE(std::abs(v - 1.0) <= 1e-9);
}

TEST_CASE("cka_matrix is symmetric with unit diagonal") {
    RunConfig rc;
    rc.seed = 5;
    rc.backbone.depths = {2, 2};
    rc.backbone.dims = {16, 32};
    rc.adapter.latent = 4;
    rc.adapter.router_hidden = 4;
    rc.task.image_size = 8;
    ModelGraph g = build_model(rc);
    Rng rng(6);
    std::vector<Tensor> probes;
    for (int i = 0; i < 4; ++i) probes.push_back(rand_normal({3, 8, 8}, rng));
    CKAMatrix m = cka_matrix(g, probes);
    REQUIRE(m.n_layers == 4);
    for (std::size_t i = 0; i < m.n_layers; ++i) {
        REQUIRE(std::abs(m.at(i, i) - 1.0) <= 1e-9);
        for (std::size_t j = 0; j < m.n_layers; ++j)
            REQUIRE(std::abs(m.at(i, j) - m.at(j, i)) <= 1e-9);
    }
}

TEST_CASE("erf of the identity map is a single center pixel") {
    ERFMap m = erf_map([](const Tensor& x) { return x; }, {2, 9, 9}, 4, 21);
    REQUIRE(m.support_size(0.0) == 1);
    REQUIRE(m.at(4, 4) == 1.0);
}

TEST_CASE("erf of one 3x3 depthwise conv covers exactly the 3x3 patch") {
    Rng rng(23);
    Tensor k = rand_normal({2, 3, 3}, rng);
    ERFMap m = erf_map([&](const Tensor& x) { return dwconv2d(x, k); }, {2, 9, 9}, 4, 24);
    for (std::size_t y = 0; y < 9; ++y)
        for (std::size_t x = 0; x < 9; ++x) {
            const bool inside = y >= 3 && y <= 5 && x >= 3 && x <= 5;
            if (inside)
                REQUIRE(m.at(y, x) > 0.0);
            else
                REQUIRE(m.at(y, x) == 0.0);
        }
}

TEST_CASE("erf support of a local pipeline stays within its reach") {
    Rng rng(25);
    Tensor k3 = rand_normal({2, 3, 3}, rng);
    Tensor k5 = rand_normal({2, 5, 5}, rng);
    // one-sided reach 1 + 2 = 3 -> support inside the 7x7 center patch
    ERFMap m = erf_map([&](const Tensor& x) { return dwconv2d(dwconv2d(x, k3), k5); },
                       {2, 11, 11}, 4, 26);
    for (std::size_t y = 0; y < 11; ++y)
        for (std::size_t x = 0; x < 11; ++x) {
            const bool inside = y >= 2 && y <= 8 && x >= 2 && x <= 8;
            if (!inside) REQUIRE(m.at(y, x) == 0.0);
        }
    REQUIRE(m.support_size(0.0) > 9);
}

TEST_CASE("expert_activation_map single image equals that image's gates") {
    RunConfig rc;
    rc.seed = 31;
    rc.backbone.depths = {2, 2};
    rc.backbone.dims = {16, 32};
    rc.adapter.latent = 4;
    rc.adapter.router_hidden = 4;
    rc.task.image_size = 8;
    ModelGraph g = build_model(rc);
    Tensor img = make_sample(rc.task, 900).image;

    ActivationMap m = expert_activation_map(g, {img}, GateHead::G2, 1);
    // collect the same gates straight from a hooked forward
    std::vector<GatingVectors> gates;
    ForwardHooks hooks;
    hooks.gates = &gates;
    {
        NoGradGuard ng;
        stage_features(g, img, &hooks);
    }
    std::vector<std::size_t> stage_sites;
    for (std::size_t i = 0; i < g.site_stage.size(); ++i)
        if (g.site_stage[i] == 1) stage_sites.push_back(i);
    REQUIRE(m.n_rows == stage_sites.size());
    for (std::size_t r = 0; r < m.n_rows; ++r)
        for (std::size_t e = 0; e < m.capacity; ++e)
            REQUIRE(m.at(r, e) == gates[stage_sites[r]].g2(e));
}

TEST_CASE("expert_activation_map over 2n images is the mean of two n-image maps") {
    RunConfig rc;
    rc.seed = 33;
    rc.backbone.depths = {2, 2};
    rc.backbone.dims = {16, 32};
    rc.adapter.latent = 4;
    rc.adapter.router_hidden = 4;
    rc.task.image_size = 8;
    ModelGraph g = build_model(rc);
    std::vector<Tensor> a, b, both;
    for (std::uint64_t i = 0; i < 3; ++i) a.push_back(make_sample(rc.task, 100 + i).image);
    for (std::uint64_t i = 0; i < 3; ++i) b.push_back(make_sample(rc.task, 200 + i).image);
    both = a;
    both.insert(both.end(), b.begin(), b.end());

    ActivationMap ma = expert_activation_map(g, a, GateHead::G1, 0);
    ActivationMap mb = expert_activation_map(g, b, GateHead::G1, 0);
    ActivationMap mboth = expert_activation_map(g, both, GateHead::G1, 0);
    for (std::size_t i = 0; i < mboth.values.size(); ++i)
        REQUIRE(mboth.values[i] ==
                Catch::Approx(0.5 * (ma.values[i] + mb.values[i])).margin(1e-12));

    // rows are simplex vectors under softmax routing
    for (std::size_t r = 0; r < mboth.n_rows; ++r) {
        double s = 0.0;
        for (std::size_t e = 0; e < mboth.capacity; ++e) s += mboth.at(r, e);
        REQUIRE(std::abs(s - 1.0) <= 1e-9);
    }
}

TEST_CASE("expert_activation_map depends on the probe set") {
    RunConfig rc;
    rc.seed = 35;
    rc.backbone.depths = {2, 2};
    rc.backbone.dims = {16, 32};
    rc.adapter.latent = 4;
    rc.adapter.router_hidden = 4;
    rc.task.image_size = 8;
    ModelGraph g = build_model(rc);
    std::vector<Tensor> small, large;
    for (std::uint64_t i = 0; i < 20; ++i) small.push_back(make_sample(rc.task, i).image);
    for (std::uint64_t i = 0; i < 160; ++i) large.push_back(make_sample(rc.task, i).image);
    ActivationMap ms = expert_activation_map(g, small, GateHead::G1, 1);
    ActivationMap ml = expert_activation_map(g, large, GateHead::G1, 1);
    REQUIRE(ms.values != ml.values);
}

TEST_CASE("audit grand total equals byte-level enumeration on the toy model") {
    RunConfig rc;
    rc.seed = 41;
    rc.backbone.depths = {2, 2};
    rc.backbone.dims = {16, 32};
    rc.adapter.latent = 8;
    rc.adapter.router_hidden = 4;
    rc.task.image_size = 8;
    ModelGraph g = build_model(rc);

    std::size_t live = 0;
    for (const Tensor& t : g.trainable()) live += t.size();

    ArchSpec arch{"toy", rc.backbone.style, rc.backbone.depths, rc.backbone.dims, 0.0};
    std::size_t head_inputs = 0;
    for (std::size_t d : rc.backbone.dims) head_inputs += d;
    ParamAudit audit = audit_params(arch, rc.adapter, head_inputs, rc.task.n_classes);
    REQUIRE(audit.grand_total == live);

    // grouped centers still audit exactly
    RunConfig rg = rc;
    rg.adapter.group_size = 2;
    ModelGraph g2 = build_model(rg);
    std::size_t live2 = 0;
    for (const Tensor& t : g2.trainable()) live2 += t.size();
    ParamAudit audit2 = audit_params(arch, rg.adapter, head_inputs, rg.task.n_classes);
    REQUIRE(audit2.grand_total == live2);
}

TEST_CASE("audit of the published Swin-B configuration") {
    AdapterConfig a;
    a.latent = 128;
    a.router_hidden = 24;
    ParamAudit audit = audit_params(published_arch("swin-b"), a);

    // independent closed-form enumeration
    const std::vector<std::size_t> depths = {2, 2, 18, 2};
    const std::vector<std::size_t> dims = {128, 256, 512, 1024};
    std::size_t centers = 0, routers = 0, sa = 0;
    for (std::size_t s = 0; s < 4; ++s) {
        const std::size_t m = depths[s], c = dims[s], sites = 2 * depths[s];
        centers += 2 * m * c * 128 + m * 128 * (9 + 25 + 49);
        routers += sites * (c * 24 + 24 + 5 * (24 * m + m));
        sa += sites * (128 * 3 + 3);
    }
    REQUIRE(audit.centers_total == centers);
    REQUIRE(audit.routers_total == routers);
    REQUIRE(audit.sa_total == sa);
    REQUIRE(audit.grand_total == centers + routers + sa);
    REQUIRE(audit.grand_total >= 3800000);
    REQUIRE(audit.grand_total <= 5500000);
    REQUIRE(audit.paper_target_millions == 5.2);
    REQUIRE_FALSE(audit.assumptions.empty());

    // doubling the latent width doubles the channel-expert subtotal exactly
    AdapterConfig a2 = a;
    a2.latent = 256;
    ParamAudit audit2 = audit_params(published_arch("swin-b"), a2);
    auto e_subtotal = [](const ParamAudit& au) {
        std::size_t n = 0;
        for (const auto& item : au.items)
            if (item.component == "centers" &&
                item.tensor.find("e_down/e_up") != std::string::npos)
                n += item.count;
        return n;
    };
    REQUIRE(e_subtotal(audit2) == 2 * e_subtotal(audit));
}

TEST_CASE("audit rejects unknown architectures") {
    REQUIRE_THROWS_AS(published_arch("resnet-50"), ConfigError);
}
