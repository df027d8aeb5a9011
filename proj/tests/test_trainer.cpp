#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "adaroute/trainer.hpp"

using namespace adaroute;

namespace {

ModelGraph make_toy_model(TaskKind kind, std::uint64_t seed, std::size_t image = 8,
                          std::size_t n_classes = 3, bool adapters = true) {
    BackboneConfig cfg;
    cfg.style = BackboneStyle::SwinLike;
    cfg.depths = {2, 2};
    cfg.dims = {16, 32};
    cfg.patch = {2, 2};
    ModelGraph g = build_backbone(cfg, seed);
    if (adapters) {
        AdapterConfig a;
        a.latent = 4;
        a.router_hidden = 4;
        insert_adapters(g, a, mix_seed(seed, 1));
    }
    attach_head(g, kind == TaskKind::BlobSeg ? HeadKind::Segmentation : HeadKind::Classification,
                n_classes, mix_seed(seed, 2));
    (void)image;
    return g;
}

} // namespace

TEST_CASE("adamw leaves parameters unchanged for zero grad and zero decay") {
    Tensor p = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
    AdamWParams hp;
    hp.weight_decay = 0.0;
    AdamW opt({p}, hp);
    p.ensure_zero_grad();
    opt.step();
    REQUIRE(p.data() == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("adamw first step matches the hand-computed update") {
    Tensor p = Tensor::from_data({1}, {1.0}, true);
    AdamWParams hp;
    hp.lr = 0.1;
    hp.weight_decay = 0.0;
    AdamW opt({p}, hp);
    p.ensure_zero_grad();
    p.grad()[0] = 1.0;
    opt.step();
    // mhat = vhat = 1 at step one, so p = 1 - 0.1 / (1 + eps)
    const double expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
    REQUIRE(p.data()[0] == Catch::Approx(expect).margin(1e-15));
}

TEST_CASE("adamw decoupled decay shrinks matrices but not biases") {
    Tensor w = Tensor::from_data({1, 1}, {2.0}, true);
    Tensor b = Tensor::from_data({1}, {2.0}, true);
    AdamWParams hp;
    hp.lr = 0.5;
    hp.weight_decay = 0.1;
    AdamW opt({w, b}, hp);
    w.ensure_zero_grad();
    b.ensure_zero_grad();
    opt.step();
    REQUIRE(w.data()[0] == Catch::Approx(2.0 - 0.5 * 0.1 * 2.0).margin(1e-15));
    REQUIRE(b.data()[0] == 2.0);
}

TEST_CASE("adamw requires populated gradients") {
    Tensor p = Tensor::from_data({1}, {1.0}, true);
    AdamW opt({p}, {});
    REQUIRE_THROWS_AS(opt.step(), UsageError);
}

TEST_CASE("make_sample is deterministic and blob labels cover background + foreground") {
    TaskSpec task;
    task.kind = TaskKind::BlobSeg;
    task.n_classes = 3;
    task.image_size = 16;
    task.seed = 77;
    for (std::uint64_t idx : {0ull, 5ull, 123ull}) {
        TaskSample a = make_sample(task, idx);
        TaskSample b = make_sample(task, idx);
        REQUIRE(a.image.data() == b.image.data());
        REQUIRE(a.target == b.target);

        bool has_bg = false, has_fg = false;
        for (int t : a.target) {
            if (t == 0) has_bg = true;
            if (t > 0) has_fg = true;
        }
        REQUIRE(has_bg);
        REQUIRE(has_fg);
    }
}

TEST_CASE("stripe task is separable by orientation energy") {
    TaskSpec task;
    task.kind = TaskKind::StripeCls;
    task.n_classes = 2; // 0 and 90 degrees
    task.image_size = 16;
    task.seed = 99;
    std::size_t correct = 0;
    const std::size_t n = 200;
    for (std::uint64_t i = 0; i < n; ++i) {
        TaskSample s = make_sample(task, i);
        const std::size_t sz = task.image_size;
        double ex = 0.0, ey = 0.0;
        for (std::size_t y = 0; y < sz; ++y)
            for (std::size_t x = 0; x + 1 < sz; ++x)
                ex += std::abs(s.image(0, y, x + 1) - s.image(0, y, x));
        for (std::size_t y = 0; y + 1 < sz; ++y)
            for (std::size_t x = 0; x < sz; ++x)
                ey += std::abs(s.image(0, y + 1, x) - s.image(0, y, x));
        // class 0 varies along x (high ex); class 1 along y
        const int pred = ex > ey ? 0 : 1;
        if (pred == s.target[0]) ++correct;
    }
    REQUIRE(static_cast<double>(correct) / n >= 0.95);
}

TEST_CASE("miou handles exact, inverted, and hand-computed confusion cases") {
    std::vector<int> t = {1, 1, 1, 1, 1, 0, 0, 0};
    REQUIRE(miou(t, t, 2) == 1.0);

    std::vector<int> inv(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) inv[i] = 1 - t[i];
    REQUIRE(miou(inv, t, 2) == 0.0);

    // class 1: TP=3, FP=1, FN=2 -> IoU 3/6; class 0: 2/5
    std::vector<int> pred = {1, 1, 1, 0, 0, 1, 0, 0};
    REQUIRE(miou(pred, t, 2) == Catch::Approx((0.5 + 0.4) / 2.0).margin(1e-15));

    REQUIRE_THROWS_AS(miou({0, 2}, {0, 1}, 2), UsageError);
}

TEST_CASE("zero-step training reports only initial metrics") {
    ModelGraph g = make_toy_model(TaskKind::BlobSeg, 31);
    TaskSpec task;
    task.kind = TaskKind::BlobSeg;
    task.n_classes = 3;
    task.image_size = 8;
    task.seed = 31;
    TrainHyper hp;
    hp.steps = 0;
    hp.batch = 2;
    hp.eval_batches = 1;
    Trainer trainer(g, task, hp);
    TrainReport r = trainer.run(0);
    REQUIRE(r.steps.empty());
    REQUIRE(r.final_metric == r.initial_metric);
}

TEST_CASE("zero learning rate keeps the memorized-batch loss constant") {
    ModelGraph g = make_toy_model(TaskKind::BlobSeg, 33);
    TaskSpec task;
    task.kind = TaskKind::BlobSeg;
    task.n_classes = 3;
    task.image_size = 8;
    task.seed = 33;
    TrainHyper hp;
    hp.steps = 5;
    hp.batch = 2;
    hp.eval_every = 0;
    hp.eval_batches = 1;
    hp.memorize = true;
    hp.adamw.lr = 0.0;
    Trainer trainer(g, task, hp);
    TrainReport r = trainer.run(5);
    REQUIRE(r.steps.size() == 5);
    for (const auto& s : r.steps) REQUIRE(s.loss == r.steps[0].loss);
}

TEST_CASE("training is bitwise deterministic under identical seeds") {
    auto run_once = [] {
        ModelGraph g = make_toy_model(TaskKind::BlobSeg, 35);
        TaskSpec task;
        task.kind = TaskKind::BlobSeg;
        task.n_classes = 3;
        task.image_size = 8;
        task.seed = 35;
        TrainHyper hp;
        hp.steps = 15;
        hp.batch = 2;
        hp.eval_every = 0;
        hp.eval_batches = 1;
        Trainer trainer(g, task, hp);
        TrainReport r = trainer.run(15);
        std::pair<std::vector<double>, std::vector<double>> out;
        for (const auto& s : r.steps) out.first.push_back(s.loss);
        for (const auto& p : g.params)
            out.second.insert(out.second.end(), p.tensor.data().begin(), p.tensor.data().end());
        return out;
    };
    auto a = run_once();
    auto b = run_once();
    REQUIRE(a.first == b.first);
    REQUIRE(a.second == b.second);
}

TEST_CASE("four-sample memorization reaches a tenth of the initial loss") {
    ModelGraph g = make_toy_model(TaskKind::BlobSeg, 37);
    TaskSpec task;
    task.kind = TaskKind::BlobSeg;
    task.n_classes = 3;
    task.image_size = 8;
    task.seed = 37;
    TrainHyper hp;
    hp.steps = 500;
    hp.batch = 4;
    hp.eval_every = 0;
    hp.eval_batches = 1;
    hp.memorize = true;
    hp.adamw.lr = 3e-3;
    hp.schedule = "constant";
    Trainer trainer(g, task, hp);
    TrainReport r = trainer.run(500);
    const double initial = r.steps.front().loss;
    double best = initial;
    for (const auto& s : r.steps) best = std::min(best, s.loss);
    INFO("initial " << initial << " best " << best);
    REQUIRE(best < 0.1 * initial);
}

TEST_CASE("divergent training aborts with a numeric error") {
    ModelGraph g = make_toy_model(TaskKind::BlobSeg, 39);
    TaskSpec task;
    task.kind = TaskKind::BlobSeg;
    task.n_classes = 3;
    task.image_size = 8;
    task.seed = 39;
    TrainHyper hp;
    hp.steps = 50;
    hp.batch = 2;
    hp.eval_every = 0;
    hp.eval_batches = 1;
    hp.adamw.lr = 1e9;
    hp.schedule = "constant";
    Trainer trainer(g, task, hp);
    bool prev = finite_checks();
    finite_checks() = false; // let the loss itself go non-finite
    REQUIRE_THROWS_AS(trainer.run(50), NumericError);
    finite_checks() = prev;
    Tape::active().reset();
}
