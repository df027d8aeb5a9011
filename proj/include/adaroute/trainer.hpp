#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "adaroute/backbone.hpp"
#include "adaroute/tensor.hpp"

namespace adaroute {

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay (decay applied to matrices only).
// ---------------------------------------------------------------------------

struct AdamWParams {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

class AdamW {
public:
    AdamW() = default;
    AdamW(std::vector<Tensor> params, AdamWParams hp) : hp_(hp), params_(std::move(params)) {
        for (const Tensor& p : params_) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
            decay_.push_back(p.ndim() >= 2); // biases and gains are 1-D
        }
    }

    // One update from the gradients populated by the last backward pass.
    // lr_scale multiplies the base learning rate (schedules).
    void step(double lr_scale = 1.0) {
        ++step_;
        const double bc1 = 1.0 - std::pow(hp_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(hp_.beta2, static_cast<double>(step_));
        const double lr = hp_.lr * lr_scale;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            if (!p.has_grad())
                throw UsageError("adamw_step: missing gradient for a trainable tensor");
            const auto& g = p.grad();
            auto& m = m_[i];
            auto& v = v_[i];
            auto& d = p.data();
            const double wd = decay_[i] ? hp_.weight_decay : 0.0;
            for (std::size_t j = 0; j < d.size(); ++j) {
                m[j] = hp_.beta1 * m[j] + (1.0 - hp_.beta1) * g[j];
                v[j] = hp_.beta2 * v[j] + (1.0 - hp_.beta2) * g[j] * g[j];
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                d[j] -= lr * (mhat / (std::sqrt(vhat) + hp_.eps) + wd * d[j]);
            }
        }
    }

    std::size_t step_count() const { return step_; }
    const AdamWParams& hyper() const { return hp_; }
    std::size_t n_params() const { return params_.size(); }

    // moment access for checkpointing
    std::vector<double>& moment1(std::size_t i) { return m_[i]; }
    std::vector<double>& moment2(std::size_t i) { return v_[i]; }
    const std::vector<double>& moment1(std::size_t i) const { return m_[i]; }
    const std::vector<double>& moment2(std::size_t i) const { return v_[i]; }
    void set_step_count(std::size_t s) { step_ = s; }

private:
    AdamWParams hp_;
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    std::vector<bool> decay_;
    std::size_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

enum class TaskKind { BlobSeg, StripeCls };

inline TaskKind parse_task(const std::string& s) {
    if (s == "blob_seg") return TaskKind::BlobSeg;
    if (s == "stripe_cls") return TaskKind::StripeCls;
    throw ConfigError("unknown task: " + s);
}

inline std::string task_name(TaskKind k) {
    return k == TaskKind::BlobSeg ? "blob_seg" : "stripe_cls";
}

struct TaskSpec {
    TaskKind kind = TaskKind::BlobSeg;
    std::size_t n_classes = 3;
    std::size_t image_size = 16;
    std::size_t in_channels = 3;
    std::uint64_t seed = 1;

    void validate() const {
        if (image_size < 8) throw ConfigError("task: image size must be >= 8");
        if (n_classes < 2) throw ConfigError("task: need at least two classes");
    }
};

// One labelled example. Segmentation targets are per-pixel (row-major HW),
// classification targets hold a single entry.
struct TaskSample {
    Tensor image; // [C x S x S]
    std::vector<int> target;
};

// Deterministic function of (task, index): the same pair always yields the
// same sample, which keeps training runs replayable from any step.
inline TaskSample make_sample(const TaskSpec& task, std::uint64_t index) {
    task.validate();
    Rng rng(mix_seed(task.seed, 0xda7a0000 + index));
    const std::size_t s = task.image_size;
    TaskSample out;
    out.image = Tensor::zeros({task.in_channels, s, s});
    auto& img = out.image.data();

    if (task.kind == TaskKind::BlobSeg) {
        out.target.assign(s * s, 0);
        for (double& v : img) v = rng.normal(0.0, 0.3);

        const std::size_t n_shapes = 1 + rng.uniform_index(3);
        for (std::size_t i = 0; i < n_shapes; ++i) {
            const int cls = 1 + static_cast<int>(rng.uniform_index(task.n_classes - 1));
            const bool circle = rng.uniform() < 0.5;
            const std::size_t half = 2 + rng.uniform_index(s / 4);
            const std::size_t cy = half + rng.uniform_index(s - 2 * half);
            const std::size_t cx = half + rng.uniform_index(s - 2 * half);
            const double freq = 2.0 * M_PI / 4.0; // 4-pixel stripe period
            const double phase = rng.uniform(0.0, 2.0 * M_PI);
            for (std::size_t y = 0; y < s; ++y)
                for (std::size_t x = 0; x < s; ++x) {
                    const double dy = static_cast<double>(y) - static_cast<double>(cy);
                    const double dx = static_cast<double>(x) - static_cast<double>(cx);
                    const bool inside =
                        circle ? (dy * dy + dx * dx <=
                                  static_cast<double>(half) * static_cast<double>(half))
                               : (std::abs(dy) <= static_cast<double>(half) &&
                                  std::abs(dx) <= static_cast<double>(half));
                    if (!inside) continue;
                    out.target[y * s + x] = cls;
                    // shapes share a brightness cue; the class is carried by
                    // the stripe orientation inside the shape
                    const double coord = (cls % 2 == 1) ? static_cast<double>(x)
                                                        : static_cast<double>(y);
                    const double stripe = 1.2 * std::sin(freq * coord + phase);
                    for (std::size_t c = 0; c < task.in_channels; ++c)
                        img[(c * s + y) * s + x] += 1.0 + stripe;
                }
        }
    } else {
        const int cls = static_cast<int>(rng.uniform_index(task.n_classes));
        out.target.assign(1, cls);
        const double theta =
            M_PI * static_cast<double>(cls) / static_cast<double>(task.n_classes);
        const double freq = 2.0 * M_PI * 3.0 / static_cast<double>(s);
        const double phase = rng.uniform(0.0, 2.0 * M_PI);
        for (std::size_t c = 0; c < task.in_channels; ++c)
            for (std::size_t y = 0; y < s; ++y)
                for (std::size_t x = 0; x < s; ++x) {
                    const double t = std::cos(theta) * static_cast<double>(x) +
                                     std::sin(theta) * static_cast<double>(y);
                    img[(c * s + y) * s + x] =
                        std::sin(freq * t + phase) + rng.normal(0.0, 0.25);
                }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// Mean IoU over classes, ignoring classes absent from both maps.
inline double miou(const std::vector<int>& pred, const std::vector<int>& target,
                   std::size_t n_classes) {
    if (pred.size() != target.size()) throw ShapeError("miou: size mismatch");
    for (int v : pred)
        if (v < 0 || static_cast<std::size_t>(v) >= n_classes)
            throw UsageError("miou: class index out of range");
    for (int v : target)
        if (v < 0 || static_cast<std::size_t>(v) >= n_classes)
            throw UsageError("miou: class index out of range");
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < n_classes; ++c) {
        std::size_t inter = 0, uni = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const bool p = pred[i] == static_cast<int>(c);
            const bool t = target[i] == static_cast<int>(c);
            if (p && t) ++inter;
            if (p || t) ++uni;
        }
        if (uni == 0) continue; // class absent from both
        total += static_cast<double>(inter) / static_cast<double>(uni);
        ++counted;
    }
    return counted == 0 ? 0.0 : total / static_cast<double>(counted);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainHyper {
    std::size_t steps = 2000;
    std::size_t batch = 8;
    AdamWParams adamw;
    std::string schedule = "cosine"; // or "constant"
    std::size_t total_steps = 0;     // schedule horizon; 0 = steps
    std::size_t eval_every = 200;
    std::size_t eval_batches = 4;
    bool memorize = false; // reuse the first batch every step (overfit runs)
};

struct StepRecord {
    std::size_t step;
    double loss;
    double lr_scale;
};

struct EvalRecord {
    std::size_t step;
    double metric;
};

struct TrainReport {
    std::vector<StepRecord> steps;
    std::vector<EvalRecord> evals;
    double initial_metric = 0.0;
    double final_metric = 0.0;
};

namespace detail {

constexpr std::uint64_t kEvalIndexOffset = 1ull << 40; // held-out sample stream

inline Tensor batch_loss(const ModelGraph& g, const TaskSpec& task,
                         const std::vector<TaskSample>& batch) {
    Tensor acc;
    for (const TaskSample& sample : batch) {
        Tensor logits;
        std::vector<int> targets;
        if (task.kind == TaskKind::BlobSeg) {
            logits = seg_logits(g, sample.image);
            targets = sample.target;
        } else {
            logits = reshape(cls_logits(g, sample.image), {1, g.n_classes});
            targets = sample.target;
        }
        Tensor l = cross_entropy_mean(logits, targets);
        acc = acc.defined() ? add(acc, l) : l;
    }
    return scale(acc, 1.0 / static_cast<double>(batch.size()));
}

} // namespace detail

inline std::vector<TaskSample> make_batch(const TaskSpec& task, std::size_t batch,
                                          std::uint64_t first_index) {
    std::vector<TaskSample> out;
    for (std::size_t i = 0; i < batch; ++i)
        out.push_back(make_sample(task, first_index + i));
    return out;
}

// Held-out metric: mIoU for segmentation, accuracy for classification.
inline double evaluate(const ModelGraph& g, const TaskSpec& task, std::size_t n_batches,
                       std::size_t batch) {
    NoGradGuard ng;
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t b = 0; b < n_batches; ++b) {
        auto samples =
            make_batch(task, batch, detail::kEvalIndexOffset + b * batch);
        for (const TaskSample& sample : samples) {
            if (task.kind == TaskKind::BlobSeg) {
                Tensor logits = seg_logits(g, sample.image);
                const std::size_t hw = logits.dim(0), k = logits.dim(1);
                std::vector<int> pred(hw);
                for (std::size_t p = 0; p < hw; ++p) {
                    std::size_t best = 0;
                    for (std::size_t c = 1; c < k; ++c)
                        if (logits(p, c) > logits(p, best)) best = c;
                    pred[p] = static_cast<int>(best);
                }
                total += miou(pred, sample.target, task.n_classes);
            } else {
                Tensor logits = cls_logits(g, sample.image);
                std::size_t best = 0;
                for (std::size_t c = 1; c < logits.size(); ++c)
                    if (logits(c) > logits(best)) best = c;
                total += (static_cast<int>(best) == sample.target[0]) ? 1.0 : 0.0;
            }
            ++count;
        }
    }
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

// A resumable training session over the graph's trainable tensors.
class Trainer {
public:
    Trainer(ModelGraph& g, TaskSpec task, TrainHyper hp)
        : g_(g), task_(task), hp_(hp), opt_(g.trainable(), hp.adamw) {
        task_.validate();
        if (hp_.batch == 0) throw ConfigError("train: batch must be positive");
    }

    double lr_scale_at(std::size_t step) const {
        const std::size_t horizon = hp_.total_steps ? hp_.total_steps : hp_.steps;
        if (hp_.schedule == "constant" || horizon <= 1) return 1.0;
        if (hp_.schedule != "cosine") throw ConfigError("unknown schedule: " + hp_.schedule);
        const double t = static_cast<double>(step) / static_cast<double>(horizon);
        return 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, t)));
    }

    // Runs n more steps (bounded by hp.steps overall) and returns the report.
    TrainReport run(std::size_t n_steps) {
        TrainReport report;
        report.initial_metric = evaluate(g_, task_, hp_.eval_batches, hp_.batch);
        if (step_done_ == 0)
            report.evals.push_back({0, report.initial_metric});
        const std::size_t until = std::min(hp_.steps, step_done_ + n_steps);
        while (step_done_ < until) {
            const std::size_t step = step_done_;
            const std::uint64_t first_index =
                hp_.memorize ? 0 : static_cast<std::uint64_t>(step) * hp_.batch;
            auto batch = make_batch(task_, hp_.batch, first_index);
            Tape::active().reset();
            Tensor loss = detail::batch_loss(g_, task_, batch);
            const double loss_v = loss.data()[0];
            if (!std::isfinite(loss_v))
                throw NumericError("training diverged at step " + std::to_string(step));
            backward(loss);
            const double scale = lr_scale_at(step);
            opt_.step(scale);
            ++step_done_;
            report.steps.push_back({step_done_, loss_v, scale});
            if (hp_.eval_every && (step_done_ % hp_.eval_every == 0 || step_done_ == hp_.steps))
                report.evals.push_back(
                    {step_done_, evaluate(g_, task_, hp_.eval_batches, hp_.batch)});
        }
        report.final_metric = evaluate(g_, task_, hp_.eval_batches, hp_.batch);
        return report;
    }

    AdamW& optimizer() { return opt_; }
    const AdamW& optimizer() const { return opt_; }
    std::size_t steps_done() const { return step_done_; }
    void set_steps_done(std::size_t s) { step_done_ = s; }

private:
    ModelGraph& g_;
    TaskSpec task_;
    TrainHyper hp_;
    AdamW opt_;
    std::size_t step_done_ = 0;
};

} // namespace adaroute
