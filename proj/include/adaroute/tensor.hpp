#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "adaroute/errors.hpp"
#include "adaroute/rng.hpp"

namespace adaroute {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until backward touches this tensor
    bool requires_grad = false;
};

} // namespace detail

// Dense row-major tensor of 64-bit reals with an optional gradient slot.
// Copying a Tensor aliases the underlying storage (handle semantics).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return Tensor(std::move(shape), {}, requires_grad, /*fill*/ 0.0);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        return Tensor(std::move(shape), {}, requires_grad, value);
    }

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("from_data: " + shape_str(shape) + " does not hold " +
                             std::to_string(data.size()) + " values");
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(data);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t ndim() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t size() const { return impl_->data.size(); }

    // Tensor is a handle sharing its storage; const-ness of the handle is
    // shallow (as for shared_ptr), so accessors below are const-qualified.
    std::vector<double>& data() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) const { impl_->requires_grad = rg; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<double>& grad() const {
        if (impl_->grad.empty())
            throw UsageError("gradient requested but never populated by backward()");
        return impl_->grad;
    }
    void ensure_zero_grad() const { impl_->grad.assign(impl_->data.size(), 0.0); }
    void drop_grad() const { impl_->grad.clear(); }

    double& operator()(std::size_t i) const { return impl_->data[i]; }
    double& operator()(std::size_t i, std::size_t j) const {
        return impl_->data[i * impl_->shape[1] + j];
    }
    double& operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return impl_->data[(i * impl_->shape[1] + j) * impl_->shape[2] + k];
    }

    // Value copy with gradient tracking severed.
    Tensor detached() const {
        return from_data(impl_->shape, impl_->data, false);
    }

    // Value copy preserving requires_grad (fresh storage).
    Tensor clone() const {
        return from_data(impl_->shape, impl_->data, impl_->requires_grad);
    }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    const void* storage_id() const { return impl_.get(); }

private:
    Tensor(Shape shape, std::vector<double>, bool requires_grad, double fill) {
        impl_ = std::make_shared<detail::TensorImpl>();
        impl_->shape = std::move(shape);
        impl_->data.assign(shape_numel(impl_->shape), fill);
        impl_->requires_grad = requires_grad;
    }

    std::shared_ptr<detail::TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Tape: ordered record of executed ops, replayed in reverse by backward().
// One tape per thread; a graph lives for a single forward/backward pass.
// ---------------------------------------------------------------------------

class Tape {
public:
    static Tape& active() {
        thread_local Tape tape;
        return tape;
    }

    bool recording() const { return no_grad_depth_ == 0; }

    void record(std::vector<Tensor> involved, std::function<void()> backward_fn) {
        entries_.push_back({std::move(involved), std::move(backward_fn)});
    }

    std::size_t num_ops() const { return entries_.size(); }

    void reset() { entries_.clear(); }

    // Populates grad on every tensor reachable from `loss` that requires grad.
    // The graph is consumed: the tape is empty afterwards.
    void backward(const Tensor& loss) {
        if (!loss.defined() || loss.size() != 1)
            throw UsageError("backward: loss must be a scalar tensor");
        for (auto& e : entries_)
            for (auto& t : e.involved) t.ensure_zero_grad();
        Tensor seed = loss;
        seed.ensure_zero_grad();
        seed.grad()[0] = 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
        entries_.clear();
    }

private:
    struct Entry {
        std::vector<Tensor> involved;
        std::function<void()> fn;
    };
    std::vector<Entry> entries_;
    int no_grad_depth_ = 0;
    friend class NoGradGuard;
};

// Suspends tape recording for the current scope (evaluation passes).
class NoGradGuard {
public:
    NoGradGuard() { ++Tape::active().no_grad_depth_; }
    ~NoGradGuard() { --Tape::active().no_grad_depth_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline void backward(const Tensor& loss) { Tape::active().backward(loss); }

// NaN/Inf detection at op exit. Always on in debug builds; can be switched
// on in release builds (the trainer enables it when configured to).
inline bool& finite_checks() {
#ifdef NDEBUG
    static bool on = false;
#else
    static bool on = true;
#endif
    return on;
}

inline void check_finite(const Tensor& t, const char* op) {
    if (!finite_checks()) return;
    for (double v : t.data())
        if (!std::isfinite(v))
            throw NumericError(std::string(op) + ": non-finite value in output");
}

namespace detail {

inline bool want_record(std::initializer_list<const Tensor*> ins) {
    if (!Tape::active().recording()) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    const auto& A = a.data();
    const auto& B = b.data();
    auto& C = out.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) C[i * n + j] += av * B[p * n + j];
        }
    check_finite(out, "matmul");
    if (detail::want_record({&a, &b})) {
        out.set_requires_grad(true);
        Tape::active().record({a, b, out}, [a, b, out]() mutable {
            const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
            const auto& go = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                const auto& B = b.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * B[p * n + j];
                        ga[i * k + p] += acc;
                    }
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                const auto& A = a.data();
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t i = 0; i < m; ++i) {
                        const double av = A[i * k + p];
                        if (av == 0.0) continue;
                        for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * go[i * n + j];
                    }
            }
        });
    }
    return out;
}

// y = xW + b. x may be a vector [k] or a matrix [m x k]; b broadcasts over rows.
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.ndim() != 2 || b.ndim() != 1 || b.dim(0) != w.dim(1))
        throw ShapeError("affine: weight " + shape_str(w.shape()) + " and bias " +
                         shape_str(b.shape()) + " do not agree");
    const bool vec = (x.ndim() == 1);
    const std::size_t m = vec ? 1 : x.dim(0);
    const std::size_t k = vec ? x.dim(0) : x.dim(1);
    const std::size_t n = w.dim(1);
    if (k != w.dim(0))
        throw ShapeError("affine: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
    Tensor out = Tensor::zeros(vec ? Shape{n} : Shape{m, n});
    const auto& X = x.data();
    const auto& W = w.data();
    const auto& B = b.data();
    auto& Y = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) Y[i * n + j] = B[j];
        for (std::size_t p = 0; p < k; ++p) {
            const double xv = X[i * k + p];
            if (xv == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) Y[i * n + j] += xv * W[p * n + j];
        }
    }
    check_finite(out, "affine");
    if (detail::want_record({&x, &w, &b})) {
        out.set_requires_grad(true);
        Tape::active().record({x, w, b, out}, [x, w, b, out]() mutable {
            const bool vec = (x.ndim() == 1);
            const std::size_t m = vec ? 1 : x.dim(0);
            const std::size_t k = vec ? x.dim(0) : x.dim(1);
            const std::size_t n = w.dim(1);
            const auto& go = out.grad();
            if (x.requires_grad()) {
                auto& gx = x.grad();
                const auto& W = w.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * W[p * n + j];
                        gx[i * k + p] += acc;
                    }
            }
            if (w.requires_grad()) {
                auto& gw = w.grad();
                const auto& X = x.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double xv = X[i * k + p];
                        if (xv == 0.0) continue;
                        for (std::size_t j = 0; j < n; ++j) gw[p * n + j] += xv * go[i * n + j];
                    }
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
            }
        });
    }
    return out;
}

namespace detail {

template <class Bwd>
struct BinaryBackward {
    Tensor a, b, out;
    Bwd df;
    void operator()() const {
        const auto& go = out.grad();
        const auto& A = a.data();
        const auto& B = b.data();
        for (std::size_t i = 0; i < go.size(); ++i) {
            auto [da, db] = df(A[i], B[i]);
            if (a.requires_grad()) a.grad()[i] += da * go[i];
            if (b.requires_grad()) b.grad()[i] += db * go[i];
        }
    }
};

template <class Fwd, class Bwd>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name, Fwd f, Bwd df) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const auto& A = a.data();
    const auto& B = b.data();
    auto& Y = out.data();
    for (std::size_t i = 0; i < Y.size(); ++i) Y[i] = f(A[i], B[i]);
    check_finite(out, name);
    if (want_record({&a, &b})) {
        out.set_requires_grad(true);
        Tape::active().record({a, b, out}, BinaryBackward<Bwd>{a, b, out, df});
    }
    return out;
}

template <class Bwd>
struct UnaryBackward {
    Tensor x, out;
    Bwd df;
    void operator()() const {
        const auto& go = out.grad();
        auto& gx = x.grad();
        const auto& X = x.data();
        const auto& Y = out.data();
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += df(X[i], Y[i]) * go[i];
    }
};

template <class Fwd, class Bwd>
Tensor elementwise_unary(const Tensor& x, const char* name, Fwd f, Bwd df) {
    Tensor out = Tensor::zeros(x.shape());
    const auto& X = x.data();
    auto& Y = out.data();
    for (std::size_t i = 0; i < Y.size(); ++i) Y[i] = f(X[i]);
    check_finite(out, name);
    if (want_record({&x})) {
        out.set_requires_grad(true);
        Tape::active().record({x, out}, UnaryBackward<Bwd>{x, out, df});
    }
    return out;
}

} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary(a, b, "add",
        [](double x, double y) { return x + y; },
        [](double, double) { return std::pair<double, double>{1.0, 1.0}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary(a, b, "sub",
        [](double x, double y) { return x - y; },
        [](double, double) { return std::pair<double, double>{1.0, -1.0}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary(a, b, "mul",
        [](double x, double y) { return x * y; },
        [](double x, double y) { return std::pair<double, double>{y, x}; });
}

inline Tensor scale(const Tensor& x, double c) {
    return detail::elementwise_unary(x, "scale",
        [c](double v) { return c * v; },
        [c](double, double) { return c; });
}

// tanh-approximation GELU
inline Tensor gelu(const Tensor& x) {
    constexpr double kC = 0.7978845608028654; // sqrt(2/pi)
    constexpr double kA = 0.044715;
    return detail::elementwise_unary(x, "gelu",
        [](double v) {
            const double u = kC * (v + kA * v * v * v);
            return 0.5 * v * (1.0 + std::tanh(u));
        },
        [](double v, double) {
            const double u = kC * (v + kA * v * v * v);
            const double t = std::tanh(u);
            const double du = kC * (1.0 + 3.0 * kA * v * v);
            return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        });
}

inline Tensor relu(const Tensor& x) {
    return detail::elementwise_unary(x, "relu",
        [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::elementwise_unary(x, "sigmoid",
        [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor sum(const Tensor& x) {
    Tensor out = Tensor::zeros({1});
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    out.data()[0] = acc;
    check_finite(out, "sum");
    if (detail::want_record({&x})) {
        out.set_requires_grad(true);
        Tape::active().record({x, out}, [x, out]() mutable {
            const double g = out.grad()[0];
            auto& gx = x.grad();
            for (double& v : gx) v += g;
        });
    }
    return out;
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

// Row-wise softmax of a [m x n] matrix (max-shifted). A vector is one row.
inline Tensor softmax_rows(const Tensor& x) {
    const bool vec = (x.ndim() == 1);
    const std::size_t m = vec ? 1 : x.dim(0);
    const std::size_t n = vec ? x.dim(0) : x.dim(1);
    if (n < 1) throw ShapeError("softmax: empty input");
    Tensor out = Tensor::zeros(x.shape());
    const auto& X = x.data();
    auto& Y = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = &X[i * n];
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            Y[i * n + j] = std::exp(row[j] - mx);
            s += Y[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) Y[i * n + j] /= s;
    }
    check_finite(out, "softmax");
    if (detail::want_record({&x})) {
        out.set_requires_grad(true);
        Tape::active().record({x, out}, [x, out]() mutable {
            const bool vec = (x.ndim() == 1);
            const std::size_t m = vec ? 1 : x.dim(0);
            const std::size_t n = vec ? x.dim(0) : x.dim(1);
            const auto& go = out.grad();
            const auto& Y = out.data();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += go[i * n + j] * Y[i * n + j];
                for (std::size_t j = 0; j < n; ++j)
                    gx[i * n + j] += Y[i * n + j] * (go[i * n + j] - dot);
            }
        });
    }
    return out;
}

inline Tensor softmax(const Tensor& v) {
    if (v.ndim() != 1) throw ShapeError("softmax: expected a vector, got " + shape_str(v.shape()));
    return softmax_rows(v);
}

// Per-channel spatial mean of a [C x H x W] map.
inline Tensor gap2d(const Tensor& x) {
    if (x.ndim() != 3) throw ShapeError("gap2d: expected CxHxW, got " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor out = Tensor::zeros({c});
    const auto& X = x.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (std::size_t p = 0; p < hw; ++p) acc += X[ch * hw + p];
        out.data()[ch] = acc / static_cast<double>(hw);
    }
    check_finite(out, "gap2d");
    if (detail::want_record({&x})) {
        out.set_requires_grad(true);
        Tape::active().record({x, out}, [x, out]() mutable {
            const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
            const auto& go = out.grad();
            auto& gx = x.grad();
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double g = go[ch] / static_cast<double>(hw);
                for (std::size_t p = 0; p < hw; ++p) gx[ch * hw + p] += g;
            }
        });
    }
    return out;
}

// Depthwise 2-D cross-correlation, zero padding (k-1)/2, stride 1.
inline Tensor dwconv2d(const Tensor& x, const Tensor& kernels) {
    if (x.ndim() != 3) throw ShapeError("dwconv2d: input must be CxHxW, got " + shape_str(x.shape()));
    if (kernels.ndim() != 3 || kernels.dim(1) != kernels.dim(2))
        throw ShapeError("dwconv2d: kernels must be Cxkxk, got " + shape_str(kernels.shape()));
    if (kernels.dim(0) != x.dim(0))
        throw ShapeError("dwconv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(kernels.shape()));
    const std::size_t k = kernels.dim(1);
    if (k % 2 == 0) throw ConfigError("dwconv2d: kernel size must be odd, got " + std::to_string(k));
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const long r = static_cast<long>(k / 2);
    Tensor out = Tensor::zeros({C, H, W});
    const auto& X = x.data();
    const auto& K = kernels.data();
    auto& Y = out.data();
    for (std::size_t c = 0; c < C; ++c) {
        const double* xin = &X[c * H * W];
        const double* kc = &K[c * k * k];
        double* yo = &Y[c * H * W];
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xw = 0; xw < W; ++xw) {
                double acc = 0.0;
                for (std::size_t i = 0; i < k; ++i) {
                    const long yy = static_cast<long>(y) + static_cast<long>(i) - r;
                    if (yy < 0 || yy >= static_cast<long>(H)) continue;
                    for (std::size_t j = 0; j < k; ++j) {
                        const long xx = static_cast<long>(xw) + static_cast<long>(j) - r;
                        if (xx < 0 || xx >= static_cast<long>(W)) continue;
                        acc += kc[i * k + j] * xin[yy * static_cast<long>(W) + xx];
                    }
                }
                yo[y * W + xw] = acc;
            }
    }
    check_finite(out, "dwconv2d");
    if (detail::want_record({&x, &kernels})) {
        out.set_requires_grad(true);
        Tape::active().record({x, kernels, out}, [x, kernels, out]() mutable {
            const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
            const std::size_t k = kernels.dim(1);
            const long r = static_cast<long>(k / 2);
            const auto& go = out.grad();
            const auto& X = x.data();
            const auto& K = kernels.data();
            for (std::size_t c = 0; c < C; ++c) {
                const double* g = &go[c * H * W];
                const double* xin = &X[c * H * W];
                const double* kc = &K[c * k * k];
                for (std::size_t y = 0; y < H; ++y)
                    for (std::size_t xw = 0; xw < W; ++xw) {
                        const double gv = g[y * W + xw];
                        if (gv == 0.0) continue;
                        for (std::size_t i = 0; i < k; ++i) {
                            const long yy = static_cast<long>(y) + static_cast<long>(i) - r;
                            if (yy < 0 || yy >= static_cast<long>(H)) continue;
                            for (std::size_t j = 0; j < k; ++j) {
                                const long xx = static_cast<long>(xw) + static_cast<long>(j) - r;
                                if (xx < 0 || xx >= static_cast<long>(W)) continue;
                                const std::size_t in_idx =
                                    c * H * W + static_cast<std::size_t>(yy) * W +
                                    static_cast<std::size_t>(xx);
                                if (x.requires_grad()) x.grad()[in_idx] += kc[i * k + j] * gv;
                                if (kernels.requires_grad())
                                    kernels.grad()[c * k * k + i * k + j] += xin[yy * static_cast<long>(W) + xx] * gv;
                            }
                        }
                    }
            }
        });
    }
    return out;
}

// Data-preserving reshape (row-major).
inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    Tensor out = Tensor::from_data(std::move(shape), x.data());
    if (detail::want_record({&x})) {
        out.set_requires_grad(true);
        Tape::active().record({x, out}, [x, out]() mutable {
            const auto& go = out.grad();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        });
    }
    return out;
}

inline Tensor transpose2d(const Tensor& x) {
    if (x.ndim() != 2) throw ShapeError("transpose2d: expected matrix, got " + shape_str(x.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(j, i) = x(i, j);
    if (detail::want_record({&x})) {
        out.set_requires_grad(true);
        Tape::active().record({x, out}, [x, out]() mutable {
            const std::size_t m = x.dim(0), n = x.dim(1);
            auto& gx = x.grad();
            const auto& go = out.grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[j * m + i];
        });
    }
    return out;
}

// Columns [c0, c1) of a matrix.
inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    if (x.ndim() != 2 || c0 >= c1 || c1 > x.dim(1))
        throw ShapeError("slice_cols: bad range on " + shape_str(x.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1), w = c1 - c0;
    Tensor out = Tensor::zeros({m, w});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out(i, j) = x(i, c0 + j);
    if (detail::want_record({&x})) {
        out.set_requires_grad(true);
        Tape::active().record({x, out}, [x, out, c0]() mutable {
            const std::size_t m = out.dim(0), w = out.dim(1), n = x.dim(1);
            auto& gx = x.grad();
            const auto& go = out.grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) gx[i * n + c0 + j] += go[i * w + j];
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t m = parts[0].dim(0);
    std::size_t n = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.dim(0) != m)
            throw ShapeError("concat_cols: row mismatch");
        n += p.dim(1);
    }
    Tensor out = Tensor::zeros({m, n});
    std::size_t off = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p.dim(1); ++j) out(i, off + j) = p(i, j);
        off += p.dim(1);
    }
    bool rec = Tape::active().recording();
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (rec && any) {
        out.set_requires_grad(true);
        std::vector<Tensor> involved = parts;
        involved.push_back(out);
        Tape::active().record(involved, [parts, out]() mutable {
            const std::size_t m = out.dim(0), n = out.dim(1);
            const auto& go = out.grad();
            std::size_t off = 0;
            for (auto& p : parts) {
                const std::size_t w = p.dim(1);
                if (p.requires_grad()) {
                    auto& gp = p.grad();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += go[i * n + off + j];
                }
                off += w;
            }
        });
    }
    return out;
}

inline Tensor concat_chan(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
        throw ShapeError("concat_chan: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t hw = a.dim(1) * a.dim(2);
    Tensor out = Tensor::zeros({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
    std::copy(a.data().begin(), a.data().end(), out.data().begin());
    std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<long>(a.size()));
    if (detail::want_record({&a, &b})) {
        out.set_requires_grad(true);
        Tape::active().record({a, b, out}, [a, b, out]() mutable {
            const auto& go = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                const std::size_t off = a.size();
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[off + i];
            }
        });
    }
    (void)hw;
    return out;
}

// Space-to-depth: non-overlapping s x s patches become channels.
inline Tensor patch_merge(const Tensor& x, std::size_t s) {
    if (x.ndim() != 3) throw ShapeError("patch_merge: expected CxHxW");
    if (s == 0 || x.dim(1) % s != 0 || x.dim(2) % s != 0)
        throw ConfigError("patch_merge: factor " + std::to_string(s) + " does not divide " +
                          shape_str(x.shape()));
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const std::size_t Ho = H / s, Wo = W / s;
    Tensor out = Tensor::zeros({C * s * s, Ho, Wo});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t dy = 0; dy < s; ++dy)
            for (std::size_t dx = 0; dx < s; ++dx) {
                const std::size_t oc = (c * s + dy) * s + dx;
                for (std::size_t y = 0; y < Ho; ++y)
                    for (std::size_t xw = 0; xw < Wo; ++xw)
                        out(oc, y, xw) = x(c, y * s + dy, xw * s + dx);
            }
    if (detail::want_record({&x})) {
        out.set_requires_grad(true);
        Tape::active().record({x, out}, [x, out, s]() mutable {
            const std::size_t C = x.dim(0), Ho = out.dim(1), Wo = out.dim(2);
            auto& gx = x.grad();
            const auto& go = out.grad();
            const std::size_t W = x.dim(2);
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t dy = 0; dy < s; ++dy)
                    for (std::size_t dx = 0; dx < s; ++dx) {
                        const std::size_t oc = (c * s + dy) * s + dx;
                        for (std::size_t y = 0; y < Ho; ++y)
                            for (std::size_t xw = 0; xw < Wo; ++xw)
                                gx[(c * x.dim(1) + y * s + dy) * W + xw * s + dx] +=
                                    go[(oc * Ho + y) * Wo + xw];
                    }
        });
    }
    return out;
}

inline Tensor upsample_nearest(const Tensor& x, std::size_t s) {
    if (x.ndim() != 3) throw ShapeError("upsample_nearest: expected CxHxW");
    if (s == 0) throw ConfigError("upsample_nearest: zero factor");
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    Tensor out = Tensor::zeros({C, H * s, W * s});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H * s; ++y)
            for (std::size_t xw = 0; xw < W * s; ++xw) out(c, y, xw) = x(c, y / s, xw / s);
    if (detail::want_record({&x})) {
        out.set_requires_grad(true);
        Tape::active().record({x, out}, [x, out, s]() mutable {
            const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
            auto& gx = x.grad();
            const auto& go = out.grad();
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t y = 0; y < H * s; ++y)
                    for (std::size_t xw = 0; xw < W * s; ++xw)
                        gx[(c * H + y / s) * W + xw / s] += go[(c * H * s + y) * W * s + xw];
        });
    }
    return out;
}

// Per-channel multiply of a [C x H x W] map by a spatial [H x W] map.
inline Tensor scale_by_map(const Tensor& y, const Tensor& m) {
    if (y.ndim() != 3 || m.ndim() != 2 || y.dim(1) != m.dim(0) || y.dim(2) != m.dim(1))
        throw ShapeError("scale_by_map: " + shape_str(y.shape()) + " vs " + shape_str(m.shape()));
    const std::size_t C = y.dim(0), hw = y.dim(1) * y.dim(2);
    Tensor out = Tensor::zeros(y.shape());
    const auto& Y = y.data();
    const auto& M = m.data();
    auto& O = out.data();
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < hw; ++p) O[c * hw + p] = Y[c * hw + p] * M[p];
    check_finite(out, "scale_by_map");
    if (detail::want_record({&y, &m})) {
        out.set_requires_grad(true);
        Tape::active().record({y, m, out}, [y, m, out]() mutable {
            const std::size_t C = y.dim(0), hw = y.dim(1) * y.dim(2);
            const auto& go = out.grad();
            const auto& Y = y.data();
            const auto& M = m.data();
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t p = 0; p < hw; ++p) {
                    if (y.requires_grad()) y.grad()[c * hw + p] += M[p] * go[c * hw + p];
                    if (m.requires_grad()) m.grad()[p] += Y[c * hw + p] * go[c * hw + p];
                }
        });
    }
    return out;
}

// Row-wise layer normalization of [N x C] with learnable gain/shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    if (x.ndim() != 2 || gamma.ndim() != 1 || beta.ndim() != 1 || gamma.dim(0) != x.dim(1) ||
        beta.dim(0) != x.dim(1))
        throw ShapeError("layer_norm: " + shape_str(x.shape()) + " with gain " +
                         shape_str(gamma.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1);
    Tensor out = Tensor::zeros(x.shape());
    const auto& X = x.data();
    const auto& G = gamma.data();
    const auto& B = beta.data();
    auto& Y = out.data();
    std::vector<double> mu(n), rstd(n);
    for (std::size_t i = 0; i < n; ++i) {
        double m = 0.0;
        for (std::size_t j = 0; j < c; ++j) m += X[i * c + j];
        m /= static_cast<double>(c);
        double v = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = X[i * c + j] - m;
            v += d * d;
        }
        v /= static_cast<double>(c);
        mu[i] = m;
        rstd[i] = 1.0 / std::sqrt(v + eps);
        for (std::size_t j = 0; j < c; ++j)
            Y[i * c + j] = (X[i * c + j] - m) * rstd[i] * G[j] + B[j];
    }
    check_finite(out, "layer_norm");
    if (detail::want_record({&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        Tape::active().record({x, gamma, beta, out},
                              [x, gamma, beta, out, mu, rstd]() mutable {
            const std::size_t n = x.dim(0), c = x.dim(1);
            const auto& go = out.grad();
            const auto& X = x.data();
            const auto& G = gamma.data();
            for (std::size_t i = 0; i < n; ++i) {
                // dxhat, plus the two row reductions of the standard LN backward
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double xhat = (X[i * c + j] - mu[i]) * rstd[i];
                    const double dxhat = go[i * c + j] * G[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    if (gamma.requires_grad()) gamma.grad()[j] += go[i * c + j] * xhat;
                    if (beta.requires_grad()) beta.grad()[j] += go[i * c + j];
                }
                if (x.requires_grad()) {
                    auto& gx = x.grad();
                    const double inv_c = 1.0 / static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        const double xhat = (X[i * c + j] - mu[i]) * rstd[i];
                        const double dxhat = go[i * c + j] * G[j];
                        gx[i * c + j] +=
                            rstd[i] * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
                    }
                }
            }
        });
    }
    return out;
}

// Mean cross-entropy of [N x K] logits against integer targets.
inline Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.ndim() != 2 || logits.dim(0) != targets.size())
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    for (int t : targets)
        if (t < 0 || static_cast<std::size_t>(t) >= k)
            throw UsageError("cross_entropy: class index out of range");
    Tensor out = Tensor::zeros({1});
    const auto& X = logits.data();
    std::vector<double> probs(n * k);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double mx = X[i * k];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, X[i * k + j]);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            probs[i * k + j] = std::exp(X[i * k + j] - mx);
            s += probs[i * k + j];
        }
        for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= s;
        loss -= std::log(std::max(probs[i * k + static_cast<std::size_t>(targets[i])], 1e-300));
    }
    out.data()[0] = loss / static_cast<double>(n);
    check_finite(out, "cross_entropy");
    if (detail::want_record({&logits})) {
        out.set_requires_grad(true);
        Tape::active().record({logits, out}, [logits, out, probs, targets]() mutable {
            const std::size_t n = logits.dim(0), k = logits.dim(1);
            const double g = out.grad()[0] / static_cast<double>(n);
            auto& gx = logits.grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < k; ++j) {
                    const double onehot =
                        (j == static_cast<std::size_t>(targets[i])) ? 1.0 : 0.0;
                    gx[i * k + j] += g * (probs[i * k + j] - onehot);
                }
        });
    }
    return out;
}

// Gate-weighted sum over the leading extent: out = sum_m gate[m] * pool[m].
// This is the expert-mixing primitive; gradients flow to both operands.
inline Tensor mix_experts(const Tensor& pool, const Tensor& gate) {
    if (pool.ndim() != 3 || gate.ndim() != 1 || gate.dim(0) != pool.dim(0))
        throw ShapeError("mix_experts: pool " + shape_str(pool.shape()) + " vs gate " +
                         shape_str(gate.shape()));
    const std::size_t m = pool.dim(0), rs = pool.dim(1) * pool.dim(2);
    Tensor out = Tensor::zeros({pool.dim(1), pool.dim(2)});
    const auto& P = pool.data();
    const auto& G = gate.data();
    auto& Y = out.data();
    for (std::size_t e = 0; e < m; ++e) {
        const double g = G[e];
        if (g == 0.0) continue;
        const double* pe = &P[e * rs];
        for (std::size_t i = 0; i < rs; ++i) Y[i] += g * pe[i];
    }
    check_finite(out, "mix_experts");
    if (detail::want_record({&pool, &gate})) {
        out.set_requires_grad(true);
        Tape::active().record({pool, gate, out}, [pool, gate, out]() mutable {
            const std::size_t m = pool.dim(0), rs = pool.dim(1) * pool.dim(2);
            const auto& go = out.grad();
            const auto& P = pool.data();
            const auto& G = gate.data();
            for (std::size_t e = 0; e < m; ++e) {
                if (pool.requires_grad()) {
                    auto& gp = pool.grad();
                    const double g = G[e];
                    for (std::size_t i = 0; i < rs; ++i) gp[e * rs + i] += g * go[i];
                }
                if (gate.requires_grad()) {
                    double acc = 0.0;
                    const double* pe = &P[e * rs];
                    for (std::size_t i = 0; i < rs; ++i) acc += pe[i] * go[i];
                    gate.grad()[e] += acc;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Random tensor factories (deterministic under the given Rng).
// ---------------------------------------------------------------------------

inline Tensor rand_uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                           bool requires_grad = false) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

inline Tensor rand_normal(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0,
                          bool requires_grad = false) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.data()) v = rng.normal(mean, stddev);
    return t;
}

} // namespace adaroute
