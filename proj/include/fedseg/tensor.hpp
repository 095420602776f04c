#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fedseg/rng.hpp"

namespace fedseg {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {

[[noreturn]] inline void fail(const std::string& msg) { throw std::invalid_argument(msg); }

inline void check(bool ok, const std::string& msg) {
    if (!ok) fail(msg);
}

}  // namespace detail

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily; empty means "no gradient yet"
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Value handle onto shared storage. Copies alias the same buffer; clone()
// makes an independent tensor.
class Tensor {
public:
    Tensor() : impl_(std::make_shared<TensorImpl>()) {}

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.impl_->shape = std::move(shape);
        validate_shape(t.impl_->shape);
        t.impl_->data.assign(static_cast<size_t>(numel_of(t.impl_->shape)), 0.0);
        return t;
    }

    static Tensor full(Shape shape, double value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
        return t;
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

    static Tensor scalar(double value) { return full({1}, value); }

    static Tensor from_vector(Shape shape, std::vector<double> values) {
        Tensor t;
        t.impl_->shape = std::move(shape);
        validate_shape(t.impl_->shape);
        detail::check(static_cast<int64_t>(values.size()) == numel_of(t.impl_->shape),
                      "from_vector: " + std::to_string(values.size()) + " values for shape " +
                          shape_str(t.impl_->shape));
        t.impl_->data = std::move(values);
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, double mean = 0.0) {
        Tensor t = zeros(std::move(shape));
        for (double& v : t.impl_->data) v = rng.normal(mean, stddev);
        return t;
    }

    static Tensor rand_uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
        Tensor t = zeros(std::move(shape));
        for (double& v : t.impl_->data) v = rng.uniform(lo, hi);
        return t;
    }

    const Shape& shape() const { return impl_->shape; }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
    int64_t dim(size_t i) const { return impl_->shape.at(i); }
    size_t rank() const { return impl_->shape.size(); }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    // Gradient buffer, allocated (zeroed) on first access.
    std::vector<double>& grad() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    const std::vector<double>& grad() const {
        impl_->ensure_grad();
        return impl_->grad;
    }
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }

    double item() const {
        detail::check(numel() == 1, "item(): tensor has " + std::to_string(numel()) + " elements");
        return impl_->data[0];
    }

    double& at4(int64_t b, int64_t c, int64_t h, int64_t w) {
        const Shape& s = impl_->shape;
        return impl_->data[static_cast<size_t>(((b * s[1] + c) * s[2] + h) * s[3] + w)];
    }
    double at4(int64_t b, int64_t c, int64_t h, int64_t w) const {
        return const_cast<Tensor*>(this)->at4(b, c, h, w);
    }

    Tensor clone() const {
        Tensor t;
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    bool all_finite() const {
        for (double v : impl_->data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    static void validate_shape(const Shape& s) {
        detail::check(!s.empty(), "tensor shape must have at least one extent");
        for (int64_t d : s)
            detail::check(d > 0, "tensor extents must be positive, got " + shape_str(s));
    }

    std::shared_ptr<TensorImpl> impl_;
};

// Reverse-mode tape. Operations append their backward rules in execution
// order; backward() replays them once, in reverse.
class Tape {
public:
    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

    size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    // Seeds d(loss)/d(loss) = 1 and propagates through every recorded node.
    // A tape can be consumed once; reuse is rejected to prevent accidental
    // double accumulation inside training loops.
    void backward(Tensor loss) {
        if (consumed_) throw std::runtime_error("tape already consumed by backward()");
        detail::check(loss.numel() == 1,
                      "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        detail::check(loss.requires_grad(),
                      "backward: loss tensor does not participate in this tape");
        loss.grad()[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        consumed_ = true;
    }

private:
    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
};

namespace detail {

inline bool track(Tape* tape, std::initializer_list<const Tensor*> inputs) {
    if (!tape) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

// Independent accumulators keep the sum vectorizable/ILP-friendly without
// -ffast-math; summation order is fixed, so results stay deterministic.
inline double dot(const double* a, const double* b, int64_t n) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
    int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        s4 += a[i + 4] * b[i + 4];
        s5 += a[i + 5] * b[i + 5];
        s6 += a[i + 6] * b[i + 6];
        s7 += a[i + 7] * b[i + 7];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
}

inline void axpy(double a, const double* x, double* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// C[M,N] += A[M,K] * B[K,N], row-major.
inline void gemm_acc(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C) {
    for (int64_t i = 0; i < M; ++i) {
        double* c = C + i * N;
        const double* arow = A + i * K;
        for (int64_t k = 0; k < K; ++k) axpy(arow[k], B + k * N, c, N);
    }
}

inline void im2col(const double* in, int64_t Cin, int64_t H, int64_t W, int64_t k, int64_t stride,
                   int64_t pad, int64_t Ho, int64_t Wo, double* col) {
    for (int64_t ci = 0; ci < Cin; ++ci) {
        const double* chan = in + ci * H * W;
        for (int64_t ki = 0; ki < k; ++ki) {
            for (int64_t kj = 0; kj < k; ++kj) {
                double* dst = col + ((ci * k + ki) * k + kj) * Ho * Wo;
                for (int64_t ho = 0; ho < Ho; ++ho) {
                    int64_t hi = ho * stride - pad + ki;
                    double* row = dst + ho * Wo;
                    if (hi < 0 || hi >= H) {
                        std::fill(row, row + Wo, 0.0);
                        continue;
                    }
                    const double* src = chan + hi * W;
                    for (int64_t wo = 0; wo < Wo; ++wo) {
                        int64_t wi = wo * stride - pad + kj;
                        row[wo] = (wi >= 0 && wi < W) ? src[wi] : 0.0;
                    }
                }
            }
        }
    }
}

inline void col2im_acc(const double* col, int64_t Cin, int64_t H, int64_t W, int64_t k,
                       int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, double* in_grad) {
    for (int64_t ci = 0; ci < Cin; ++ci) {
        double* chan = in_grad + ci * H * W;
        for (int64_t ki = 0; ki < k; ++ki) {
            for (int64_t kj = 0; kj < k; ++kj) {
                const double* src = col + ((ci * k + ki) * k + kj) * Ho * Wo;
                for (int64_t ho = 0; ho < Ho; ++ho) {
                    int64_t hi = ho * stride - pad + ki;
                    if (hi < 0 || hi >= H) continue;
                    double* row = chan + hi * W;
                    for (int64_t wo = 0; wo < Wo; ++wo) {
                        int64_t wi = wo * stride - pad + kj;
                        if (wi >= 0 && wi < W) row[wi] += src[ho * Wo + wo];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---- elementwise ------------------------------------------------------------

inline Tensor relu(Tape* tape, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] > 0.0 ? xd[i] : 0.0;
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto oi = out.impl();
        tape->record([xi, oi] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            // subgradient at 0 is defined as 0
            for (size_t i = 0; i < xi->data.size(); ++i)
                if (xi->data[i] > 0.0) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

inline Tensor sigmoid(Tape* tape, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (size_t i = 0; i < xd.size(); ++i) od[i] = 1.0 / (1.0 + std::exp(-xd[i]));
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto oi = out.impl();
        tape->record([xi, oi] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (size_t i = 0; i < xi->data.size(); ++i) {
                double s = oi->data[i];
                xi->grad[i] += oi->grad[i] * s * (1.0 - s);
            }
        });
    }
    return out;
}

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

}  // namespace detail

inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (size_t i = 0; i < ad.size(); ++i) od[i] = ad[i] + bd[i];
    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        bool na = a.requires_grad(), nb = b.requires_grad();
        tape->record([ai, bi, oi, na, nb] {
            if (oi->grad.empty()) return;
            if (na) {
                ai->ensure_grad();
                for (size_t i = 0; i < ai->data.size(); ++i) ai->grad[i] += oi->grad[i];
            }
            if (nb) {
                bi->ensure_grad();
                for (size_t i = 0; i < bi->data.size(); ++i) bi->grad[i] += oi->grad[i];
            }
        });
    }
    return out;
}

inline Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (size_t i = 0; i < ad.size(); ++i) od[i] = ad[i] - bd[i];
    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        bool na = a.requires_grad(), nb = b.requires_grad();
        tape->record([ai, bi, oi, na, nb] {
            if (oi->grad.empty()) return;
            if (na) {
                ai->ensure_grad();
                for (size_t i = 0; i < ai->data.size(); ++i) ai->grad[i] += oi->grad[i];
            }
            if (nb) {
                bi->ensure_grad();
                for (size_t i = 0; i < bi->data.size(); ++i) bi->grad[i] -= oi->grad[i];
            }
        });
    }
    return out;
}

inline Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (size_t i = 0; i < ad.size(); ++i) od[i] = ad[i] * bd[i];
    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        bool na = a.requires_grad(), nb = b.requires_grad();
        tape->record([ai, bi, oi, na, nb] {
            if (oi->grad.empty()) return;
            if (na) {
                ai->ensure_grad();
                for (size_t i = 0; i < ai->data.size(); ++i)
                    ai->grad[i] += oi->grad[i] * bi->data[i];
            }
            if (nb) {
                bi->ensure_grad();
                for (size_t i = 0; i < bi->data.size(); ++i)
                    bi->grad[i] += oi->grad[i] * ai->data[i];
            }
        });
    }
    return out;
}

inline Tensor div(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "div");
    Tensor out = Tensor::zeros(a.shape());
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (size_t i = 0; i < ad.size(); ++i) od[i] = ad[i] / bd[i];
    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        bool na = a.requires_grad(), nb = b.requires_grad();
        tape->record([ai, bi, oi, na, nb] {
            if (oi->grad.empty()) return;
            if (na) {
                ai->ensure_grad();
                for (size_t i = 0; i < ai->data.size(); ++i) ai->grad[i] += oi->grad[i] / bi->data[i];
            }
            if (nb) {
                bi->ensure_grad();
                for (size_t i = 0; i < bi->data.size(); ++i)
                    bi->grad[i] -= oi->grad[i] * ai->data[i] / (bi->data[i] * bi->data[i]);
            }
        });
    }
    return out;
}

inline Tensor scale(Tape* tape, const Tensor& x, double s) {
    Tensor out = Tensor::zeros(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] * s;
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        tape->record([xi, oi, s] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += oi->grad[i] * s;
        });
    }
    return out;
}

inline Tensor add_scalar(Tape* tape, const Tensor& x, double c) {
    Tensor out = Tensor::zeros(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] + c;
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        tape->record([xi, oi] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

// ---- reductions -------------------------------------------------------------

inline Tensor sum(Tape* tape, const Tensor& x) {
    detail::check(x.numel() > 0, "sum: empty tensor");
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::scalar(s);
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        tape->record([xi, oi] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            double g = oi->grad[0];
            for (size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += g;
        });
    }
    return out;
}

inline Tensor mean(Tape* tape, const Tensor& x) {
    detail::check(x.numel() > 0, "mean: empty tensor");
    double s = 0.0;
    for (double v : x.data()) s += v;
    const double n = static_cast<double>(x.numel());
    Tensor out = Tensor::scalar(s / n);
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        tape->record([xi, oi, n] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            double g = oi->grad[0] / n;
            for (size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += g;
        });
    }
    return out;
}

namespace detail {

struct GroupSpec {
    int64_t batch, channels, spatial;  // x viewed as [batch][channels][spatial]
    int64_t groups;                    // channel groups
    bool across_batch;                 // true: stats pooled over the batch axis
    int64_t cpg;                       // channels per group
    int64_t group_count;               // number of statistics groups
    int64_t group_size;                // elements per group

    int64_t group_of(int64_t b, int64_t c) const {
        int64_t g = c / cpg;
        return across_batch ? g : b * groups + g;
    }
};

inline GroupSpec make_group_spec(const Tensor& x, int64_t groups, bool across_batch,
                                 const char* op) {
    check(x.rank() == 4, std::string(op) + ": expected rank-4 tensor, got " + shape_str(x.shape()));
    const Shape& s = x.shape();
    GroupSpec gs;
    gs.batch = s[0];
    gs.channels = s[1];
    gs.spatial = s[2] * s[3];
    gs.groups = groups;
    gs.across_batch = across_batch;
    check(groups >= 1 && gs.channels % groups == 0,
          std::string(op) + ": channel count " + std::to_string(gs.channels) +
              " not divisible by group count " + std::to_string(groups));
    gs.cpg = gs.channels / groups;
    gs.group_count = across_batch ? groups : gs.batch * groups;
    gs.group_size = gs.cpg * gs.spatial * (across_batch ? gs.batch : 1);
    check(gs.group_size >= 1, std::string(op) + ": empty statistics group");
    return gs;
}

}  // namespace detail

// Per-group mean and biased (population) variance over the spatial extent.
// across_batch=false groups each (sample, channel-group) separately
// (instance/group-norm statistics); across_batch=true pools the whole batch
// per channel-group (batch-norm statistics).
inline std::pair<Tensor, Tensor> moments(Tape* tape, const Tensor& x, int64_t groups,
                                         bool across_batch) {
    auto gs = detail::make_group_spec(x, groups, across_batch, "moments");
    Tensor mu = Tensor::zeros({gs.group_count});
    Tensor var = Tensor::zeros({gs.group_count});
    const auto& xd = x.data();
    auto& md = mu.data();
    auto& vd = var.data();
    for (int64_t b = 0; b < gs.batch; ++b)
        for (int64_t c = 0; c < gs.channels; ++c) {
            const double* px = xd.data() + (b * gs.channels + c) * gs.spatial;
            double s = 0.0;
            for (int64_t i = 0; i < gs.spatial; ++i) s += px[i];
            md[static_cast<size_t>(gs.group_of(b, c))] += s;
        }
    const double n = static_cast<double>(gs.group_size);
    for (auto& m : md) m /= n;
    for (int64_t b = 0; b < gs.batch; ++b)
        for (int64_t c = 0; c < gs.channels; ++c) {
            const double* px = xd.data() + (b * gs.channels + c) * gs.spatial;
            const double m = md[static_cast<size_t>(gs.group_of(b, c))];
            double s = 0.0;
            for (int64_t i = 0; i < gs.spatial; ++i) {
                double d = px[i] - m;
                s += d * d;
            }
            vd[static_cast<size_t>(gs.group_of(b, c))] += s;
        }
    for (auto& v : vd) v /= n;

    if (detail::track(tape, {&x})) {
        mu.set_requires_grad(true);
        var.set_requires_grad(true);
        auto xi = x.impl(), mi = mu.impl(), vi = var.impl();
        tape->record([xi, mi, vi, gs, n] {
            const bool has_m = !mi->grad.empty();
            const bool has_v = !vi->grad.empty();
            if (!has_m && !has_v) return;
            xi->ensure_grad();
            for (int64_t b = 0; b < gs.batch; ++b)
                for (int64_t c = 0; c < gs.channels; ++c) {
                    const size_t g = static_cast<size_t>(gs.group_of(b, c));
                    const double gm = has_m ? mi->grad[g] / n : 0.0;
                    const double gv = has_v ? vi->grad[g] * 2.0 / n : 0.0;
                    const double m = mi->data[g];
                    double* gx = xi->grad.data() + (b * gs.channels + c) * gs.spatial;
                    const double* px = xi->data.data() + (b * gs.channels + c) * gs.spatial;
                    for (int64_t i = 0; i < gs.spatial; ++i)
                        gx[i] += gm + gv * (px[i] - m);
                }
        });
    }
    return {mu, var};
}

// y = (x - mean_g) / sqrt(var_g + eps); differentiable in x, mean, and var.
inline Tensor normalize_moments(Tape* tape, const Tensor& x, const Tensor& mu, const Tensor& var,
                                int64_t groups, bool across_batch, double eps) {
    auto gs = detail::make_group_spec(x, groups, across_batch, "normalize_moments");
    detail::check(mu.numel() == gs.group_count && var.numel() == gs.group_count,
                  "normalize_moments: statistics shape mismatch, expected " +
                      std::to_string(gs.group_count) + " groups, got " + shape_str(mu.shape()) +
                      " / " + shape_str(var.shape()));
    Tensor out = Tensor::zeros(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    std::vector<double> invstd(static_cast<size_t>(gs.group_count));
    for (int64_t g = 0; g < gs.group_count; ++g)
        invstd[static_cast<size_t>(g)] = 1.0 / std::sqrt(var.data()[static_cast<size_t>(g)] + eps);
    for (int64_t b = 0; b < gs.batch; ++b)
        for (int64_t c = 0; c < gs.channels; ++c) {
            const size_t g = static_cast<size_t>(gs.group_of(b, c));
            const double m = mu.data()[g];
            const double is = invstd[g];
            const double* px = xd.data() + (b * gs.channels + c) * gs.spatial;
            double* po = od.data() + (b * gs.channels + c) * gs.spatial;
            for (int64_t i = 0; i < gs.spatial; ++i) po[i] = (px[i] - m) * is;
        }

    if (detail::track(tape, {&x, &mu, &var})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), mi = mu.impl(), vi = var.impl(), oi = out.impl();
        bool nx = x.requires_grad(), nm = mu.requires_grad(), nv = var.requires_grad();
        tape->record([xi, mi, vi, oi, gs, eps, nx, nm, nv] {
            if (oi->grad.empty()) return;
            if (nx) xi->ensure_grad();
            if (nm) mi->ensure_grad();
            if (nv) vi->ensure_grad();
            for (int64_t b = 0; b < gs.batch; ++b)
                for (int64_t c = 0; c < gs.channels; ++c) {
                    const size_t g = static_cast<size_t>(gs.group_of(b, c));
                    const double m = mi->data[g];
                    const double is = 1.0 / std::sqrt(vi->data[g] + eps);
                    const int64_t base = (b * gs.channels + c) * gs.spatial;
                    const double* go = oi->grad.data() + base;
                    const double* px = xi->data.data() + base;
                    double sum_go = 0.0, sum_gox = 0.0;
                    for (int64_t i = 0; i < gs.spatial; ++i) {
                        sum_go += go[i];
                        sum_gox += go[i] * (px[i] - m);
                    }
                    if (nx) {
                        double* gx = xi->grad.data() + base;
                        for (int64_t i = 0; i < gs.spatial; ++i) gx[i] += go[i] * is;
                    }
                    if (nm) mi->grad[g] -= sum_go * is;
                    if (nv) vi->grad[g] -= 0.5 * sum_gox * is * is * is;
                }
        });
    }
    return out;
}

// y[b,c,h,w] = x[b,c,h,w] * gamma[c] + beta[c]
inline Tensor channel_affine(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    detail::check(x.rank() == 4, "channel_affine: expected rank-4 tensor, got " + shape_str(x.shape()));
    const int64_t B = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
    detail::check(gamma.numel() == C && beta.numel() == C,
                  "channel_affine: gamma/beta must have " + std::to_string(C) + " entries, got " +
                      shape_str(gamma.shape()) + " / " + shape_str(beta.shape()));
    Tensor out = Tensor::zeros(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const double g = gamma.data()[static_cast<size_t>(c)];
            const double be = beta.data()[static_cast<size_t>(c)];
            const double* px = xd.data() + (b * C + c) * S;
            double* po = od.data() + (b * C + c) * S;
            for (int64_t i = 0; i < S; ++i) po[i] = px[i] * g + be;
        }
    if (detail::track(tape, {&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
        bool nx = x.requires_grad(), ng = gamma.requires_grad(), nb = beta.requires_grad();
        tape->record([xi, gi, bi, oi, B, C, S, nx, ng, nb] {
            if (oi->grad.empty()) return;
            if (nx) xi->ensure_grad();
            if (ng) gi->ensure_grad();
            if (nb) bi->ensure_grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c) {
                    const int64_t base = (b * C + c) * S;
                    const double* go = oi->grad.data() + base;
                    const double* px = xi->data.data() + base;
                    if (nx) {
                        const double g = gi->data[static_cast<size_t>(c)];
                        double* gx = xi->grad.data() + base;
                        for (int64_t i = 0; i < S; ++i) gx[i] += go[i] * g;
                    }
                    if (ng) {
                        double s = 0.0;
                        for (int64_t i = 0; i < S; ++i) s += go[i] * px[i];
                        gi->grad[static_cast<size_t>(c)] += s;
                    }
                    if (nb) {
                        double s = 0.0;
                        for (int64_t i = 0; i < S; ++i) s += go[i];
                        bi->grad[static_cast<size_t>(c)] += s;
                    }
                }
        });
    }
    return out;
}

// ---- structure ops ----------------------------------------------------------

inline Tensor reshape(Tape* tape, const Tensor& x, Shape new_shape) {
    detail::check(numel_of(new_shape) == x.numel(),
                  "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    Tensor out = Tensor::from_vector(std::move(new_shape), x.data());
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        tape->record([xi, oi] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

inline Tensor concat_channels(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::check(a.rank() == 4 && b.rank() == 4, "concat_channels: expected rank-4 tensors");
    detail::check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
                  "concat_channels: incompatible shapes " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
    const int64_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), S = a.dim(2) * a.dim(3);
    Tensor out = Tensor::zeros({B, Ca + Cb, a.dim(2), a.dim(3)});
    auto& od = out.data();
    for (int64_t bi = 0; bi < B; ++bi) {
        std::copy_n(a.data().data() + bi * Ca * S, Ca * S, od.data() + bi * (Ca + Cb) * S);
        std::copy_n(b.data().data() + bi * Cb * S, Cb * S, od.data() + (bi * (Ca + Cb) + Ca) * S);
    }
    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi2 = b.impl(), oi = out.impl();
        bool na = a.requires_grad(), nb = b.requires_grad();
        tape->record([ai, bi2, oi, B, Ca, Cb, S, na, nb] {
            if (oi->grad.empty()) return;
            if (na) ai->ensure_grad();
            if (nb) bi2->ensure_grad();
            for (int64_t bb = 0; bb < B; ++bb) {
                if (na) {
                    const double* go = oi->grad.data() + bb * (Ca + Cb) * S;
                    double* ga = ai->grad.data() + bb * Ca * S;
                    for (int64_t i = 0; i < Ca * S; ++i) ga[i] += go[i];
                }
                if (nb) {
                    const double* go = oi->grad.data() + (bb * (Ca + Cb) + Ca) * S;
                    double* gb = bi2->grad.data() + bb * Cb * S;
                    for (int64_t i = 0; i < Cb * S; ++i) gb[i] += go[i];
                }
            }
        });
    }
    return out;
}

// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
inline Tensor upsample_nearest2x(Tape* tape, const Tensor& x) {
    detail::check(x.rank() == 4, "upsample_nearest2x: expected rank-4 tensor");
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out = Tensor::zeros({B, C, 2 * H, 2 * W});
    const auto& xd = x.data();
    auto& od = out.data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const double* src = xd.data() + bc * H * W;
        double* dst = od.data() + bc * 4 * H * W;
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
                const double v = src[h * W + w];
                double* p = dst + (2 * h) * (2 * W) + 2 * w;
                p[0] = v;
                p[1] = v;
                p[2 * W] = v;
                p[2 * W + 1] = v;
            }
    }
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        tape->record([xi, oi, B, C, H, W] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (int64_t bc = 0; bc < B * C; ++bc) {
                double* gx = xi->grad.data() + bc * H * W;
                const double* go = oi->grad.data() + bc * 4 * H * W;
                for (int64_t h = 0; h < H; ++h)
                    for (int64_t w = 0; w < W; ++w) {
                        const double* p = go + (2 * h) * (2 * W) + 2 * w;
                        gx[h * W + w] += p[0] + p[1] + p[2 * W] + p[2 * W + 1];
                    }
            }
        });
    }
    return out;
}

// ---- convolution ------------------------------------------------------------

// Cross-correlation with square odd kernels; im2col + GEMM on both passes.
inline Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& weight, const Tensor& bias,
                     int stride, int padding) {
    detail::check(input.rank() == 4,
                  "conv2d: input must be rank-4 [B,C,H,W], got " + shape_str(input.shape()));
    detail::check(weight.rank() == 4,
                  "conv2d: weight must be rank-4 [Cout,Cin,k,k], got " + shape_str(weight.shape()));
    const int64_t B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int64_t Cout = weight.dim(0), k = weight.dim(2);
    detail::check(weight.dim(2) == weight.dim(3), "conv2d: kernel must be square, got " +
                                                      shape_str(weight.shape()));
    detail::check(k % 2 == 1, "conv2d: kernel extent must be odd, got " + std::to_string(k));
    detail::check(weight.dim(1) == Cin, "conv2d: input channels (" + std::to_string(Cin) +
                                            ") != weight in-channels (" +
                                            std::to_string(weight.dim(1)) + ")");
    detail::check(bias.numel() == Cout, "conv2d: bias must have " + std::to_string(Cout) +
                                            " entries, got " + shape_str(bias.shape()));
    detail::check(stride >= 1, "conv2d: stride must be positive, got " + std::to_string(stride));
    detail::check(padding >= 0, "conv2d: padding must be non-negative");
    const int64_t Ho = (H + 2 * padding - k) / stride + 1;
    const int64_t Wo = (W + 2 * padding - k) / stride + 1;
    detail::check(Ho > 0 && Wo > 0, "conv2d: kernel " + std::to_string(k) +
                                        " too large for input " + shape_str(input.shape()));

    const int64_t K = Cin * k * k;
    const int64_t N = Ho * Wo;
    Tensor out = Tensor::zeros({B, Cout, Ho, Wo});
    auto col = std::make_shared<std::vector<double>>(static_cast<size_t>(B * K * N));
    for (int64_t b = 0; b < B; ++b) {
        double* colb = col->data() + b * K * N;
        detail::im2col(input.data().data() + b * Cin * H * W, Cin, H, W, k, stride, padding, Ho, Wo,
                       colb);
        double* ob = out.data().data() + b * Cout * N;
        for (int64_t co = 0; co < Cout; ++co)
            std::fill_n(ob + co * N, N, bias.data()[static_cast<size_t>(co)]);
        detail::gemm_acc(Cout, N, K, weight.data().data(), colb, ob);
    }

    if (detail::track(tape, {&input, &weight, &bias})) {
        out.set_requires_grad(true);
        auto ii = input.impl(), wi = weight.impl(), bi = bias.impl(), oi = out.impl();
        bool ni = input.requires_grad(), nw = weight.requires_grad(), nb = bias.requires_grad();
        const int64_t s = stride, p = padding;
        tape->record([ii, wi, bi, oi, col, B, Cin, H, W, Cout, k, K, N, Ho, Wo, s, p, ni, nw, nb] {
            if (oi->grad.empty()) return;
            if (ni) ii->ensure_grad();
            if (nw) wi->ensure_grad();
            if (nb) bi->ensure_grad();
            std::vector<double> dcol;
            if (ni) dcol.resize(static_cast<size_t>(K * N));
            for (int64_t b = 0; b < B; ++b) {
                const double* go = oi->grad.data() + b * Cout * N;
                const double* colb = col->data() + b * K * N;
                if (nb) {
                    for (int64_t co = 0; co < Cout; ++co) {
                        double sum = 0.0;
                        const double* row = go + co * N;
                        for (int64_t n = 0; n < N; ++n) sum += row[n];
                        bi->grad[static_cast<size_t>(co)] += sum;
                    }
                }
                if (nw) {
                    for (int64_t co = 0; co < Cout; ++co)
                        for (int64_t kk = 0; kk < K; ++kk)
                            wi->grad[static_cast<size_t>(co * K + kk)] +=
                                detail::dot(go + co * N, colb + kk * N, N);
                }
                if (ni) {
                    std::fill(dcol.begin(), dcol.end(), 0.0);
                    for (int64_t co = 0; co < Cout; ++co)
                        for (int64_t kk = 0; kk < K; ++kk)
                            detail::axpy(wi->data[static_cast<size_t>(co * K + kk)], go + co * N,
                                         dcol.data() + kk * N, N);
                    detail::col2im_acc(dcol.data(), Cin, H, W, k, s, p, Ho, Wo,
                                       ii->grad.data() + b * Cin * H * W);
                }
            }
        });
    }
    return out;
}

// ---- losses-adjacent fused op ----------------------------------------------

// Mean binary cross-entropy of probabilities against a constant 0/1 target.
// Predictions are clamped to [eps, 1-eps] before the logs.
inline Tensor bce_mean(Tape* tape, const Tensor& pred, const Tensor& target, double eps = 1e-7) {
    detail::check_same_shape(pred, target, "bce_mean");
    detail::check(pred.numel() > 0, "bce_mean: empty tensor");
    const auto& pd = pred.data();
    const auto& td = target.data();
    const double n = static_cast<double>(pred.numel());
    double acc = 0.0;
    for (size_t i = 0; i < pd.size(); ++i) {
        const double pc = std::clamp(pd[i], eps, 1.0 - eps);
        acc -= td[i] * std::log(pc) + (1.0 - td[i]) * std::log(1.0 - pc);
    }
    Tensor out = Tensor::scalar(acc / n);
    if (detail::track(tape, {&pred})) {
        out.set_requires_grad(true);
        auto pi = pred.impl(), ti = target.impl(), oi = out.impl();
        tape->record([pi, ti, oi, eps, n] {
            if (oi->grad.empty()) return;
            pi->ensure_grad();
            const double g = oi->grad[0] / n;
            for (size_t i = 0; i < pi->data.size(); ++i) {
                const double p = pi->data[i];
                if (p < eps || p > 1.0 - eps) continue;  // clamped region: flat
                pi->grad[i] += g * (p - ti->data[i]) / (p * (1.0 - p));
            }
        });
    }
    return out;
}

}  // namespace fedseg
