#pragma once

// Reverse-mode differentiable tensor core. Dense 64-bit tensors (1-D or 2-D),
// an explicit tape of executed primitives, and a central finite-difference
// gradient checker. Single-threaded per tape; independent tapes may run in
// parallel contexts.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gela/error.hpp"
#include "gela/rng.hpp"

namespace gela::diff {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

namespace detail {
struct TensorData {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // same length as values when requires_grad
    bool requires_grad = false;
};
}  // namespace detail

// Value-semantic handle over shared storage. Copies alias the same buffer,
// which is what the tape needs to route gradients.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return Tensor(std::move(shape), {}, requires_grad, /*fill*/ 0.0, /*use_fill*/ true);
    }
    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        return Tensor(std::move(shape), {}, requires_grad, v, true);
    }
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        return Tensor(std::move(shape), std::move(values), requires_grad, 0.0, false);
    }
    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    std::size_t size() const { return d_->values.size(); }
    int ndim() const { return static_cast<int>(d_->shape.size()); }
    bool requires_grad() const { return d_->requires_grad; }

    // 2-D views; a 1-D tensor behaves as a single row.
    int rows() const { return ndim() == 2 ? d_->shape[0] : 1; }
    int cols() const { return ndim() == 2 ? d_->shape[1] : d_->shape[0]; }

    std::span<const double> values() const { return d_->values; }
    std::span<double> values_mut() { return d_->values; }
    std::span<const double> grad() const { return d_->grad; }
    std::span<double> grad_mut() { return d_->grad; }

    double at(std::size_t i) const { return d_->values[i]; }
    double at(int r, int c) const {
        return d_->values[static_cast<std::size_t>(r) * cols() + c];
    }

    bool is_scalar() const { return size() == 1; }
    double item() const {
        if (!is_scalar()) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return d_->values[0];
    }

    bool same_storage(const Tensor& o) const { return d_ == o.d_; }

    void zero_grad() {
        if (d_->requires_grad) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
    }

private:
    Tensor(Shape shape, std::vector<double> values, bool requires_grad, double fill, bool use_fill)
        : d_(std::make_shared<detail::TensorData>()) {
        const std::size_t n = shape_numel(shape);
        d_->shape = std::move(shape);
        if (use_fill) {
            d_->values.assign(n, fill);
        } else {
            if (values.size() != n)
                throw ShapeError("data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(d_->shape));
            d_->values = std::move(values);
        }
        d_->requires_grad = requires_grad;
        if (requires_grad) d_->grad.assign(n, 0.0);
    }

    std::shared_ptr<detail::TensorData> d_;
};

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline void require_finite(const Tensor& t, const char* op) {
    for (double v : t.values())
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
}

}  // namespace detail

// Ordered record of executed primitives. Nodes are appended in execution
// order, so reverse iteration is a valid reverse-topological sweep.
class Tape {
public:
    Tensor matmul(const Tensor& a, const Tensor& b) {
        if (a.ndim() != 2 || b.ndim() != 2)
            throw ShapeError("matmul: expected 2-D operands, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
        const int n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
        if (b.shape()[0] != k)
            throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        Tensor out = make_out({n, m}, {a, b});
        const double* pa = a.values().data();
        const double* pb = b.values().data();
        double* pc = out.values_mut().data();
        for (int i = 0; i < n; ++i) {
            for (int kk = 0; kk < k; ++kk) {
                const double av = pa[i * k + kk];
                const double* brow = pb + static_cast<std::size_t>(kk) * m;
                double* crow = pc + static_cast<std::size_t>(i) * m;
                for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
            }
        }
        finish(out, "matmul");
        if (out.requires_grad())
            record([a, b, out, n, k, m] {
                const double* g = out.grad().data();
                if (a.requires_grad()) {
                    double* ga = const_cast<Tensor&>(a).grad_mut().data();
                    const double* pb2 = b.values().data();
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < m; ++j) {
                            const double gv = g[i * m + j];
                            for (int kk = 0; kk < k; ++kk) ga[i * k + kk] += gv * pb2[kk * m + j];
                        }
                }
                if (b.requires_grad()) {
                    double* gb = const_cast<Tensor&>(b).grad_mut().data();
                    const double* pa2 = a.values().data();
                    for (int i = 0; i < n; ++i)
                        for (int kk = 0; kk < k; ++kk) {
                            const double av = pa2[i * k + kk];
                            for (int j = 0; j < m; ++j) gb[kk * m + j] += av * g[i * m + j];
                        }
                }
            });
        return out;
    }

    Tensor add(const Tensor& a, const Tensor& b) {
        return binary_elementwise(
            a, b, "add", [](double x, double y) { return x + y; },
            [](double, double, double g, double& da, double& db) {
                da += g;
                db += g;
            });
    }

    Tensor sub(const Tensor& a, const Tensor& b) {
        return binary_elementwise(
            a, b, "sub", [](double x, double y) { return x - y; },
            [](double, double, double g, double& da, double& db) {
                da += g;
                db -= g;
            });
    }

    Tensor mul(const Tensor& a, const Tensor& b) {
        return binary_elementwise(
            a, b, "mul", [](double x, double y) { return x * y; },
            [](double x, double y, double g, double& da, double& db) {
                da += g * y;
                db += g * x;
            });
    }

    Tensor div(const Tensor& a, const Tensor& b) {
        return binary_elementwise(
            a, b, "div", [](double x, double y) { return x / y; },
            [](double x, double y, double g, double& da, double& db) {
                da += g / y;
                db -= g * x / (y * y);
            });
    }

    Tensor maximum(const Tensor& a, const Tensor& b) {
        // Subgradient at ties goes to the first operand.
        return binary_elementwise(
            a, b, "maximum", [](double x, double y) { return x >= y ? x : y; },
            [](double x, double y, double g, double& da, double& db) {
                if (x >= y)
                    da += g;
                else
                    db += g;
            });
    }

    Tensor minimum(const Tensor& a, const Tensor& b) {
        return binary_elementwise(
            a, b, "minimum", [](double x, double y) { return x <= y ? x : y; },
            [](double x, double y, double g, double& da, double& db) {
                if (x <= y)
                    da += g;
                else
                    db += g;
            });
    }

    Tensor scale(const Tensor& a, double s) {
        return unary_elementwise(
            a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
    }

    Tensor add_scalar(const Tensor& a, double c) {
        return unary_elementwise(
            a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
    }

    Tensor exp(const Tensor& a) {
        return unary_elementwise(
            a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
    }

    Tensor log(const Tensor& a) {
        return unary_elementwise(
            a, "log", [](double x) { return std::log(x); },
            [](double x, double) { return 1.0 / x; });
    }

    Tensor sigmoid(const Tensor& a) {
        return unary_elementwise(
            a, "sigmoid",
            [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
            [](double, double y) { return y * (1.0 - y); });
    }

    Tensor relu(const Tensor& a) {
        return unary_elementwise(
            a, "relu", [](double x) { return x > 0 ? x : 0.0; },
            [](double x, double) { return x > 0 ? 1.0 : 0.0; });
    }

    Tensor abs(const Tensor& a) {
        return unary_elementwise(
            a, "abs", [](double x) { return std::fabs(x); },
            [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
    }

    // erf-based gelu: 0.5 x (1 + erf(x / sqrt(2)))
    Tensor gelu(const Tensor& a) {
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        constexpr double inv_sqrt_2pi = 0.39894228040143267794;
        return unary_elementwise(
            a, "gelu",
            [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
            [=](double x, double) {
                const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                return cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
            });
    }

    // Softmax over the last axis, computed with max-subtraction.
    Tensor softmax(const Tensor& a) { return softmax_impl(a, /*log_form=*/false); }
    Tensor log_softmax(const Tensor& a) { return softmax_impl(a, /*log_form=*/true); }

    // Layer normalization over the last axis with learned gain and bias.
    Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                      double eps = 1e-5) {
        const int n = x.rows(), d = x.cols();
        if (gain.ndim() != 1 || gain.shape()[0] != d || bias.ndim() != 1 || bias.shape()[0] != d)
            throw ShapeError("layer_norm: gain/bias must be (" + std::to_string(d) + ",), got " +
                             shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
        Tensor out = make_out(x.shape(), {x, gain, bias});
        std::vector<double> xhat(static_cast<std::size_t>(n) * d);
        std::vector<double> inv_sigma(n);
        const double* px = x.values().data();
        const double* pg = gain.values().data();
        const double* pb = bias.values().data();
        double* po = out.values_mut().data();
        for (int i = 0; i < n; ++i) {
            const double* row = px + static_cast<std::size_t>(i) * d;
            double mu = 0;
            for (int j = 0; j < d; ++j) mu += row[j];
            mu /= d;
            double var = 0;
            for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
            var /= d;
            const double is = 1.0 / std::sqrt(var + eps);
            inv_sigma[i] = is;
            for (int j = 0; j < d; ++j) {
                const double h = (row[j] - mu) * is;
                xhat[static_cast<std::size_t>(i) * d + j] = h;
                po[static_cast<std::size_t>(i) * d + j] = pg[j] * h + pb[j];
            }
        }
        finish(out, "layer_norm");
        if (out.requires_grad())
            record([x, gain, bias, out, n, d, xhat = std::move(xhat),
                    inv_sigma = std::move(inv_sigma)] {
                const double* g = out.grad().data();
                const double* pg2 = gain.values().data();
                for (int i = 0; i < n; ++i) {
                    const double* grow = g + static_cast<std::size_t>(i) * d;
                    const double* hrow = xhat.data() + static_cast<std::size_t>(i) * d;
                    if (gain.requires_grad()) {
                        double* gg = const_cast<Tensor&>(gain).grad_mut().data();
                        for (int j = 0; j < d; ++j) gg[j] += grow[j] * hrow[j];
                    }
                    if (bias.requires_grad()) {
                        double* gb = const_cast<Tensor&>(bias).grad_mut().data();
                        for (int j = 0; j < d; ++j) gb[j] += grow[j];
                    }
                    if (x.requires_grad()) {
                        double* gx = const_cast<Tensor&>(x).grad_mut().data();
                        double s1 = 0, s2 = 0;
                        for (int j = 0; j < d; ++j) {
                            const double gy = grow[j] * pg2[j];
                            s1 += gy;
                            s2 += gy * hrow[j];
                        }
                        s1 /= d;
                        s2 /= d;
                        for (int j = 0; j < d; ++j) {
                            const double gy = grow[j] * pg2[j];
                            gx[static_cast<std::size_t>(i) * d + j] +=
                                (gy - s1 - hrow[j] * s2) * inv_sigma[i];
                        }
                    }
                }
            });
        return out;
    }

    // Row lookup into a (V, d) table. Gradient is sparse-accumulated into the
    // dense table gradient. Also serves as a general row gather.
    Tensor embedding(const Tensor& table, std::vector<int> ids) {
        if (table.ndim() != 2) throw ShapeError("embedding: table must be 2-D");
        const int v = table.shape()[0], d = table.shape()[1];
        for (int id : ids)
            if (id < 0 || id >= v)
                throw IndexError("embedding: id " + std::to_string(id) + " out of range [0," +
                                 std::to_string(v) + ")");
        const int n = static_cast<int>(ids.size());
        Tensor out = make_out({n, d}, {table});
        double* po = out.values_mut().data();
        const double* pt = table.values().data();
        for (int i = 0; i < n; ++i)
            std::copy_n(pt + static_cast<std::size_t>(ids[i]) * d, d,
                        po + static_cast<std::size_t>(i) * d);
        finish(out, "embedding");
        if (out.requires_grad())
            record([table, out, ids = std::move(ids), d] {
                double* gt = const_cast<Tensor&>(table).grad_mut().data();
                const double* g = out.grad().data();
                for (std::size_t i = 0; i < ids.size(); ++i)
                    for (int j = 0; j < d; ++j)
                        gt[static_cast<std::size_t>(ids[i]) * d + j] += g[i * d + j];
            });
        return out;
    }

    Tensor gather_rows(const Tensor& x, std::vector<int> idx) { return embedding(x, std::move(idx)); }

    // Concatenate two tensors along `axis` (0 = rows, 1 = cols). 1-D tensors
    // concatenate along axis 0.
    Tensor concat(const Tensor& a, const Tensor& b, int axis = 0) {
        if (a.ndim() == 1 && b.ndim() == 1) {
            if (axis != 0) throw ShapeError("concat: 1-D tensors concatenate along axis 0");
            const int na = a.shape()[0], nb = b.shape()[0];
            Tensor out = make_out({na + nb}, {a, b});
            auto po = out.values_mut();
            std::copy(a.values().begin(), a.values().end(), po.begin());
            std::copy(b.values().begin(), b.values().end(), po.begin() + na);
            finish(out, "concat");
            if (out.requires_grad())
                record([a, b, out, na, nb] {
                    const double* g = out.grad().data();
                    if (a.requires_grad()) {
                        double* ga = const_cast<Tensor&>(a).grad_mut().data();
                        for (int i = 0; i < na; ++i) ga[i] += g[i];
                    }
                    if (b.requires_grad()) {
                        double* gb = const_cast<Tensor&>(b).grad_mut().data();
                        for (int i = 0; i < nb; ++i) gb[i] += g[na + i];
                    }
                });
            return out;
        }
        if (a.ndim() != 2 || b.ndim() != 2)
            throw ShapeError("concat: rank mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        if (axis == 0) {
            if (a.cols() != b.cols())
                throw ShapeError("concat axis 0: column counts differ, " + shape_str(a.shape()) +
                                 " vs " + shape_str(b.shape()));
            const int ra = a.rows(), rb = b.rows(), c = a.cols();
            Tensor out = make_out({ra + rb, c}, {a, b});
            auto po = out.values_mut();
            std::copy(a.values().begin(), a.values().end(), po.begin());
            std::copy(b.values().begin(), b.values().end(),
                      po.begin() + static_cast<std::size_t>(ra) * c);
            finish(out, "concat");
            if (out.requires_grad())
                record([a, b, out, ra, rb, c] {
                    const double* g = out.grad().data();
                    if (a.requires_grad()) {
                        double* ga = const_cast<Tensor&>(a).grad_mut().data();
                        for (std::size_t i = 0; i < static_cast<std::size_t>(ra) * c; ++i) ga[i] += g[i];
                    }
                    if (b.requires_grad()) {
                        double* gb = const_cast<Tensor&>(b).grad_mut().data();
                        const double* gsrc = g + static_cast<std::size_t>(ra) * c;
                        for (std::size_t i = 0; i < static_cast<std::size_t>(rb) * c; ++i) gb[i] += gsrc[i];
                    }
                });
            return out;
        }
        if (axis != 1) throw ShapeError("concat: axis must be 0 or 1");
        if (a.rows() != b.rows())
            throw ShapeError("concat axis 1: row counts differ, " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        const int r = a.rows(), ca = a.cols(), cb = b.cols();
        Tensor out = make_out({r, ca + cb}, {a, b});
        double* po = out.values_mut().data();
        const double* pa = a.values().data();
        const double* pb = b.values().data();
        for (int i = 0; i < r; ++i) {
            std::copy_n(pa + static_cast<std::size_t>(i) * ca, ca,
                        po + static_cast<std::size_t>(i) * (ca + cb));
            std::copy_n(pb + static_cast<std::size_t>(i) * cb, cb,
                        po + static_cast<std::size_t>(i) * (ca + cb) + ca);
        }
        finish(out, "concat");
        if (out.requires_grad())
            record([a, b, out, r, ca, cb] {
                const double* g = out.grad().data();
                if (a.requires_grad()) {
                    double* ga = const_cast<Tensor&>(a).grad_mut().data();
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < ca; ++j)
                            ga[static_cast<std::size_t>(i) * ca + j] +=
                                g[static_cast<std::size_t>(i) * (ca + cb) + j];
                }
                if (b.requires_grad()) {
                    double* gb = const_cast<Tensor&>(b).grad_mut().data();
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < cb; ++j)
                            gb[static_cast<std::size_t>(i) * cb + j] +=
                                g[static_cast<std::size_t>(i) * (ca + cb) + ca + j];
                }
            });
        return out;
    }

    // Mean of the rows selected by a binary mask: (n, d) x mask(n) -> (d,).
    Tensor masked_mean(const Tensor& x, std::vector<double> mask) {
        if (x.ndim() != 2) throw ShapeError("masked_mean: expected 2-D input");
        const int n = x.rows(), d = x.cols();
        if (static_cast<int>(mask.size()) != n)
            throw ShapeError("masked_mean: mask length " + std::to_string(mask.size()) +
                             " != rows " + std::to_string(n));
        double count = 0;
        for (double m : mask) count += (m != 0.0) ? 1.0 : 0.0;
        if (count == 0) throw MaskError("masked_mean: empty mask");
        Tensor out = make_out({d}, {x});
        double* po = out.values_mut().data();
        const double* px = x.values().data();
        for (int i = 0; i < n; ++i) {
            if (mask[static_cast<std::size_t>(i)] == 0.0) continue;
            for (int j = 0; j < d; ++j) po[j] += px[static_cast<std::size_t>(i) * d + j];
        }
        for (int j = 0; j < d; ++j) po[j] /= count;
        finish(out, "masked_mean");
        if (out.requires_grad())
            record([x, out, mask = std::move(mask), n, d, count] {
                double* gx = const_cast<Tensor&>(x).grad_mut().data();
                const double* g = out.grad().data();
                for (int i = 0; i < n; ++i) {
                    if (mask[static_cast<std::size_t>(i)] == 0.0) continue;
                    for (int j = 0; j < d; ++j)
                        gx[static_cast<std::size_t>(i) * d + j] += g[j] / count;
                }
            });
        return out;
    }

    Tensor transpose(const Tensor& a) {
        if (a.ndim() != 2) throw ShapeError("transpose: expected 2-D input");
        const int n = a.rows(), m = a.cols();
        Tensor out = make_out({m, n}, {a});
        double* po = out.values_mut().data();
        const double* pa = a.values().data();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j)
                po[static_cast<std::size_t>(j) * n + i] = pa[static_cast<std::size_t>(i) * m + j];
        finish(out, "transpose");
        if (out.requires_grad())
            record([a, out, n, m] {
                double* ga = const_cast<Tensor&>(a).grad_mut().data();
                const double* g = out.grad().data();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < m; ++j)
                        ga[static_cast<std::size_t>(i) * m + j] += g[static_cast<std::size_t>(j) * n + i];
            });
        return out;
    }

    Tensor sum(const Tensor& a) {
        Tensor out = make_out({1}, {a});
        double acc = 0;
        for (double v : a.values()) acc += v;
        out.values_mut()[0] = acc;
        finish(out, "sum");
        if (out.requires_grad())
            record([a, out] {
                const double g = out.grad()[0];
                double* ga = const_cast<Tensor&>(a).grad_mut().data();
                for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g;
            });
        return out;
    }

    Tensor mean(const Tensor& a) {
        Tensor out = make_out({1}, {a});
        double acc = 0;
        for (double v : a.values()) acc += v;
        const double inv_n = 1.0 / static_cast<double>(a.size());
        out.values_mut()[0] = acc * inv_n;
        finish(out, "mean");
        if (out.requires_grad())
            record([a, out, inv_n] {
                const double g = out.grad()[0] * inv_n;
                double* ga = const_cast<Tensor&>(a).grad_mut().data();
                for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g;
            });
        return out;
    }

    Tensor slice_cols(const Tensor& a, int start, int len) {
        if (a.ndim() != 2) throw ShapeError("slice_cols: expected 2-D input");
        const int n = a.rows(), m = a.cols();
        if (start < 0 || len <= 0 || start + len > m)
            throw ShapeError("slice_cols: range [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") out of " + std::to_string(m));
        Tensor out = make_out({n, len}, {a});
        double* po = out.values_mut().data();
        const double* pa = a.values().data();
        for (int i = 0; i < n; ++i)
            std::copy_n(pa + static_cast<std::size_t>(i) * m + start, len,
                        po + static_cast<std::size_t>(i) * len);
        finish(out, "slice_cols");
        if (out.requires_grad())
            record([a, out, n, m, start, len] {
                double* ga = const_cast<Tensor&>(a).grad_mut().data();
                const double* g = out.grad().data();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < len; ++j)
                        ga[static_cast<std::size_t>(i) * m + start + j] +=
                            g[static_cast<std::size_t>(i) * len + j];
            });
        return out;
    }

    Tensor slice_rows(const Tensor& a, int start, int len) {
        if (a.ndim() != 2) throw ShapeError("slice_rows: expected 2-D input");
        const int n = a.rows(), m = a.cols();
        if (start < 0 || len <= 0 || start + len > n)
            throw ShapeError("slice_rows: range [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") out of " + std::to_string(n));
        Tensor out = make_out({len, m}, {a});
        std::copy_n(a.values().data() + static_cast<std::size_t>(start) * m,
                    static_cast<std::size_t>(len) * m, out.values_mut().data());
        finish(out, "slice_rows");
        if (out.requires_grad())
            record([a, out, m, start, len] {
                double* ga = const_cast<Tensor&>(a).grad_mut().data();
                const double* g = out.grad().data();
                for (std::size_t i = 0; i < static_cast<std::size_t>(len) * m; ++i)
                    ga[static_cast<std::size_t>(start) * m + i] += g[i];
            });
        return out;
    }

    Tensor reshape(const Tensor& a, Shape shape) {
        if (shape_numel(shape) != a.size())
            throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(shape));
        Tensor out = make_out(std::move(shape), {a});
        std::copy(a.values().begin(), a.values().end(), out.values_mut().begin());
        finish(out, "reshape");
        if (out.requires_grad())
            record([a, out] {
                double* ga = const_cast<Tensor&>(a).grad_mut().data();
                const double* g = out.grad().data();
                for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[i];
            });
        return out;
    }

    // Repeat a (1, d) or (d,) tensor as n identical rows.
    Tensor tile_rows(const Tensor& a, int n) {
        if (a.rows() != 1) throw ShapeError("tile_rows: input must have a single row");
        const int d = a.cols();
        if (n <= 0) throw ShapeError("tile_rows: n must be positive");
        Tensor out = make_out({n, d}, {a});
        double* po = out.values_mut().data();
        for (int i = 0; i < n; ++i)
            std::copy(a.values().begin(), a.values().end(), po + static_cast<std::size_t>(i) * d);
        finish(out, "tile_rows");
        if (out.requires_grad())
            record([a, out, n, d] {
                double* ga = const_cast<Tensor&>(a).grad_mut().data();
                const double* g = out.grad().data();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j) ga[j] += g[static_cast<std::size_t>(i) * d + j];
            });
        return out;
    }

    // Reverse sweep from a scalar loss. Gradients accumulate additively across
    // fan-out; the tape is consumed.
    void backward(const Tensor& loss) {
        if (!loss.is_scalar())
            throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (nodes_.empty()) throw ContractError("backward: tape is empty");
        if (!loss.requires_grad())
            throw ContractError("backward: loss does not depend on any tracked tensor");
        const_cast<Tensor&>(loss).grad_mut()[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        nodes_.clear();
    }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    std::vector<std::function<void()>> nodes_;

    static Tensor make_out(Shape shape, std::initializer_list<Tensor> inputs) {
        bool rg = false;
        for (const Tensor& t : inputs) rg = rg || t.requires_grad();
        return Tensor::zeros(std::move(shape), rg);
    }

    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

    static void finish(const Tensor& out, const char* op) { detail::require_finite(out, op); }

    template <typename Fwd, typename Bwd>
    Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, Bwd bwd) {
        detail::require_same_shape(a, b, op);
        Tensor out = make_out(a.shape(), {a, b});
        const double* pa = a.values().data();
        const double* pb = b.values().data();
        double* po = out.values_mut().data();
        for (std::size_t i = 0; i < a.size(); ++i) po[i] = fwd(pa[i], pb[i]);
        finish(out, op);
        if (out.requires_grad())
            record([a, b, out, bwd] {
                const double* g = out.grad().data();
                const double* pa2 = a.values().data();
                const double* pb2 = b.values().data();
                double dummy = 0;
                double* ga = a.requires_grad() ? const_cast<Tensor&>(a).grad_mut().data() : nullptr;
                double* gb = b.requires_grad() ? const_cast<Tensor&>(b).grad_mut().data() : nullptr;
                for (std::size_t i = 0; i < a.size(); ++i) {
                    double& da = ga ? ga[i] : dummy;
                    double& db = gb ? gb[i] : dummy;
                    bwd(pa2[i], pb2[i], g[i], da, db);
                }
            });
        return out;
    }

    template <typename Fwd, typename Deriv>
    Tensor unary_elementwise(const Tensor& a, const char* op, Fwd fwd, Deriv deriv) {
        Tensor out = make_out(a.shape(), {a});
        const double* pa = a.values().data();
        double* po = out.values_mut().data();
        for (std::size_t i = 0; i < a.size(); ++i) po[i] = fwd(pa[i]);
        finish(out, op);
        if (out.requires_grad())
            record([a, out, deriv] {
                double* ga = const_cast<Tensor&>(a).grad_mut().data();
                const double* g = out.grad().data();
                const double* pa2 = a.values().data();
                const double* po2 = out.values().data();
                for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[i] * deriv(pa2[i], po2[i]);
            });
        return out;
    }

    Tensor softmax_impl(const Tensor& a, bool log_form) {
        const int n = a.rows(), d = a.cols();
        Tensor out = make_out(a.shape(), {a});
        const double* pa = a.values().data();
        double* po = out.values_mut().data();
        for (int i = 0; i < n; ++i) {
            const double* row = pa + static_cast<std::size_t>(i) * d;
            double* orow = po + static_cast<std::size_t>(i) * d;
            double mx = row[0];
            for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
            double z = 0;
            for (int j = 0; j < d; ++j) z += std::exp(row[j] - mx);
            if (log_form) {
                const double lz = std::log(z);
                for (int j = 0; j < d; ++j) orow[j] = row[j] - mx - lz;
            } else {
                for (int j = 0; j < d; ++j) orow[j] = std::exp(row[j] - mx) / z;
            }
        }
        finish(out, log_form ? "log_softmax" : "softmax");
        if (out.requires_grad())
            record([a, out, n, d, log_form] {
                double* ga = const_cast<Tensor&>(a).grad_mut().data();
                const double* g = out.grad().data();
                const double* po2 = out.values().data();
                for (int i = 0; i < n; ++i) {
                    const double* grow = g + static_cast<std::size_t>(i) * d;
                    const double* yrow = po2 + static_cast<std::size_t>(i) * d;
                    double gs = 0;
                    for (int j = 0; j < d; ++j) gs += grow[j];
                    if (log_form) {
                        // y = x - lse(x): dx_j = g_j - exp(y_j) * sum(g)
                        for (int j = 0; j < d; ++j)
                            ga[static_cast<std::size_t>(i) * d + j] +=
                                grow[j] - std::exp(yrow[j]) * gs;
                    } else {
                        double dot = 0;
                        for (int j = 0; j < d; ++j) dot += grow[j] * yrow[j];
                        for (int j = 0; j < d; ++j)
                            ga[static_cast<std::size_t>(i) * d + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            });
        return out;
    }
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
    bool pass = true;
    double max_rel_err = 0.0;
    std::string worst_tensor;
    std::size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
    std::size_t checked = 0;
};

// Relative error with a unit floor so near-zero gradients are compared
// absolutely.
inline double grad_rel_err(double a, double n) {
    return std::fabs(a - n) / std::max({1.0, std::fabs(a), std::fabs(n)});
}

// Compare analytic gradients of `f` (a scalar-valued function built on a
// fresh tape per call) against central differences (f(x+h)-f(x-h))/2h for
// every listed tensor. `max_per_tensor` = 0 checks every element; otherwise a
// seeded random subset of that size per tensor.
inline GradCheckReport grad_check(const std::function<Tensor(Tape&)>& f,
                                  const std::vector<std::pair<std::string, Tensor>>& params,
                                  double step = 1e-5, double tol = 1e-4,
                                  std::size_t max_per_tensor = 0, std::uint64_t sample_seed = 0) {
    if (step <= 0) throw ContractError("grad_check: step must be positive");
    for (auto& [name, t] : params) {
        if (!t.requires_grad())
            throw ContractError("grad_check: tensor '" + name + "' does not require grad");
        const_cast<Tensor&>(t).zero_grad();
    }
    Tape tape;
    Tensor loss = f(tape);
    if (!loss.is_scalar()) throw ContractError("grad_check: f must return a scalar");
    tape.backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& [name, t] : params) analytic.emplace_back(t.grad().begin(), t.grad().end());

    GradCheckReport rep;
    Rng rng(sample_seed ^ 0x5eedULL);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto& name = params[pi].first;
        Tensor t = params[pi].second;
        std::vector<std::size_t> indices(t.size());
        std::iota(indices.begin(), indices.end(), 0);
        if (max_per_tensor > 0 && t.size() > max_per_tensor) {
            rng.shuffle(indices);
            indices.resize(max_per_tensor);
            std::sort(indices.begin(), indices.end());
        }
        for (std::size_t i : indices) {
            const double saved = t.values()[i];
            auto eval = [&](double v) {
                t.values_mut()[i] = v;
                Tape t2;
                return f(t2).item();
            };
            const double fp = eval(saved + step);
            const double fm = eval(saved - step);
            t.values_mut()[i] = saved;
            const double numeric = (fp - fm) / (2.0 * step);
            const double err = grad_rel_err(analytic[pi][i], numeric);
            ++rep.checked;
            if (err > rep.max_rel_err) {
                rep.max_rel_err = err;
                rep.worst_tensor = name;
                rep.worst_index = i;
                rep.analytic_at_worst = analytic[pi][i];
                rep.numeric_at_worst = numeric;
            }
        }
        t.zero_grad();
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

// Single-tensor convenience form.
inline GradCheckReport grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, Tensor x,
                                  double step = 1e-5, double tol = 1e-4) {
    return grad_check([&](Tape& tape) { return f(tape, x); }, {{"x", x}}, step, tol);
}

}  // namespace gela::diff
