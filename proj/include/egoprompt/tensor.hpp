#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "egoprompt/errors.hpp"
#include "egoprompt/rng.hpp"

namespace egoprompt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

template <typename S>
class TapeT;

template <typename S>
struct TensorDataT {
    Shape shape;
    std::vector<S> values;
    bool requires_grad = false;
    std::vector<S> grad;               // empty until first accumulation
    const TapeT<S>* tape = nullptr;    // producing tape; null for leaves
};

/// Shared handle to a dense row-major tensor. Rank 0 (empty shape) is a scalar.
template <typename S>
class TensorT {
public:
    TensorT() = default;

    static TensorT make(Shape shape, std::vector<S> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw DimensionError("tensor: shape " + shape_str(shape) + " does not match value count " +
                                 std::to_string(values.size()));
        auto d = std::make_shared<TensorDataT<S>>();
        d->shape = std::move(shape);
        d->values = std::move(values);
        d->requires_grad = requires_grad;
        return TensorT(std::move(d));
    }

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        std::vector<S> v(shape_numel(shape), S(0));
        return make(std::move(shape), std::move(v), requires_grad);
    }

    static TensorT full(Shape shape, double value, bool requires_grad = false) {
        std::vector<S> v(shape_numel(shape), static_cast<S>(value));
        return make(std::move(shape), std::move(v), requires_grad);
    }

    static TensorT scalar(double value, bool requires_grad = false) {
        return make(Shape{}, std::vector<S>{static_cast<S>(value)}, requires_grad);
    }

    static TensorT uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
        std::vector<S> v(shape_numel(shape));
        for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
        return make(std::move(shape), std::move(v), requires_grad);
    }

    static TensorT gaussian(Shape shape, Rng& rng, double mean, double stddev, bool requires_grad = false) {
        std::vector<S> v(shape_numel(shape));
        for (auto& x : v) x = static_cast<S>(rng.gaussian(mean, stddev));
        return make(std::move(shape), std::move(v), requires_grad);
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t size() const { return d_->values.size(); }
    std::size_t extent(std::size_t dim) const { return d_->shape[dim]; }

    const std::vector<S>& values() const { return d_->values; }
    std::vector<S>& values_mut() { return d_->values; }
    double value(std::size_t i) const { return static_cast<double>(d_->values[i]); }
    double value(std::size_t r, std::size_t c) const {
        return static_cast<double>(d_->values[r * d_->shape.back() + c]);
    }
    double scalar_value() const {
        if (size() != 1) throw UsageError("scalar_value on tensor of size " + std::to_string(size()));
        return static_cast<double>(d_->values[0]);
    }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) {
        d_->requires_grad = rg;
        if (!rg) d_->grad.clear();
    }

    bool has_grad() const { return !d_->grad.empty(); }
    const std::vector<S>& grad() const { return d_->grad; }
    std::vector<S>& grad_mut() { return d_->grad; }
    double grad_value(std::size_t i) const { return d_->grad.empty() ? 0.0 : static_cast<double>(d_->grad[i]); }
    void zero_grad() {
        if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), S(0));
    }

    double grad_l2_norm() const {
        double s = 0;
        for (auto g : d_->grad) s += static_cast<double>(g) * static_cast<double>(g);
        return std::sqrt(s);
    }

    bool all_finite() const {
        for (auto v : d_->values)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    TensorDataT<S>* ptr() const { return d_.get(); }
    bool same_storage(const TensorT& o) const { return d_ == o.d_; }

private:
    explicit TensorT(std::shared_ptr<TensorDataT<S>> d) : d_(std::move(d)) {}
    std::shared_ptr<TensorDataT<S>> d_;

    friend class TapeT<S>;
};

/// Records forward operations and replays them in reverse for gradients.
/// One tape is one single-writer computation context; leaves (parameters,
/// constants) live outside any tape and may be reused across tapes.
template <typename S>
class TapeT {
public:
    TapeT() = default;
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    using Tensor = TensorT<S>;

    std::size_t node_count() const { return nodes_.size(); }

    void clear() {
        nodes_.clear();
        outputs_.clear();
    }

    /// Accumulates d(root)/d(leaf) into every requires_grad leaf. Repeated
    /// calls without zero_grad accumulate. Intermediate grads are transient.
    void backward(const Tensor& root) {
        if (root.size() != 1)
            throw UsageError("backward: root must be a scalar, got shape " + shape_str(root.shape()));
        if (root.ptr()->tape != nullptr && root.ptr()->tape != this)
            throw UsageError("backward: root was produced on a different tape");
        for (auto& out : outputs_) out.ptr()->grad.clear();
        root.ptr()->grad.assign(1, S(1));
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    // ---- leaf-ish helpers -------------------------------------------------

    Tensor constant(Shape shape, std::vector<S> values) const {
        return Tensor::make(std::move(shape), std::move(values));
    }

    // ---- elementwise ------------------------------------------------------

    Tensor add(const Tensor& a, const Tensor& b) {
        check_same_shape("add", a, b);
        return binary_ew(
            a, b, [](double x, double y) { return x + y; },
            [](std::size_t n, const S* /*a*/, const S* /*b*/, const S* g, S* da, S* db) {
                for (std::size_t i = 0; i < n; ++i) {
                    if (da) da[i] += g[i];
                    if (db) db[i] += g[i];
                }
            });
    }

    Tensor sub(const Tensor& a, const Tensor& b) {
        check_same_shape("sub", a, b);
        return binary_ew(
            a, b, [](double x, double y) { return x - y; },
            [](std::size_t n, const S*, const S*, const S* g, S* da, S* db) {
                for (std::size_t i = 0; i < n; ++i) {
                    if (da) da[i] += g[i];
                    if (db) db[i] -= g[i];
                }
            });
    }

    Tensor mul(const Tensor& a, const Tensor& b) {
        check_same_shape("mul", a, b);
        return binary_ew(
            a, b, [](double x, double y) { return x * y; },
            [](std::size_t n, const S* av, const S* bv, const S* g, S* da, S* db) {
                for (std::size_t i = 0; i < n; ++i) {
                    if (da) da[i] += g[i] * bv[i];
                    if (db) db[i] += g[i] * av[i];
                }
            });
    }

    Tensor scale(const Tensor& a, double s) {
        check_tape(a);
        std::vector<S> out(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<S>(a.value(i) * s);
        Tensor o = adopt(a.shape(), std::move(out), a.requires_grad());
        if (o.requires_grad())
            record([a, o, s]() {
                if (!pull(o)) return;
                auto* ad = a.ptr();
                auto* od = o.ptr();
                ensure_grad(ad);
                for (std::size_t i = 0; i < ad->values.size(); ++i)
                    ad->grad[i] += static_cast<S>(static_cast<double>(od->grad[i]) * s);
            });
        return o;
    }

    Tensor neg(const Tensor& a) { return scale(a, -1.0); }

    Tensor abs(const Tensor& a) {
        return unary_ew(
            a, [](double x) { return std::fabs(x); },
            [](double x, double g) { return x > 0 ? g : (x < 0 ? -g : 0.0); });
    }

    Tensor log(const Tensor& a) {
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a.value(i) <= 0.0)
                throw DegenerateInputError("log: non-positive argument " + std::to_string(a.value(i)));
        return unary_ew(
            a, [](double x) { return std::log(x); }, [](double x, double g) { return g / x; });
    }

    Tensor gelu(const Tensor& a) {
        return unary_ew(
            a, [](double x) { return x * 0.5 * (1.0 + std::erf(x * 0.7071067811865476)); },
            [](double x, double g) {
                double phi_cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
                double phi_pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
                return g * (phi_cdf + x * phi_pdf);
            });
    }

    // ---- linear algebra ---------------------------------------------------

    /// c[m x n] = a[m x k] . b[k x n]
    Tensor matmul(const Tensor& a, const Tensor& b) {
        check_rank("matmul", a, 2);
        check_rank("matmul", b, 2);
        const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
        if (b.extent(0) != k)
            throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " . " +
                                 shape_str(b.shape()));
        std::vector<double> acc(m * n, 0.0);
        const auto& av = a.values();
        const auto& bv = b.values();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t t = 0; t < k; ++t) {
                const double x = static_cast<double>(av[i * k + t]);
                for (std::size_t j = 0; j < n; ++j) acc[i * n + j] += x * static_cast<double>(bv[t * n + j]);
            }
        Tensor o = adopt({m, n}, cast_vec(acc), a.requires_grad() || b.requires_grad());
        if (o.requires_grad())
            record([a, b, o, m, k, n]() {
                if (!pull(o)) return;
                const auto& g = o.ptr()->grad;
                if (a.requires_grad()) {
                    ensure_grad(a.ptr());
                    auto& da = a.ptr()->grad;
                    const auto& bv2 = b.values();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                            const double gv = static_cast<double>(g[i * n + j]);
                            for (std::size_t t = 0; t < k; ++t)
                                da[i * k + t] += static_cast<S>(gv * static_cast<double>(bv2[t * n + j]));
                        }
                }
                if (b.requires_grad()) {
                    ensure_grad(b.ptr());
                    auto& db = b.ptr()->grad;
                    const auto& av2 = a.values();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t t = 0; t < k; ++t) {
                            const double x = static_cast<double>(av2[i * k + t]);
                            for (std::size_t j = 0; j < n; ++j)
                                db[t * n + j] += static_cast<S>(x * static_cast<double>(g[i * n + j]));
                        }
                }
            });
        return o;
    }

    /// c[m x n] = a[m x k] . b[n x k]^T
    Tensor matmul_nt(const Tensor& a, const Tensor& b) {
        check_rank("matmul_nt", a, 2);
        check_rank("matmul_nt", b, 2);
        const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(0);
        if (b.extent(1) != k)
            throw DimensionError("matmul_nt: inner extents differ, " + shape_str(a.shape()) + " . " +
                                 shape_str(b.shape()) + "^T");
        std::vector<double> acc(m * n, 0.0);
        const auto& av = a.values();
        const auto& bv = b.values();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0;
                for (std::size_t t = 0; t < k; ++t)
                    s += static_cast<double>(av[i * k + t]) * static_cast<double>(bv[j * k + t]);
                acc[i * n + j] = s;
            }
        Tensor o = adopt({m, n}, cast_vec(acc), a.requires_grad() || b.requires_grad());
        if (o.requires_grad())
            record([a, b, o, m, k, n]() {
                if (!pull(o)) return;
                const auto& g = o.ptr()->grad;
                if (a.requires_grad()) {
                    ensure_grad(a.ptr());
                    auto& da = a.ptr()->grad;
                    const auto& bv2 = b.values();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                            const double gv = static_cast<double>(g[i * n + j]);
                            for (std::size_t t = 0; t < k; ++t)
                                da[i * k + t] += static_cast<S>(gv * static_cast<double>(bv2[j * k + t]));
                        }
                }
                if (b.requires_grad()) {
                    ensure_grad(b.ptr());
                    auto& db = b.ptr()->grad;
                    const auto& av2 = a.values();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                            const double gv = static_cast<double>(g[i * n + j]);
                            for (std::size_t t = 0; t < k; ++t)
                                db[j * k + t] += static_cast<S>(gv * static_cast<double>(av2[i * k + t]));
                        }
                }
            });
        return o;
    }

    /// y[m] = M[m x n] . v[n]
    Tensor matvec(const Tensor& m, const Tensor& v) {
        check_rank("matvec", m, 2);
        check_rank("matvec", v, 1);
        const std::size_t rows = m.extent(0), cols = m.extent(1);
        if (v.extent(0) != cols)
            throw DimensionError("matvec: " + shape_str(m.shape()) + " . " + shape_str(v.shape()));
        std::vector<double> acc(rows, 0.0);
        for (std::size_t i = 0; i < rows; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < cols; ++j) s += m.value(i, j) * v.value(j);
            acc[i] = s;
        }
        Tensor o = adopt({rows}, cast_vec(acc), m.requires_grad() || v.requires_grad());
        if (o.requires_grad())
            record([m, v, o, rows, cols]() {
                if (!pull(o)) return;
                const auto& g = o.ptr()->grad;
                if (m.requires_grad()) {
                    ensure_grad(m.ptr());
                    auto& dm = m.ptr()->grad;
                    for (std::size_t i = 0; i < rows; ++i) {
                        const double gv = static_cast<double>(g[i]);
                        for (std::size_t j = 0; j < cols; ++j)
                            dm[i * cols + j] += static_cast<S>(gv * v.value(j));
                    }
                }
                if (v.requires_grad()) {
                    ensure_grad(v.ptr());
                    auto& dv = v.ptr()->grad;
                    for (std::size_t i = 0; i < rows; ++i) {
                        const double gv = static_cast<double>(g[i]);
                        for (std::size_t j = 0; j < cols; ++j)
                            dv[j] += static_cast<S>(gv * m.value(i, j));
                    }
                }
            });
        return o;
    }

    /// y[n] = v[m] . M[m x n]
    Tensor vecmat(const Tensor& v, const Tensor& m) {
        check_rank("vecmat", v, 1);
        check_rank("vecmat", m, 2);
        const std::size_t rows = m.extent(0), cols = m.extent(1);
        if (v.extent(0) != rows)
            throw DimensionError("vecmat: " + shape_str(v.shape()) + " . " + shape_str(m.shape()));
        std::vector<double> acc(cols, 0.0);
        for (std::size_t i = 0; i < rows; ++i) {
            const double x = v.value(i);
            for (std::size_t j = 0; j < cols; ++j) acc[j] += x * m.value(i, j);
        }
        Tensor o = adopt({cols}, cast_vec(acc), v.requires_grad() || m.requires_grad());
        if (o.requires_grad())
            record([v, m, o, rows, cols]() {
                if (!pull(o)) return;
                const auto& g = o.ptr()->grad;
                if (v.requires_grad()) {
                    ensure_grad(v.ptr());
                    auto& dv = v.ptr()->grad;
                    for (std::size_t i = 0; i < rows; ++i) {
                        double s = 0;
                        for (std::size_t j = 0; j < cols; ++j) s += static_cast<double>(g[j]) * m.value(i, j);
                        dv[i] += static_cast<S>(s);
                    }
                }
                if (m.requires_grad()) {
                    ensure_grad(m.ptr());
                    auto& dm = m.ptr()->grad;
                    for (std::size_t i = 0; i < rows; ++i) {
                        const double x = v.value(i);
                        for (std::size_t j = 0; j < cols; ++j)
                            dm[i * cols + j] += static_cast<S>(x * static_cast<double>(g[j]));
                    }
                }
            });
        return o;
    }

    /// Broadcast row-wise bias: out[r][j] = m[r][j] + b[j].
    Tensor add_bias(const Tensor& m, const Tensor& b) {
        check_rank("add_bias", m, 2);
        check_rank("add_bias", b, 1);
        const std::size_t rows = m.extent(0), cols = m.extent(1);
        if (b.extent(0) != cols)
            throw DimensionError("add_bias: " + shape_str(m.shape()) + " + " + shape_str(b.shape()));
        std::vector<S> out(rows * cols);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < cols; ++j)
                out[r * cols + j] = static_cast<S>(m.value(r, j) + b.value(j));
        Tensor o = adopt({rows, cols}, std::move(out), m.requires_grad() || b.requires_grad());
        if (o.requires_grad())
            record([m, b, o, rows, cols]() {
                if (!pull(o)) return;
                const auto& g = o.ptr()->grad;
                if (m.requires_grad()) {
                    ensure_grad(m.ptr());
                    auto& dm = m.ptr()->grad;
                    for (std::size_t i = 0; i < rows * cols; ++i) dm[i] += g[i];
                }
                if (b.requires_grad()) {
                    ensure_grad(b.ptr());
                    auto& db = b.ptr()->grad;
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < cols; ++j) db[j] += g[r * cols + j];
                }
            });
        return o;
    }

    // ---- reductions -------------------------------------------------------

    Tensor sum(const Tensor& a) {
        check_tape(a);
        double s = 0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a.value(i);
        Tensor o = adopt({}, {static_cast<S>(s)}, a.requires_grad());
        if (o.requires_grad())
            record([a, o]() {
                if (!pull(o)) return;
                ensure_grad(a.ptr());
                const S g = o.ptr()->grad[0];
                for (auto& d : a.ptr()->grad) d += g;
            });
        return o;
    }

    /// Column-wise mean of a [R x d] matrix -> [d].
    Tensor mean_rows(const Tensor& m) {
        check_rank("mean_rows", m, 2);
        const std::size_t rows = m.extent(0), cols = m.extent(1);
        if (rows == 0) throw DimensionError("mean_rows: empty matrix");
        std::vector<double> acc(cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < cols; ++j) acc[j] += m.value(r, j);
        for (auto& x : acc) x /= static_cast<double>(rows);
        Tensor o = adopt({cols}, cast_vec(acc), m.requires_grad());
        if (o.requires_grad())
            record([m, o, rows, cols]() {
                if (!pull(o)) return;
                ensure_grad(m.ptr());
                auto& dm = m.ptr()->grad;
                const auto& g = o.ptr()->grad;
                const double inv = 1.0 / static_cast<double>(rows);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < cols; ++j)
                        dm[r * cols + j] += static_cast<S>(static_cast<double>(g[j]) * inv);
            });
        return o;
    }

    Tensor dot(const Tensor& a, const Tensor& b) {
        check_rank("dot", a, 1);
        check_rank("dot", b, 1);
        if (a.size() != b.size())
            throw DimensionError("dot: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        double s = 0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a.value(i) * b.value(i);
        Tensor o = adopt({}, {static_cast<S>(s)}, a.requires_grad() || b.requires_grad());
        if (o.requires_grad())
            record([a, b, o]() {
                if (!pull(o)) return;
                const double g = static_cast<double>(o.ptr()->grad[0]);
                if (a.requires_grad()) {
                    ensure_grad(a.ptr());
                    for (std::size_t i = 0; i < a.size(); ++i)
                        a.ptr()->grad[i] += static_cast<S>(g * b.value(i));
                }
                if (b.requires_grad()) {
                    ensure_grad(b.ptr());
                    for (std::size_t i = 0; i < b.size(); ++i)
                        b.ptr()->grad[i] += static_cast<S>(g * a.value(i));
                }
            });
        return o;
    }

    // ---- normalization & similarity ----------------------------------------

    /// Temperature-scaled softmax of a vector. Stabilized by max subtraction.
    Tensor softmax_temp(const Tensor& v, double tau) {
        check_rank("softmax_temp", v, 1);
        if (v.size() == 0) throw DimensionError("softmax_temp: empty input");
        return softmax_rows_impl(v, tau, 1, v.size());
    }

    /// Row-wise temperature-scaled softmax of a [R x n] matrix.
    Tensor row_softmax_temp(const Tensor& m, double tau) {
        check_rank("row_softmax_temp", m, 2);
        if (m.size() == 0) throw DimensionError("row_softmax_temp: empty input");
        return softmax_rows_impl(m, tau, m.extent(0), m.extent(1));
    }

    /// Per-row standardization then affine map, epsilon = 1e-5.
    Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
        if (x.rank() != 1 && x.rank() != 2)
            throw DimensionError("layer_norm: rank-1 or rank-2 input required, got " + shape_str(x.shape()));
        const std::size_t d = x.shape().back();
        const std::size_t rows = x.rank() == 2 ? x.extent(0) : 1;
        if (gamma.rank() != 1 || gamma.extent(0) != d || beta.rank() != 1 || beta.extent(0) != d)
            throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                                 shape_str(beta.shape()) + " do not match feature width " + std::to_string(d));
        constexpr double kEps = 1e-5;
        std::vector<double> xhat(rows * d);
        std::vector<double> inv_std(rows);
        std::vector<S> out(rows * d);
        for (std::size_t r = 0; r < rows; ++r) {
            double mu = 0;
            for (std::size_t j = 0; j < d; ++j) mu += x.value(r * d + j);
            mu /= static_cast<double>(d);
            double var = 0;
            for (std::size_t j = 0; j < d; ++j) {
                const double c = x.value(r * d + j) - mu;
                var += c * c;
            }
            var /= static_cast<double>(d);
            const double inv = 1.0 / std::sqrt(var + kEps);
            inv_std[r] = inv;
            for (std::size_t j = 0; j < d; ++j) {
                const double xh = (x.value(r * d + j) - mu) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = static_cast<S>(gamma.value(j) * xh + beta.value(j));
            }
        }
        Tensor o = adopt(x.shape(), std::move(out),
                         x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
        if (o.requires_grad())
            record([x, gamma, beta, o, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
                if (!pull(o)) return;
                const auto& g = o.ptr()->grad;
                if (gamma.requires_grad()) {
                    ensure_grad(gamma.ptr());
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < d; ++j)
                            gamma.ptr()->grad[j] +=
                                static_cast<S>(static_cast<double>(g[r * d + j]) * xhat[r * d + j]);
                }
                if (beta.requires_grad()) {
                    ensure_grad(beta.ptr());
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < d; ++j) beta.ptr()->grad[j] += g[r * d + j];
                }
                if (x.requires_grad()) {
                    ensure_grad(x.ptr());
                    auto& dx = x.ptr()->grad;
                    for (std::size_t r = 0; r < rows; ++r) {
                        double mean_dxh = 0, mean_dxh_xh = 0;
                        std::vector<double> dxh(d);
                        for (std::size_t j = 0; j < d; ++j) {
                            dxh[j] = static_cast<double>(g[r * d + j]) * gamma.value(j);
                            mean_dxh += dxh[j];
                            mean_dxh_xh += dxh[j] * xhat[r * d + j];
                        }
                        mean_dxh /= static_cast<double>(d);
                        mean_dxh_xh /= static_cast<double>(d);
                        for (std::size_t j = 0; j < d; ++j)
                            dx[r * d + j] += static_cast<S>(
                                inv_std[r] * (dxh[j] - mean_dxh - xhat[r * d + j] * mean_dxh_xh));
                    }
                }
            });
        return o;
    }

    Tensor l2_normalize(const Tensor& v) {
        check_rank("l2_normalize", v, 1);
        const double n = vec_norm(v, 0, v.size());
        if (n < kMinNorm)
            throw DegenerateInputError("l2_normalize: zero-norm input (|v| = " + std::to_string(n) + ")");
        std::vector<S> out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<S>(v.value(i) / n);
        Tensor o = adopt(v.shape(), std::move(out), v.requires_grad());
        if (o.requires_grad())
            record([v, o, n]() {
                if (!pull(o)) return;
                ensure_grad(v.ptr());
                const auto& g = o.ptr()->grad;
                double gy = 0;
                for (std::size_t i = 0; i < v.size(); ++i) gy += static_cast<double>(g[i]) * o.value(i);
                for (std::size_t i = 0; i < v.size(); ++i)
                    v.ptr()->grad[i] += static_cast<S>((static_cast<double>(g[i]) - o.value(i) * gy) / n);
            });
        return o;
    }

    Tensor l2_normalize_rows(const Tensor& m) {
        check_rank("l2_normalize_rows", m, 2);
        const std::size_t rows = m.extent(0), d = m.extent(1);
        std::vector<double> norms(rows);
        std::vector<S> out(rows * d);
        for (std::size_t r = 0; r < rows; ++r) {
            const double n = vec_norm(m, r * d, d);
            if (n < kMinNorm)
                throw DegenerateInputError("l2_normalize_rows: zero-norm row " + std::to_string(r));
            norms[r] = n;
            for (std::size_t j = 0; j < d; ++j) out[r * d + j] = static_cast<S>(m.value(r * d + j) / n);
        }
        Tensor o = adopt({rows, d}, std::move(out), m.requires_grad());
        if (o.requires_grad())
            record([m, o, rows, d, norms = std::move(norms)]() {
                if (!pull(o)) return;
                ensure_grad(m.ptr());
                const auto& g = o.ptr()->grad;
                for (std::size_t r = 0; r < rows; ++r) {
                    double gy = 0;
                    for (std::size_t j = 0; j < d; ++j)
                        gy += static_cast<double>(g[r * d + j]) * o.value(r * d + j);
                    for (std::size_t j = 0; j < d; ++j)
                        m.ptr()->grad[r * d + j] += static_cast<S>(
                            (static_cast<double>(g[r * d + j]) - o.value(r * d + j) * gy) / norms[r]);
                }
            });
        return o;
    }

    Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
        check_rank("cosine_similarity", a, 1);
        check_rank("cosine_similarity", b, 1);
        if (a.size() != b.size())
            throw DimensionError("cosine_similarity: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        const double na = vec_norm(a, 0, a.size());
        const double nb = vec_norm(b, 0, b.size());
        if (na < kMinNorm || nb < kMinNorm)
            throw DegenerateInputError("cosine_similarity: zero-norm input");
        double ab = 0;
        for (std::size_t i = 0; i < a.size(); ++i) ab += a.value(i) * b.value(i);
        const double c = ab / (na * nb);
        Tensor o = adopt({}, {static_cast<S>(c)}, a.requires_grad() || b.requires_grad());
        if (o.requires_grad())
            record([a, b, o, na, nb, c]() {
                if (!pull(o)) return;
                const double g = static_cast<double>(o.ptr()->grad[0]);
                if (a.requires_grad()) {
                    ensure_grad(a.ptr());
                    for (std::size_t i = 0; i < a.size(); ++i)
                        a.ptr()->grad[i] +=
                            static_cast<S>(g * (b.value(i) / (na * nb) - c * a.value(i) / (na * na)));
                }
                if (b.requires_grad()) {
                    ensure_grad(b.ptr());
                    for (std::size_t i = 0; i < b.size(); ++i)
                        b.ptr()->grad[i] +=
                            static_cast<S>(g * (a.value(i) / (na * nb) - c * b.value(i) / (nb * nb)));
                }
            });
        return o;
    }

    // ---- indexing / reshaping ----------------------------------------------

    Tensor pick(const Tensor& v, std::size_t index) {
        check_rank("pick", v, 1);
        if (index >= v.size()) throw UsageError("pick: index " + std::to_string(index) + " out of range");
        Tensor o = adopt({}, {v.values()[index]}, v.requires_grad());
        if (o.requires_grad())
            record([v, o, index]() {
                if (!pull(o)) return;
                ensure_grad(v.ptr());
                v.ptr()->grad[index] += o.ptr()->grad[0];
            });
        return o;
    }

    Tensor gather(const Tensor& v, std::vector<std::size_t> indices) {
        check_rank("gather", v, 1);
        std::vector<S> out(indices.size());
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (indices[i] >= v.size()) throw UsageError("gather: index out of range");
            out[i] = v.values()[indices[i]];
        }
        Tensor o = adopt({indices.size()}, std::move(out), v.requires_grad());
        if (o.requires_grad())
            record([v, o, indices = std::move(indices)]() {
                if (!pull(o)) return;
                ensure_grad(v.ptr());
                for (std::size_t i = 0; i < indices.size(); ++i)
                    v.ptr()->grad[indices[i]] += o.ptr()->grad[i];
            });
        return o;
    }

    /// Accumulating inverse of gather: out[P], out[indices[i]] += v[i].
    Tensor scatter(const Tensor& v, std::vector<std::size_t> indices, std::size_t width) {
        check_rank("scatter", v, 1);
        if (indices.size() != v.size()) throw DimensionError("scatter: index count mismatch");
        std::vector<S> out(width, S(0));
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (indices[i] >= width) throw UsageError("scatter: index out of range");
            out[indices[i]] += v.values()[i];
        }
        Tensor o = adopt({width}, std::move(out), v.requires_grad());
        if (o.requires_grad())
            record([v, o, indices = std::move(indices)]() {
                if (!pull(o)) return;
                ensure_grad(v.ptr());
                for (std::size_t i = 0; i < indices.size(); ++i)
                    v.ptr()->grad[i] += o.ptr()->grad[indices[i]];
            });
        return o;
    }

    Tensor gather_rows(const Tensor& m, std::vector<std::size_t> rows) {
        check_rank("gather_rows", m, 2);
        const std::size_t d = m.extent(1);
        std::vector<S> out(rows.size() * d);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i] >= m.extent(0)) throw UsageError("gather_rows: row out of range");
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] = m.values()[rows[i] * d + j];
        }
        Tensor o = adopt({rows.size(), d}, std::move(out), m.requires_grad());
        if (o.requires_grad())
            record([m, o, d, rows = std::move(rows)]() {
                if (!pull(o)) return;
                ensure_grad(m.ptr());
                for (std::size_t i = 0; i < rows.size(); ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        m.ptr()->grad[rows[i] * d + j] += o.ptr()->grad[i * d + j];
            });
        return o;
    }

    /// Accumulating row scatter: out[R x d] with out[rows[i]] += m[i].
    Tensor scatter_rows(const Tensor& m, std::vector<std::size_t> rows, std::size_t total_rows) {
        check_rank("scatter_rows", m, 2);
        if (rows.size() != m.extent(0)) throw DimensionError("scatter_rows: row count mismatch");
        const std::size_t d = m.extent(1);
        std::vector<S> out(total_rows * d, S(0));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i] >= total_rows) throw UsageError("scatter_rows: row out of range");
            for (std::size_t j = 0; j < d; ++j) out[rows[i] * d + j] += m.values()[i * d + j];
        }
        Tensor o = adopt({total_rows, d}, std::move(out), m.requires_grad());
        if (o.requires_grad())
            record([m, o, d, rows = std::move(rows)]() {
                if (!pull(o)) return;
                ensure_grad(m.ptr());
                for (std::size_t i = 0; i < rows.size(); ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        m.ptr()->grad[i * d + j] += o.ptr()->grad[rows[i] * d + j];
            });
        return o;
    }

    Tensor slice_rows(const Tensor& m, std::size_t r0, std::size_t count) {
        check_rank("slice_rows", m, 2);
        if (r0 + count > m.extent(0)) throw DimensionError("slice_rows: range out of bounds");
        std::vector<std::size_t> idx(count);
        for (std::size_t i = 0; i < count; ++i) idx[i] = r0 + i;
        return gather_rows(m, std::move(idx));
    }

    Tensor slice_cols(const Tensor& m, std::size_t c0, std::size_t count) {
        check_rank("slice_cols", m, 2);
        const std::size_t rows = m.extent(0), cols = m.extent(1);
        if (c0 + count > cols) throw DimensionError("slice_cols: range out of bounds");
        std::vector<S> out(rows * count);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < count; ++j) out[r * count + j] = m.values()[r * cols + c0 + j];
        Tensor o = adopt({rows, count}, std::move(out), m.requires_grad());
        if (o.requires_grad())
            record([m, o, rows, cols, c0, count]() {
                if (!pull(o)) return;
                ensure_grad(m.ptr());
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < count; ++j)
                        m.ptr()->grad[r * cols + c0 + j] += o.ptr()->grad[r * count + j];
            });
        return o;
    }

    /// Stack rank-1 [d] (one row each) or rank-2 [r x d] blocks vertically.
    Tensor concat_rows(const std::vector<Tensor>& parts) {
        if (parts.empty()) throw DimensionError("concat_rows: no inputs");
        const std::size_t d = parts[0].shape().back();
        std::size_t total = 0;
        bool rg = false;
        for (const auto& p : parts) {
            if (p.rank() != 1 && p.rank() != 2)
                throw DimensionError("concat_rows: rank must be 1 or 2");
            if (p.shape().back() != d) throw DimensionError("concat_rows: width mismatch");
            total += p.rank() == 2 ? p.extent(0) : 1;
            rg = rg || p.requires_grad();
        }
        std::vector<S> out;
        out.reserve(total * d);
        for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
        Tensor o = adopt({total, d}, std::move(out), rg);
        if (o.requires_grad())
            record([parts, o, d]() {
                if (!pull(o)) return;
                std::size_t off = 0;
                for (const auto& p : parts) {
                    const std::size_t n = p.size();
                    if (p.requires_grad()) {
                        ensure_grad(p.ptr());
                        for (std::size_t i = 0; i < n; ++i) p.ptr()->grad[i] += o.ptr()->grad[off + i];
                    }
                    off += n;
                }
            });
        return o;
    }

    Tensor concat_cols(const std::vector<Tensor>& parts) {
        if (parts.empty()) throw DimensionError("concat_cols: no inputs");
        const std::size_t rows = parts[0].extent(0);
        std::size_t total = 0;
        bool rg = false;
        for (const auto& p : parts) {
            check_rank("concat_cols", p, 2);
            if (p.extent(0) != rows) throw DimensionError("concat_cols: row count mismatch");
            total += p.extent(1);
            rg = rg || p.requires_grad();
        }
        std::vector<S> out(rows * total);
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t c = p.extent(1);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) out[r * total + off + j] = p.values()[r * c + j];
            off += c;
        }
        Tensor o = adopt({rows, total}, std::move(out), rg);
        if (o.requires_grad())
            record([parts, o, rows, total]() {
                if (!pull(o)) return;
                std::size_t off2 = 0;
                for (const auto& p : parts) {
                    const std::size_t c = p.extent(1);
                    if (p.requires_grad()) {
                        ensure_grad(p.ptr());
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < c; ++j)
                                p.ptr()->grad[r * c + j] += o.ptr()->grad[r * total + off2 + j];
                    }
                    off2 += c;
                }
            });
        return o;
    }

    Tensor concat_vecs(const Tensor& a, const Tensor& b) {
        check_rank("concat_vecs", a, 1);
        check_rank("concat_vecs", b, 1);
        std::vector<S> out;
        out.reserve(a.size() + b.size());
        out.insert(out.end(), a.values().begin(), a.values().end());
        out.insert(out.end(), b.values().begin(), b.values().end());
        Tensor o = adopt({a.size() + b.size()}, std::move(out), a.requires_grad() || b.requires_grad());
        if (o.requires_grad())
            record([a, b, o]() {
                if (!pull(o)) return;
                if (a.requires_grad()) {
                    ensure_grad(a.ptr());
                    for (std::size_t i = 0; i < a.size(); ++i) a.ptr()->grad[i] += o.ptr()->grad[i];
                }
                if (b.requires_grad()) {
                    ensure_grad(b.ptr());
                    for (std::size_t i = 0; i < b.size(); ++i)
                        b.ptr()->grad[i] += o.ptr()->grad[a.size() + i];
                }
            });
        return o;
    }

    /// Interpret a rank-1 vector as a [1 x d] row (shared storage semantics
    /// are not needed; this copies).
    Tensor as_row(const Tensor& v) {
        check_rank("as_row", v, 1);
        return concat_rows({v});
    }

    Tensor row(const Tensor& m, std::size_t r) {
        check_rank("row", m, 2);
        const std::size_t d = m.extent(1);
        if (r >= m.extent(0)) throw UsageError("row: index out of range");
        std::vector<S> out(m.values().begin() + r * d, m.values().begin() + (r + 1) * d);
        Tensor o = adopt({d}, std::move(out), m.requires_grad());
        if (o.requires_grad())
            record([m, o, r, d]() {
                if (!pull(o)) return;
                ensure_grad(m.ptr());
                for (std::size_t j = 0; j < d; ++j) m.ptr()->grad[r * d + j] += o.ptr()->grad[j];
            });
        return o;
    }

private:
    static constexpr double kMinNorm = 1e-12;

    std::vector<std::function<void()>> nodes_;
    std::vector<TensorT<S>> outputs_;

    static std::vector<S> cast_vec(const std::vector<double>& v) {
        std::vector<S> out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<S>(v[i]);
        return out;
    }

    static double vec_norm(const TensorT<S>& t, std::size_t off, std::size_t n) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double x = t.value(off + i);
            s += x * x;
        }
        return std::sqrt(s);
    }

    static void ensure_grad(TensorDataT<S>* d) {
        if (d->grad.empty()) d->grad.assign(d->values.size(), S(0));
    }

    /// True if gradient flowed into this op's output.
    static bool pull(const TensorT<S>& out) { return !out.ptr()->grad.empty(); }

    void check_tape(const TensorT<S>& t) const {
        if (t.ptr()->tape != nullptr && t.ptr()->tape != this)
            throw UsageError("tensor from a different tape used as input");
    }

    void check_same_shape(const char* op, const TensorT<S>& a, const TensorT<S>& b) const {
        if (a.shape() != b.shape())
            throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
    }

    void check_rank(const char* op, const TensorT<S>& t, std::size_t r) const {
        check_tape(t);
        if (t.rank() != r)
            throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                                 shape_str(t.shape()));
    }

    TensorT<S> adopt(Shape shape, std::vector<S> values, bool requires_grad) {
        auto d = std::make_shared<TensorDataT<S>>();
        d->shape = std::move(shape);
        d->values = std::move(values);
        d->requires_grad = requires_grad;
        d->tape = this;
        TensorT<S> t(std::move(d));
        outputs_.push_back(t);
        return t;
    }

    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

    template <typename FwdFn, typename BwdFn>
    TensorT<S> unary_ew(const TensorT<S>& a, FwdFn fwd, BwdFn dfdx) {
        check_tape(a);
        std::vector<S> out(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<S>(fwd(a.value(i)));
        TensorT<S> o = adopt(a.shape(), std::move(out), a.requires_grad());
        if (o.requires_grad())
            record([a, o, dfdx]() {
                if (!pull(o)) return;
                ensure_grad(a.ptr());
                for (std::size_t i = 0; i < a.size(); ++i)
                    a.ptr()->grad[i] +=
                        static_cast<S>(dfdx(a.value(i), static_cast<double>(o.ptr()->grad[i])));
            });
        return o;
    }

    template <typename FwdFn, typename BwdFn>
    TensorT<S> binary_ew(const TensorT<S>& a, const TensorT<S>& b, FwdFn fwd, BwdFn bwd) {
        check_tape(a);
        check_tape(b);
        std::vector<S> out(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<S>(fwd(a.value(i), b.value(i)));
        TensorT<S> o = adopt(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
        if (o.requires_grad())
            record([a, b, o, bwd]() {
                if (!pull(o)) return;
                S* da = nullptr;
                S* db = nullptr;
                if (a.requires_grad()) {
                    ensure_grad(a.ptr());
                    da = a.ptr()->grad.data();
                }
                if (b.requires_grad()) {
                    ensure_grad(b.ptr());
                    db = b.ptr()->grad.data();
                }
                bwd(a.size(), a.values().data(), b.values().data(), o.ptr()->grad.data(), da, db);
            });
        return o;
    }

    TensorT<S> softmax_rows_impl(const TensorT<S>& x, double tau, std::size_t rows, std::size_t n) {
        check_tape(x);
        if (tau <= 0.0) throw ParameterError("softmax_temp: tau must be positive, got " + std::to_string(tau));
        // probabilities are clamped into the open representable interval so
        // saturated entries never round to an exact 0 or 1; a single-element
        // softmax is exactly 1 and stays that way
        const double lo = static_cast<double>(std::numeric_limits<S>::min());
        const double hi = n > 1 ? static_cast<double>(std::nextafter(S(1), S(0))) : 1.0;
        std::vector<S> out(rows * n);
        for (std::size_t r = 0; r < rows; ++r) {
            double mx = x.value(r * n);
            for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x.value(r * n + i));
            double s = 0;
            std::vector<double> e(n);
            for (std::size_t i = 0; i < n; ++i) {
                e[i] = std::exp((x.value(r * n + i) - mx) / tau);
                s += e[i];
            }
            for (std::size_t i = 0; i < n; ++i)
                out[r * n + i] = static_cast<S>(std::clamp(e[i] / s, lo, hi));
        }
        TensorT<S> o = adopt(x.shape(), std::move(out), x.requires_grad());
        if (o.requires_grad())
            record([x, o, tau, rows, n]() {
                if (!pull(o)) return;
                ensure_grad(x.ptr());
                const auto& g = o.ptr()->grad;
                for (std::size_t r = 0; r < rows; ++r) {
                    double gp = 0;
                    for (std::size_t i = 0; i < n; ++i)
                        gp += static_cast<double>(g[r * n + i]) * o.value(r * n + i);
                    for (std::size_t i = 0; i < n; ++i)
                        x.ptr()->grad[r * n + i] += static_cast<S>(
                            o.value(r * n + i) * (static_cast<double>(g[r * n + i]) - gp) / tau);
                }
            });
        return o;
    }
};

// ---- small conveniences shared across modules -------------------------------

/// Fixed left-fold sum of scalar tensors (deterministic reduction order).
template <typename S>
TensorT<S> sum_scalars(TapeT<S>& tape, const std::vector<TensorT<S>>& xs) {
    if (xs.empty()) throw UsageError("sum_scalars: empty list");
    TensorT<S> acc = xs[0];
    for (std::size_t i = 1; i < xs.size(); ++i) acc = tape.add(acc, xs[i]);
    return acc;
}

template <typename S>
TensorT<S> mean_scalars(TapeT<S>& tape, const std::vector<TensorT<S>>& xs) {
    return tape.scale(sum_scalars(tape, xs), 1.0 / static_cast<double>(xs.size()));
}

/// y = W.x + b with W[out x in], x[in], b[out].
template <typename S>
TensorT<S> affine(TapeT<S>& tape, const TensorT<S>& w, const TensorT<S>& x, const TensorT<S>& b) {
    return tape.add(tape.matvec(w, x), b);
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace egoprompt
