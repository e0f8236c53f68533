#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "egoprompt/tensor.hpp"

namespace egoprompt {

struct GradCheckLeafReport {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
};

struct GradCheckReport {
    std::vector<GradCheckLeafReport> leaves;
    double max_rel_err = 0.0;
    bool pass = true;
    double tol = 0.0;
};

/// Relative error with an absolute floor of 1 so near-zero gradient pairs are
/// compared absolutely. rel = |a - b| / max(|a|, |b|, 1).
inline double grad_rel_err(double a, double b) {
    const double denom = std::max({std::fabs(a), std::fabs(b), 1.0});
    return std::fabs(a - b) / denom;
}

/// Compares reverse-mode gradients of the scalar computation `f` against
/// central finite differences over every entry of every leaf. The comparison
/// is only meaningful at a point where `f` is locally smooth (fixed top-k
/// index sets, inputs away from |x| kinks); callers choose probe points
/// accordingly. Use the double instantiation: the differencing itself is the
/// oracle and must not be polluted by storage rounding.
template <typename S>
GradCheckReport grad_check(const std::function<TensorT<S>(TapeT<S>&)>& f,
                           const std::vector<std::pair<std::string, TensorT<S>>>& leaves,
                           double h = 1e-3, double tol = 1e-3) {
    auto eval = [&]() -> double {
        TapeT<S> tape;
        TensorT<S> root = f(tape);
        if (root.size() != 1) throw UsageError("grad_check: computation must produce a scalar");
        const double v = root.scalar_value();
        if (!std::isfinite(v)) throw ProbeError("grad_check: non-finite value at probe point");
        return v;
    };

    eval();  // probe the unperturbed point first

    // Reverse-mode gradients.
    for (auto& [name, leaf] : leaves) {
        if (!leaf.requires_grad())
            throw UsageError("grad_check: leaf '" + name + "' does not require grad");
        const_cast<TensorT<S>&>(leaf).zero_grad();
    }
    std::vector<std::vector<double>> reverse(leaves.size());
    {
        TapeT<S> tape;
        TensorT<S> root = f(tape);
        tape.backward(root);
        for (std::size_t li = 0; li < leaves.size(); ++li) {
            const auto& leaf = leaves[li].second;
            reverse[li].resize(leaf.size());
            for (std::size_t i = 0; i < leaf.size(); ++i) reverse[li][i] = leaf.grad_value(i);
        }
    }

    GradCheckReport report;
    report.tol = tol;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto leaf = leaves[li].second;
        GradCheckLeafReport lr;
        lr.name = leaves[li].first;
        for (std::size_t i = 0; i < leaf.size(); ++i) {
            const double saved = leaf.value(i);
            leaf.values_mut()[i] = static_cast<S>(saved + h);
            const double fp = eval();
            leaf.values_mut()[i] = static_cast<S>(saved - h);
            const double fm = eval();
            leaf.values_mut()[i] = static_cast<S>(saved);
            const double fd = (fp - fm) / (2.0 * h);
            const double err = grad_rel_err(reverse[li][i], fd);
            if (err > lr.max_rel_err) {
                lr.max_rel_err = err;
                lr.worst_index = i;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, lr.max_rel_err);
        report.leaves.push_back(std::move(lr));
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

// ---- standard per-operation check grid --------------------------------------

struct OpGradCheckResult {
    std::string op;
    double max_rel_err = 0.0;
    bool pass = true;
};

namespace detail {

using DTensor = TensorT<double>;
using DTape = TapeT<double>;

/// Uniform[-1,1] tensor; optionally redrawn until every entry clears a margin
/// around 0 (for |x| kinks) or until the row norms clear a floor.
inline DTensor draw(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, double away_from_zero = 0.0,
                    double min_row_norm = 0.0) {
    const std::size_t d = shape.empty() ? 1 : shape.back();
    const std::size_t rows = shape_numel(shape) / d;
    std::vector<double> v(shape_numel(shape));
    for (std::size_t r = 0; r < rows; ++r) {
        for (int attempt = 0; attempt < 1000; ++attempt) {
            bool ok = true;
            double norm2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
                double x = rng.uniform(lo, hi);
                if (away_from_zero > 0 && std::fabs(x) < away_from_zero) ok = false;
                v[r * d + j] = x;
                norm2 += x * x;
            }
            if (min_row_norm > 0 && std::sqrt(norm2) < min_row_norm) ok = false;
            if (ok) break;
        }
    }
    return DTensor::make(std::move(shape), std::move(v), true);
}

/// Scalar readout: elementwise-weighted sum so every output entry carries a
/// distinct gradient.
inline DTensor readout(DTape& tape, const DTensor& out, Rng& rng) {
    std::vector<double> w(out.size());
    for (auto& x : w) x = rng.uniform(-1.0, 1.0);
    return tape.sum(tape.mul(out, tape.constant(out.shape(), std::move(w))));
}

struct OpCase {
    std::string name;
    // Builds leaves and a scalar computation for one seeded instance.
    std::function<GradCheckReport(Rng&, double h, double tol)> run;
};

inline std::vector<OpCase> op_grad_cases() {
    using L = std::vector<std::pair<std::string, DTensor>>;
    std::vector<OpCase> cases;
    auto add = [&](std::string name, auto fn) { cases.push_back({std::move(name), fn}); };

    add("matmul", [](Rng& rng, double h, double tol) {
        auto a = draw(rng, {3, 4});
        auto b = draw(rng, {4, 2});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.matmul(a, b), r2); }, L{{"a", a}, {"b", b}}, h, tol);
    });
    add("matmul_nt", [](Rng& rng, double h, double tol) {
        auto a = draw(rng, {3, 4});
        auto b = draw(rng, {2, 4});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.matmul_nt(a, b), r2); }, L{{"a", a}, {"b", b}}, h,
            tol);
    });
    add("matvec", [](Rng& rng, double h, double tol) {
        auto m = draw(rng, {3, 4});
        auto v = draw(rng, {4});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.matvec(m, v), r2); }, L{{"m", m}, {"v", v}}, h, tol);
    });
    add("vecmat", [](Rng& rng, double h, double tol) {
        auto v = draw(rng, {3});
        auto m = draw(rng, {3, 4});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.vecmat(v, m), r2); }, L{{"v", v}, {"m", m}}, h, tol);
    });
    add("add", [](Rng& rng, double h, double tol) {
        auto a = draw(rng, {3, 4});
        auto b = draw(rng, {3, 4});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.add(a, b), r2); }, L{{"a", a}, {"b", b}}, h, tol);
    });
    add("sub", [](Rng& rng, double h, double tol) {
        auto a = draw(rng, {3, 4});
        auto b = draw(rng, {3, 4});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.sub(a, b), r2); }, L{{"a", a}, {"b", b}}, h, tol);
    });
    add("mul", [](Rng& rng, double h, double tol) {
        auto a = draw(rng, {3, 4});
        auto b = draw(rng, {3, 4});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.mul(a, b), r2); }, L{{"a", a}, {"b", b}}, h, tol);
    });
    add("scale", [](Rng& rng, double h, double tol) {
        auto a = draw(rng, {5});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.scale(a, 1.7), r2); }, L{{"a", a}}, h, tol);
    });
    add("add_bias", [](Rng& rng, double h, double tol) {
        auto m = draw(rng, {3, 4});
        auto b = draw(rng, {4});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.add_bias(m, b), r2); }, L{{"m", m}, {"b", b}}, h,
            tol);
    });
    add("sum", [](Rng& rng, double h, double tol) {
        auto a = draw(rng, {3, 4});
        return grad_check<double>([&](DTape& t) { return t.sum(a); }, L{{"a", a}}, h, tol);
    });
    add("mean_rows", [](Rng& rng, double h, double tol) {
        auto m = draw(rng, {3, 4});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.mean_rows(m), r2); }, L{{"m", m}}, h, tol);
    });
    add("dot", [](Rng& rng, double h, double tol) {
        auto a = draw(rng, {5});
        auto b = draw(rng, {5});
        return grad_check<double>([&](DTape& t) { return t.dot(a, b); }, L{{"a", a}, {"b", b}}, h, tol);
    });
    add("softmax_temp", [](Rng& rng, double h, double tol) {
        auto v = draw(rng, {5});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.softmax_temp(v, 0.5), r2); }, L{{"v", v}}, h, tol);
    });
    add("row_softmax_temp", [](Rng& rng, double h, double tol) {
        auto m = draw(rng, {3, 4});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.row_softmax_temp(m, 0.7), r2); }, L{{"m", m}}, h,
            tol);
    });
    add("layer_norm", [](Rng& rng, double h, double tol) {
        auto x = draw(rng, {3, 4});
        auto gamma = draw(rng, {4});
        auto beta = draw(rng, {4});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.layer_norm(x, gamma, beta), r2); },
            L{{"x", x}, {"gamma", gamma}, {"beta", beta}}, h, tol);
    });
    add("l2_normalize", [](Rng& rng, double h, double tol) {
        auto v = draw(rng, {5}, -1.0, 1.0, 0.0, 0.4);
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.l2_normalize(v), r2); }, L{{"v", v}}, h, tol);
    });
    add("l2_normalize_rows", [](Rng& rng, double h, double tol) {
        auto m = draw(rng, {3, 4}, -1.0, 1.0, 0.0, 0.4);
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.l2_normalize_rows(m), r2); }, L{{"m", m}}, h, tol);
    });
    add("cosine_similarity", [](Rng& rng, double h, double tol) {
        auto a = draw(rng, {5}, -1.0, 1.0, 0.0, 0.4);
        auto b = draw(rng, {5}, -1.0, 1.0, 0.0, 0.4);
        return grad_check<double>([&](DTape& t) { return t.cosine_similarity(a, b); }, L{{"a", a}, {"b", b}}, h,
                                  tol);
    });
    add("abs", [](Rng& rng, double h, double tol) {
        // entries kept away from the |x| kink so central differences are valid
        auto a = draw(rng, {3, 4}, -1.0, 1.0, 0.05);
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.abs(a), r2); }, L{{"a", a}}, h, tol);
    });
    add("log", [](Rng& rng, double h, double tol) {
        auto a = draw(rng, {5}, 0.5, 1.5);
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.log(a), r2); }, L{{"a", a}}, h, tol);
    });
    add("neg", [](Rng& rng, double h, double tol) {
        auto a = draw(rng, {5});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.neg(a), r2); }, L{{"a", a}}, h, tol);
    });
    add("gelu", [](Rng& rng, double h, double tol) {
        auto a = draw(rng, {3, 4});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.gelu(a), r2); }, L{{"a", a}}, h, tol);
    });
    add("pick", [](Rng& rng, double h, double tol) {
        auto v = draw(rng, {5});
        return grad_check<double>([&](DTape& t) { return t.pick(v, 2); }, L{{"v", v}}, h, tol);
    });
    add("gather", [](Rng& rng, double h, double tol) {
        auto v = draw(rng, {6});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.gather(v, {4, 1, 3}), r2); }, L{{"v", v}}, h, tol);
    });
    add("scatter", [](Rng& rng, double h, double tol) {
        auto v = draw(rng, {3});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.scatter(v, {5, 0, 2}, 6), r2); }, L{{"v", v}}, h,
            tol);
    });
    add("gather_rows", [](Rng& rng, double h, double tol) {
        auto m = draw(rng, {4, 3});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.gather_rows(m, {2, 0}), r2); }, L{{"m", m}}, h,
            tol);
    });
    add("scatter_rows", [](Rng& rng, double h, double tol) {
        auto m = draw(rng, {2, 3});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.scatter_rows(m, {3, 1}, 4), r2); }, L{{"m", m}}, h,
            tol);
    });
    add("slice_rows", [](Rng& rng, double h, double tol) {
        auto m = draw(rng, {4, 5});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.slice_rows(m, 1, 2), r2); }, L{{"m", m}}, h, tol);
    });
    add("slice_cols", [](Rng& rng, double h, double tol) {
        auto m = draw(rng, {4, 5});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.slice_cols(m, 2, 3), r2); }, L{{"m", m}}, h, tol);
    });
    add("concat_rows", [](Rng& rng, double h, double tol) {
        auto a = draw(rng, {2, 3});
        auto b = draw(rng, {3});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.concat_rows({a, b}), r2); }, L{{"a", a}, {"b", b}},
            h, tol);
    });
    add("concat_cols", [](Rng& rng, double h, double tol) {
        auto a = draw(rng, {3, 2});
        auto b = draw(rng, {3, 3});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.concat_cols({a, b}), r2); }, L{{"a", a}, {"b", b}},
            h, tol);
    });
    add("concat_vecs", [](Rng& rng, double h, double tol) {
        auto a = draw(rng, {3});
        auto b = draw(rng, {4});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.concat_vecs(a, b), r2); }, L{{"a", a}, {"b", b}},
            h, tol);
    });
    add("row", [](Rng& rng, double h, double tol) {
        auto m = draw(rng, {4, 3});
        Rng ro = rng.fork("readout");
        return grad_check<double>(
            [&](DTape& t) { Rng r2 = ro; return readout(t, t.row(m, 1), r2); }, L{{"m", m}}, h, tol);
    });
    return cases;
}

}  // namespace detail

/// Runs every registered differentiable operation against the central
/// finite-difference oracle on `instances` seeded random inputs each.
inline std::vector<OpGradCheckResult> run_op_grad_check_grid(int instances = 100, double h = 1e-3,
                                                             double tol = 1e-3,
                                                             std::uint64_t seed = 20250809) {
    std::vector<OpGradCheckResult> results;
    for (auto& c : detail::op_grad_cases()) {
        OpGradCheckResult res;
        res.op = c.name;
        Rng base(seed ^ fnv1a64(c.name));
        for (int i = 0; i < instances; ++i) {
            Rng rng = base.fork("instance", static_cast<std::uint64_t>(i));
            GradCheckReport rep = c.run(rng, h, tol);
            res.max_rel_err = std::max(res.max_rel_err, rep.max_rel_err);
        }
        res.pass = res.max_rel_err <= tol;
        results.push_back(std::move(res));
    }
    return results;
}

}  // namespace egoprompt
