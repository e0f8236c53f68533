#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <vector>

#include "egoprompt/encoder.hpp"
#include "egoprompt/tensor.hpp"

namespace egoprompt {

inline std::size_t component_index(Component c) { return c == Component::kVerb ? 0 : 1; }

/// Unified pool of P (query, value) prompt pairs shared by both components,
/// with per-component selection statistics. The integer counters are
/// diagnostics; the per-step window of attention masses is what the frequency
/// regularizer differentiates through.
template <typename S>
struct PromptPoolT {
    TensorT<S> queries;  // [P x d]
    TensorT<S> values;   // [P x d]

    std::array<std::vector<std::uint64_t>, 2> counters;  // hard selection counts
    std::array<std::vector<double>, 2> soft_freq;        // window attention mass

    struct SelectionEvent {
        std::vector<std::size_t> indices;
        TensorT<S> weights;  // [k] on the step's tape
    };
    std::array<std::vector<SelectionEvent>, 2> window;

    std::size_t size() const { return queries.extent(0); }
    std::size_t width() const { return queries.extent(1); }

    void reset_counters() {
        for (auto& c : counters) std::fill(c.begin(), c.end(), 0);
    }

    void reset_window() {
        for (auto& w : window) w.clear();
        for (auto& f : soft_freq) std::fill(f.begin(), f.end(), 0.0);
    }

    void set_trainable(bool trainable) {
        queries.set_requires_grad(trainable);
        values.set_requires_grad(trainable);
    }

    template <typename Fn>
    void for_each_param(Fn&& fn) const {
        fn("pool.queries", queries);
        fn("pool.values", values);
    }
};

template <typename S>
PromptPoolT<S> init_pool(std::size_t pool_size, std::size_t width, std::uint64_t seed) {
    if (pool_size < 1) throw ParameterError("init_pool: pool size must be >= 1");
    if (width < 1) throw ParameterError("init_pool: width must be >= 1");
    PromptPoolT<S> pool;
    const double bound = 1.0 / std::sqrt(static_cast<double>(width));
    Rng rq = Rng(seed).fork("pool_queries");
    Rng rv = Rng(seed).fork("pool_values");
    pool.queries = TensorT<S>::uniform({pool_size, width}, rq, -bound, bound, true);
    pool.values = TensorT<S>::uniform({pool_size, width}, rv, -bound, bound, true);
    auto assert_rows_nonzero = [&](const TensorT<S>& m) {
        for (std::size_t r = 0; r < pool_size; ++r) {
            double n = 0;
            for (std::size_t j = 0; j < width; ++j) n += m.value(r, j) * m.value(r, j);
            if (n <= 0) throw DegenerateInputError("init_pool: zero-norm prompt row " + std::to_string(r));
        }
    };
    assert_rows_nonzero(pool.queries);
    assert_rows_nonzero(pool.values);
    for (auto& c : pool.counters) c.assign(pool_size, 0);
    for (auto& f : pool.soft_freq) f.assign(pool_size, 0.0);
    return pool;
}

template <typename S>
struct RetrievalResultT {
    Component component = Component::kVerb;
    std::vector<std::size_t> indices;  // k ids, descending similarity, ties to lower index
    TensorT<S> weights;                // [k] attention over the selected set
};

/// Top-k cosine retrieval with a temperature-scaled softmax over the selected
/// set. The index set is a hard selection; gradients treat it as constant and
/// flow into the selected queries through the weights.
template <typename S>
RetrievalResultT<S> retrieve_topk(TapeT<S>& tape, const TensorT<S>& f_c, PromptPoolT<S>& pool,
                                  std::size_t k, double tau_pool, Component component) {
    const std::size_t pool_size = pool.size();
    if (k < 1 || k > pool_size)
        throw ParameterError("retrieve_topk: k = " + std::to_string(k) + " outside [1, " +
                             std::to_string(pool_size) + "]");
    if (tau_pool <= 0)
        throw ParameterError("retrieve_topk: tau_pool must be positive, got " + std::to_string(tau_pool));

    auto cos_all = tape.matvec(tape.l2_normalize_rows(pool.queries), tape.l2_normalize(f_c));

    std::vector<std::size_t> order(pool_size);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return cos_all.value(a) > cos_all.value(b); });
    order.resize(k);

    RetrievalResultT<S> r;
    r.component = component;
    r.indices = order;
    r.weights = tape.softmax_temp(tape.gather(cos_all, std::move(order)), tau_pool);
    return r;
}

/// f_c' = sum_i alpha_i * v_i over the retrieved value prompts.
template <typename S>
TensorT<S> fuse_patterns(TapeT<S>& tape, const RetrievalResultT<S>& r, PromptPoolT<S>& pool) {
    if (r.indices.empty() || r.indices.size() != r.weights.size())
        throw UsageError("fuse_patterns: retrieval result does not match its weights");
    for (auto i : r.indices)
        if (i >= pool.size()) throw UsageError("fuse_patterns: retrieval result does not match pool");
    return tape.vecmat(r.weights, tape.gather_rows(pool.values, r.indices));
}

/// Learnable 2d -> d projection over the concatenated component features,
/// followed by L2 normalization. Trainable in stage 2 only.
template <typename S>
struct FusionProjectorT {
    TensorT<S> weight;  // [d x 2d]
    TensorT<S> bias;    // [d]

    void set_trainable(bool trainable) {
        weight.set_requires_grad(trainable);
        bias.set_requires_grad(trainable);
    }

    template <typename Fn>
    void for_each_param(Fn&& fn) const {
        fn("projector.weight", weight);
        fn("projector.bias", bias);
    }
};

/// Starts near the average of the two inputs (0.5 [I | I] plus base-scale
/// noise) so f_s begins as an informative mixture rather than a random map.
template <typename S>
FusionProjectorT<S> init_fusion_projector(std::size_t width, std::uint64_t seed) {
    FusionProjectorT<S> proj;
    Rng rng = Rng(seed).fork("fusion_projector");
    proj.weight = TensorT<S>::gaussian({width, 2 * width}, rng, 0.0, 0.02, true);
    for (std::size_t i = 0; i < width; ++i) {
        proj.weight.values_mut()[i * 2 * width + i] += S(0.5);
        proj.weight.values_mut()[i * 2 * width + width + i] += S(0.5);
    }
    proj.bias = TensorT<S>::zeros({width}, true);
    return proj;
}

template <typename S>
TensorT<S> project_fusion(TapeT<S>& tape, const TensorT<S>& f_v_prime, const TensorT<S>& f_n_prime,
                          const FusionProjectorT<S>& proj) {
    if (f_v_prime.size() != f_n_prime.size())
        throw DimensionError("project_fusion: component widths differ, " + shape_str(f_v_prime.shape()) +
                             " vs " + shape_str(f_n_prime.shape()));
    auto cat = tape.concat_vecs(f_v_prime, f_n_prime);
    return tape.l2_normalize(affine(tape, proj.weight, cat, proj.bias));
}

/// Bumps hard counters and accumulates the window's soft attention masses.
template <typename S>
void record_selection(const RetrievalResultT<S>& r, PromptPoolT<S>& pool) {
    const std::size_t c = component_index(r.component);
    for (std::size_t i = 0; i < r.indices.size(); ++i) {
        pool.counters[c][r.indices[i]] += 1;
        pool.soft_freq[c][r.indices[i]] += r.weights.value(i);
    }
    pool.window[c].push_back({r.indices, r.weights});
}

/// Shannon entropy (natural log) of the normalized hard-selection histogram.
template <typename S>
double selection_entropy(const PromptPoolT<S>& pool, Component component) {
    const auto& c = pool.counters[component_index(component)];
    const double total = static_cast<double>(std::accumulate(c.begin(), c.end(), std::uint64_t(0)));
    if (total <= 0) throw UsageError("selection_entropy: no selections recorded");
    double h = 0;
    for (auto n : c) {
        if (n == 0) continue;
        const double p = static_cast<double>(n) / total;
        h -= p * std::log(p);
    }
    return h;
}

using PromptPool = PromptPoolT<float>;
using RetrievalResult = RetrievalResultT<float>;
using FusionProjector = FusionProjectorT<float>;

}  // namespace egoprompt
