#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "egoprompt/encoder.hpp"
#include "egoprompt/prompt_pool.hpp"
#include "egoprompt/tensor.hpp"

namespace egoprompt {

struct LossWeights {
    double lambda_freq = 1.0;
    double lambda_orth = 1.0;
    double lambda_kg = 1.0;
    double tau_cls = 0.07;
    std::size_t k_freq = 4;  // size of the most/least-selected sets

    void validate(std::size_t pool_size) const {
        if (lambda_freq < 0) throw ConfigError("loss.lambda_freq: must be >= 0");
        if (lambda_orth < 0) throw ConfigError("loss.lambda_orth: must be >= 0");
        if (lambda_kg < 0) throw ConfigError("loss.lambda_kg: must be >= 0");
        if (tau_cls <= 0) throw ConfigError("loss.tau_cls: must be > 0");
        if (k_freq < 1 || k_freq > pool_size)
            throw ConfigError("loss.k_freq: " + std::to_string(k_freq) + " outside [1, " +
                              std::to_string(pool_size) + "]");
    }
};

/// Cross-entropy over temperature-scaled cosine scores against the class
/// table: -log softmax(cos(f, w_j)/tau)[y].
template <typename S>
TensorT<S> component_ce_loss(TapeT<S>& tape, const TensorT<S>& f, const ClassEmbeddingTableT<S>& table,
                             std::size_t y, double tau_cls) {
    const std::size_t n_classes = table.embeddings.extent(0);
    if (y >= n_classes)
        throw LabelError("component_ce_loss: label " + std::to_string(y) + " outside [0, " +
                         std::to_string(n_classes) + ") for component " +
                         component_name(table.component));
    if (tau_cls <= 0)
        throw ParameterError("component_ce_loss: tau_cls must be positive, got " + std::to_string(tau_cls));
    auto cos_scores = tape.matvec(tape.l2_normalize_rows(table.embeddings), tape.l2_normalize(f));
    auto probs = tape.softmax_temp(cos_scores, tau_cls);
    return tape.neg(tape.log(tape.pick(probs, y)));
}

/// Mean squared row distance between the learned table and its frozen
/// hand-crafted counterpart.
template <typename S>
TensorT<S> kg_loss(TapeT<S>& tape, const ClassEmbeddingTableT<S>& learned,
                   const ClassEmbeddingTableT<S>& frozen) {
    if (learned.component != frozen.component)
        throw DimensionError("kg_loss: component mismatch");
    if (learned.embeddings.shape() != frozen.embeddings.shape())
        throw DimensionError("kg_loss: table shapes differ, " + shape_str(learned.embeddings.shape()) +
                             " vs " + shape_str(frozen.embeddings.shape()));
    auto diff = tape.sub(learned.embeddings, frozen.embeddings);
    const double n_classes = static_cast<double>(learned.embeddings.extent(0));
    return tape.scale(tape.sum(tape.mul(diff, diff)), 1.0 / n_classes);
}

/// Selection-frequency regularizer over the current step window: per
/// component, (sum of the k_freq largest soft frequencies) minus (sum of the
/// k_freq smallest). Uniform usage scores 0; minimizing shifts attention mass
/// away from over-used prompts. Gradients flow through the recorded weights
/// into the queries.
template <typename S>
TensorT<S> freq_reg_loss(TapeT<S>& tape, PromptPoolT<S>& pool, std::size_t k_freq) {
    const std::size_t pool_size = pool.size();
    if (k_freq < 1 || k_freq > pool_size)
        throw ParameterError("freq_reg_loss: k_freq = " + std::to_string(k_freq) + " outside [1, " +
                             std::to_string(pool_size) + "]");
    bool any_events = false;
    for (const auto& w : pool.window) any_events = any_events || !w.empty();
    if (!any_events) throw UsageError("freq_reg_loss: empty selection window");

    TensorT<S> total;
    for (std::size_t c = 0; c < 2; ++c) {
        const auto& events = pool.window[c];
        if (events.empty()) continue;
        TensorT<S> s;
        for (const auto& ev : events) {
            auto placed = tape.scatter(ev.weights, ev.indices, pool_size);
            s = s.defined() ? tape.add(s, placed) : placed;
        }
        // rank by the window's soft frequencies; ties break to the lower index
        std::vector<std::size_t> order(pool_size);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return s.value(a) > s.value(b); });
        std::vector<S> mask(pool_size, S(0));
        for (std::size_t i = 0; i < k_freq; ++i) mask[order[i]] += S(1);                     // S_max
        for (std::size_t i = 0; i < k_freq; ++i) mask[order[pool_size - 1 - i]] -= S(1);     // S_min
        auto term = tape.dot(s, tape.constant({pool_size}, std::move(mask)));
        total = total.defined() ? tape.add(total, term) : term;
    }
    return total;
}

/// Diagnostic twin of freq_reg_loss computed from the numeric soft-frequency
/// accumulators, outside any tape.
template <typename S>
double freq_reg_value(const PromptPoolT<S>& pool, std::size_t k_freq) {
    double total = 0;
    for (std::size_t c = 0; c < 2; ++c) {
        if (pool.window[c].empty()) continue;
        std::vector<double> s = pool.soft_freq[c];
        std::sort(s.begin(), s.end(), std::greater<>());
        for (std::size_t i = 0; i < k_freq && i < s.size(); ++i)
            total += s[i] - s[s.size() - 1 - i];
    }
    return total;
}

/// Diagnostic twin of orth_loss, outside any tape.
template <typename S>
double orth_value(const PromptPoolT<S>& pool) {
    const std::size_t p = pool.size(), d = pool.width();
    auto pair_sum = [&](const TensorT<S>& m) {
        std::vector<double> norms(p, 0.0);
        for (std::size_t i = 0; i < p; ++i) {
            for (std::size_t j = 0; j < d; ++j) norms[i] += m.value(i, j) * m.value(i, j);
            norms[i] = std::sqrt(norms[i]);
        }
        double sum = 0;
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < p; ++j) {
                if (i == j) continue;
                double dot = 0;
                for (std::size_t t = 0; t < d; ++t) dot += m.value(i, t) * m.value(j, t);
                sum += std::fabs(dot / (norms[i] * norms[j]));
            }
        return sum;
    };
    return (pair_sum(pool.queries) + pair_sum(pool.values)) /
           (static_cast<double>(p) * static_cast<double>(p - 1));
}

/// Mean absolute pairwise cosine similarity over queries and values:
/// (1/(P(P-1))) sum_{i != j} (|cos(q_i, q_j)| + |cos(v_i, v_j)|), in [0, 2].
template <typename S>
TensorT<S> orth_loss(TapeT<S>& tape, PromptPoolT<S>& pool) {
    const std::size_t pool_size = pool.size();
    if (pool_size < 2)
        throw ParameterError("orth_loss: needs at least 2 prompt pairs, got " + std::to_string(pool_size));
    std::vector<S> off_diag(pool_size * pool_size, S(1));
    for (std::size_t i = 0; i < pool_size; ++i) off_diag[i * pool_size + i] = S(0);
    auto mask = tape.constant({pool_size, pool_size}, std::move(off_diag));
    auto pair_sum = [&](const TensorT<S>& m) {
        auto rows = tape.l2_normalize_rows(m);
        return tape.sum(tape.mul(tape.abs(tape.matmul_nt(rows, rows)), mask));
    };
    auto total = tape.add(pair_sum(pool.queries), pair_sum(pool.values));
    return tape.scale(total, 1.0 / (static_cast<double>(pool_size) * static_cast<double>(pool_size - 1)));
}

/// Per-sample stage-1 terms for one batch.
template <typename S>
struct Stage1BatchTermsT {
    std::vector<TensorT<S>> ce_verb;  // one scalar per sample
    std::vector<TensorT<S>> ce_noun;
    TensorT<S> kg_verb;  // per-step table terms
    TensorT<S> kg_noun;
};

/// mean_batch(L_ce^v + L_ce^n) + lambda_kg (L_kg^v + L_kg^n)
template <typename S>
TensorT<S> stage1_loss(TapeT<S>& tape, const Stage1BatchTermsT<S>& terms, const LossWeights& w) {
    if (terms.ce_verb.empty() || terms.ce_verb.size() != terms.ce_noun.size())
        throw UsageError("stage1_loss: mismatched or empty per-sample terms");
    std::vector<TensorT<S>> per_sample;
    per_sample.reserve(terms.ce_verb.size());
    for (std::size_t i = 0; i < terms.ce_verb.size(); ++i)
        per_sample.push_back(tape.add(terms.ce_verb[i], terms.ce_noun[i]));
    auto loss = mean_scalars(tape, per_sample);
    if (terms.kg_verb.defined() && terms.kg_noun.defined())
        loss = tape.add(loss, tape.scale(tape.add(terms.kg_verb, terms.kg_noun), w.lambda_kg));
    return loss;
}

/// Per-sample stage-2 terms (CE on the fused representation) for one batch.
template <typename S>
struct UnifiedBatchTermsT {
    std::vector<TensorT<S>> ce_verb;
    std::vector<TensorT<S>> ce_noun;
};

/// mean_batch(L_ce^v + L_ce^n on f_s) + lambda_freq L_freq + lambda_orth L_orth
template <typename S>
TensorT<S> unified_loss(TapeT<S>& tape, const UnifiedBatchTermsT<S>& terms, PromptPoolT<S>& pool,
                        const LossWeights& w) {
    if (terms.ce_verb.empty() || terms.ce_verb.size() != terms.ce_noun.size())
        throw UsageError("unified_loss: mismatched or empty per-sample terms");
    std::vector<TensorT<S>> per_sample;
    per_sample.reserve(terms.ce_verb.size());
    for (std::size_t i = 0; i < terms.ce_verb.size(); ++i)
        per_sample.push_back(tape.add(terms.ce_verb[i], terms.ce_noun[i]));
    auto loss = mean_scalars(tape, per_sample);
    loss = tape.add(loss, tape.scale(freq_reg_loss(tape, pool, w.k_freq), w.lambda_freq));
    loss = tape.add(loss, tape.scale(orth_loss(tape, pool), w.lambda_orth));
    return loss;
}

using Stage1BatchTerms = Stage1BatchTermsT<float>;
using UnifiedBatchTerms = UnifiedBatchTermsT<float>;

}  // namespace egoprompt
