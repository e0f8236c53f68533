#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "egoprompt/grad_check.hpp"
#include "egoprompt/prompt_pool.hpp"

using namespace egoprompt;

namespace {

/// Brute-force retrieval oracle: full stable sort over double-precision
/// cosines, softmax restricted to the selected set.
struct OracleResult {
    std::vector<std::size_t> indices;
    std::vector<double> weights;
};

template <typename S>
OracleResult retrieval_oracle(const TensorT<S>& f, const PromptPoolT<S>& pool, std::size_t k, double tau) {
    const std::size_t n = pool.size(), d = pool.width();
    std::vector<double> cosv(n);
    double fn = 0;
    for (std::size_t j = 0; j < d; ++j) fn += f.value(j) * f.value(j);
    fn = std::sqrt(fn);
    for (std::size_t i = 0; i < n; ++i) {
        double dot = 0, qn = 0;
        for (std::size_t j = 0; j < d; ++j) {
            dot += f.value(j) * pool.queries.value(i, j);
            qn += pool.queries.value(i, j) * pool.queries.value(i, j);
        }
        cosv[i] = dot / (fn * std::sqrt(qn));
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return cosv[a] > cosv[b]; });
    order.resize(k);
    double mx = cosv[order[0]];
    for (auto i : order) mx = std::max(mx, cosv[i]);
    double s = 0;
    std::vector<double> w(k);
    for (std::size_t i = 0; i < k; ++i) {
        w[i] = std::exp((cosv[order[i]] - mx) / tau);
        s += w[i];
    }
    for (auto& x : w) x /= s;
    return {order, w};
}

}  // namespace

TEST_CASE("init_pool determinism and nonzero norms") {
    auto a = init_pool<float>(16, 32, 7);
    auto b = init_pool<float>(16, 32, 7);
    REQUIRE(a.queries.values() == b.queries.values());
    REQUIRE(a.values.values() == b.values.values());

    auto c = init_pool<float>(16, 32, 8);
    REQUIRE(a.queries.values() != c.queries.values());

    for (std::size_t r = 0; r < a.size(); ++r) {
        double nq = 0, nv = 0;
        for (std::size_t j = 0; j < a.width(); ++j) {
            nq += a.queries.value(r, j) * a.queries.value(r, j);
            nv += a.values.value(r, j) * a.values.value(r, j);
        }
        REQUIRE(nq > 0);
        REQUIRE(nv > 0);
    }
    for (const auto& counts : a.counters)
        for (auto n : counts) REQUIRE(n == 0);

    const double bound = 1.0 / std::sqrt(32.0);
    for (std::size_t i = 0; i < a.queries.size(); ++i) {
        REQUIRE(a.queries.value(i) >= -bound);
        REQUIRE(a.queries.value(i) <= bound);
    }
}

TEST_CASE("retrieval basics") {
    Tape tape;
    Rng rng(3);

    auto single = init_pool<float>(1, 8, 1);
    auto f = Tensor::uniform({8}, rng, -1, 1);
    auto r1 = retrieve_topk(tape, f, single, 1, 0.07, Component::kVerb);
    REQUIRE(r1.indices == std::vector<std::size_t>{0});
    REQUIRE(r1.weights.value(0) == 1.0f);

    // all cosines equal -> uniform weights 1/P at k = P
    auto pool = init_pool<float>(6, 8, 2);
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t j = 0; j < 8; ++j)
            pool.queries.values_mut()[r * 8 + j] = pool.queries.value(0, j);
    auto ru = retrieve_topk(tape, f, pool, 6, 0.07, Component::kVerb);
    for (std::size_t i = 0; i < 6; ++i) REQUIRE(std::fabs(ru.weights.value(i) - 1.0 / 6.0) < 1e-6);
    REQUIRE(ru.indices == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});  // ties to lower index

    // k = 1 -> argmax with weight 1
    auto pool2 = init_pool<float>(8, 8, 5);
    auto r2 = retrieve_topk(tape, f, pool2, 1, 0.07, Component::kNoun);
    auto oracle = retrieval_oracle(f, pool2, 1, 0.07);
    REQUIRE(r2.indices == oracle.indices);
    REQUIRE(r2.weights.value(0) == 1.0f);

    REQUIRE_THROWS_AS(retrieve_topk(tape, f, pool2, 9, 0.07, Component::kVerb), ParameterError);
    REQUIRE_THROWS_AS(retrieve_topk(tape, f, pool2, 0, 0.07, Component::kVerb), ParameterError);
    REQUIRE_THROWS_AS(retrieve_topk(tape, f, pool2, 2, 0.0, Component::kVerb), ParameterError);
    REQUIRE_THROWS_AS(retrieve_topk(tape, Tensor::zeros({8}), pool2, 2, 0.07, Component::kVerb),
                      DegenerateInputError);
}

TEST_CASE("retrieval matches the brute-force oracle incl. ties") {
    Rng rng(11);
    for (int trial = 0; trial < 300; ++trial) {
        Rng r = rng.fork("t", trial);
        const std::size_t pool_size = 2 + r.uniform_index(14);
        const std::size_t d = 4 + r.uniform_index(12);
        const std::size_t k = 1 + r.uniform_index(pool_size);
        auto pool = init_pool<float>(pool_size, d, r.next_u64());
        // every third trial introduces exact ties by duplicating rows
        if (trial % 3 == 0 && pool_size >= 3) {
            for (std::size_t j = 0; j < d; ++j) {
                pool.queries.values_mut()[1 * d + j] = pool.queries.value(0, j);
                pool.queries.values_mut()[2 * d + j] = pool.queries.value(0, j);
            }
        }
        auto f = Tensor::uniform({d}, r, -1, 1);
        double norm = 0;
        for (std::size_t j = 0; j < d; ++j) norm += f.value(j) * f.value(j);
        if (std::sqrt(norm) < 0.2) continue;

        Tape tape;
        auto got = retrieve_topk(tape, f, pool, k, 0.07, Component::kVerb);
        auto want = retrieval_oracle(f, pool, k, 0.07);
        REQUIRE(got.indices == want.indices);
        for (std::size_t i = 0; i < k; ++i)
            REQUIRE(std::fabs(got.weights.value(i) - want.weights[i]) < 1e-6);
    }
}

TEST_CASE("retrieval is invariant to positive rescaling of the feature") {
    Rng rng(13);
    auto pool = init_pool<float>(12, 16, 17);
    for (int trial = 0; trial < 50; ++trial) {
        Rng r = rng.fork("t", trial);
        auto f = Tensor::uniform({16}, r, -1, 1);
        std::vector<float> scaled(f.values());
        const double lam = r.uniform(0.2, 5.0);
        for (auto& x : scaled) x = static_cast<float>(x * lam);
        auto f2 = Tensor::make({16}, scaled);

        Tape tape;
        auto a = retrieve_topk(tape, f, pool, 4, 0.07, Component::kVerb);
        auto b = retrieve_topk(tape, f2, pool, 4, 0.07, Component::kVerb);
        REQUIRE(a.indices == b.indices);
        for (std::size_t i = 0; i < 4; ++i)
            REQUIRE(std::fabs(a.weights.value(i) - b.weights.value(i)) < 1e-6);
    }
}

TEST_CASE("pattern fusion") {
    Tape tape;
    auto pool = init_pool<float>(4, 8, 19);

    // single selection with weight 1 returns that value prompt exactly
    RetrievalResult r1;
    r1.component = Component::kVerb;
    r1.indices = {2};
    r1.weights = tape.softmax_temp(Tensor::make({1}, {0.3f}), 0.07);
    auto fused = fuse_patterns(tape, r1, pool);
    for (std::size_t j = 0; j < 8; ++j) REQUIRE(fused.value(j) == pool.values.value(2, j));

    // equal weights on v and -v cancel
    for (std::size_t j = 0; j < 8; ++j)
        pool.values.values_mut()[1 * 8 + j] = -pool.values.value(0, j);
    RetrievalResult r2;
    r2.component = Component::kNoun;
    r2.indices = {0, 1};
    r2.weights = Tensor::make({2}, {0.5f, 0.5f});
    auto zero = fuse_patterns(tape, r2, pool);
    for (std::size_t j = 0; j < 8; ++j) REQUIRE(std::fabs(zero.value(j)) < 1e-7);

    // random case equals the scalar accumulation oracle
    Rng rng(23);
    for (int trial = 0; trial < 30; ++trial) {
        Rng r = rng.fork("t", trial);
        auto p2 = init_pool<float>(10, 6, r.next_u64());
        std::vector<std::size_t> idx = {7, 1, 4};
        std::vector<float> w = {0.2f, 0.5f, 0.3f};
        RetrievalResult rr;
        rr.component = Component::kVerb;
        rr.indices = idx;
        rr.weights = Tensor::make({3}, w);
        auto got = fuse_patterns(tape, rr, p2);
        for (std::size_t j = 0; j < 6; ++j) {
            double want = 0;
            for (std::size_t i = 0; i < 3; ++i) want += static_cast<double>(w[i]) * p2.values.value(idx[i], j);
            REQUIRE(std::fabs(got.value(j) - want) < 1e-6);
        }
    }
}

TEST_CASE("fusion projection") {
    Tape tape;
    const std::size_t d = 8;

    FusionProjector zero_proj;
    zero_proj.weight = Tensor::zeros({d, 2 * d});
    zero_proj.bias = Tensor::make({d}, {3, 0, 4, 0, 0, 0, 0, 0});
    Rng rng(29);
    auto fv = Tensor::uniform({d}, rng, -1, 1);
    auto fn = Tensor::uniform({d}, rng, -1, 1);
    auto fs = project_fusion(tape, fv, fn, zero_proj);
    REQUIRE(std::fabs(fs.value(0) - 0.6) < 1e-6);
    REQUIRE(std::fabs(fs.value(2) - 0.8) < 1e-6);

    // zero inputs and zero bias degenerate under normalization
    FusionProjector all_zero;
    all_zero.weight = Tensor::zeros({d, 2 * d});
    all_zero.bias = Tensor::zeros({d});
    REQUIRE_THROWS_AS(project_fusion(tape, Tensor::zeros({d}), Tensor::zeros({d}), all_zero),
                      DegenerateInputError);

    REQUIRE_THROWS_AS(project_fusion(tape, fv, Tensor::zeros({4}), zero_proj), DimensionError);
}

TEST_CASE("selection statistics") {
    Tape tape;
    auto pool = init_pool<float>(16, 8, 31);
    Rng rng(37);

    const std::size_t k = 4;
    const int calls = 10;
    for (int n = 0; n < calls; ++n) {
        Rng r = rng.fork("f", n);
        auto f = Tensor::uniform({8}, r, -1, 1);
        auto res = retrieve_topk(tape, f, pool, k, 0.07, n % 2 ? Component::kNoun : Component::kVerb);
        const auto before = pool.counters;
        double soft_before = 0;
        for (const auto& sf : pool.soft_freq)
            for (double x : sf) soft_before += x;
        record_selection(res, pool);
        double soft_after = 0;
        for (const auto& sf : pool.soft_freq)
            for (double x : sf) soft_after += x;
        REQUIRE(std::fabs(soft_after - soft_before - 1.0) < 1e-6);  // weights sum to 1
        std::size_t bumped = 0;
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t i = 0; i < pool.size(); ++i)
                bumped += pool.counters[c][i] - before[c][i];
        REQUIRE(bumped == k);
    }
    std::uint64_t total = 0;
    for (const auto& c : pool.counters)
        for (auto n : c) total += n;
    REQUIRE(total == static_cast<std::uint64_t>(calls) * k);
}

TEST_CASE("selection entropy") {
    auto pool = init_pool<float>(16, 8, 41);
    REQUIRE_THROWS_AS(selection_entropy(pool, Component::kVerb), UsageError);

    for (auto& c : pool.counters[0]) c = 5;
    REQUIRE(std::fabs(selection_entropy(pool, Component::kVerb) - std::log(16.0)) < 1e-9);

    auto one = init_pool<float>(16, 8, 43);
    one.counters[1][3] = 42;
    REQUIRE(selection_entropy(one, Component::kNoun) == 0.0);

    auto two = init_pool<float>(2, 8, 47);
    two.counters[0][0] = 3;
    two.counters[0][1] = 1;
    REQUIRE(std::fabs(selection_entropy(two, Component::kVerb) - 0.5623351446188083) < 1e-9);
}

TEST_CASE("retrieve-fuse-project chain is differentiable with fixed top-k") {
    Rng rng(53);
    int done = 0;
    for (int trial = 0; done < 50 && trial < 200; ++trial) {
        Rng r = rng.fork("t", trial);
        const std::size_t pool_size = 6, d = 8, k = 3;
        auto pool = init_pool<double>(pool_size, d, r.next_u64());
        auto proj = init_fusion_projector<double>(d, r.next_u64());
        auto fv = TensorT<double>::uniform({d}, r, -1, 1);
        auto fn = TensorT<double>::uniform({d}, r, -1, 1);
        auto probe = TensorT<double>::uniform({d}, r, -1, 1);

        // keep the probe point away from selection boundaries
        {
            TapeT<double> t;
            bool stable = true;
            for (const auto& f : {fv, fn}) {
                auto cos_all = t.matvec(t.l2_normalize_rows(pool.queries), t.l2_normalize(f));
                std::vector<double> c(cos_all.values().begin(), cos_all.values().end());
                std::sort(c.begin(), c.end(), std::greater<>());
                if (c[k - 1] - c[k] < 2e-2) stable = false;
            }
            if (!stable) continue;
        }

        auto rep = grad_check<double>(
            [&](TapeT<double>& t) {
                auto rv = retrieve_topk(t, fv, pool, k, 0.07, Component::kVerb);
                auto rn = retrieve_topk(t, fn, pool, k, 0.07, Component::kNoun);
                auto fs = project_fusion(t, fuse_patterns(t, rv, pool), fuse_patterns(t, rn, pool), proj);
                return t.dot(fs, probe);
            },
            {{"queries", pool.queries},
             {"values", pool.values},
             {"proj_w", proj.weight},
             {"proj_b", proj.bias}},
            1e-3, 1e-3);
        INFO("trial " << trial << " max rel err " << rep.max_rel_err);
        REQUIRE(rep.pass);
        ++done;
    }
    REQUIRE(done == 50);
}
