#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "egoprompt/grad_check.hpp"
#include "egoprompt/losses.hpp"

using namespace egoprompt;

namespace {

template <typename S>
ClassEmbeddingTableT<S> table_from(Component comp, Shape shape, std::vector<S> rows,
                                   bool frozen = false) {
    ClassEmbeddingTableT<S> t;
    t.component = comp;
    t.frozen_template = frozen;
    t.embeddings = TensorT<S>::make(std::move(shape), std::move(rows));
    for (std::size_t i = 0; i < t.embeddings.extent(0); ++i) t.labels.push_back("c" + std::to_string(i));
    return t;
}

}  // namespace

TEST_CASE("component cross-entropy closed forms") {
    Tape tape;

    // one class: softmax over a single logit is 1, loss 0
    auto one = table_from<float>(Component::kVerb, {1, 4}, {1, 0, 0, 0});
    auto f = Tensor::make({4}, {0.3f, 0.4f, 0, 0});
    REQUIRE(std::fabs(component_ce_loss(tape, f, one, 0, 0.07).scalar_value()) < 1e-6);

    // cosine scores [1, 0] at tau 1: loss = ln(1 + e^-1)
    auto two = table_from<float>(Component::kVerb, {2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
    auto fx = Tensor::make({4}, {1, 0, 0, 0});
    REQUIRE(std::fabs(component_ce_loss(tape, fx, two, 0, 1.0).scalar_value() -
                      std::log(1.0 + std::exp(-1.0))) < 1e-6);

    // uniform cosines over N classes: ln N
    const std::size_t n = 5;
    std::vector<float> rows(n * 4, 0.0f);
    for (std::size_t i = 0; i < n; ++i) rows[i * 4 + 1 + (i % 3 == 0 ? 0 : 0)] = 0.0f;
    // rows orthogonal to f -> all cosines 0
    for (std::size_t i = 0; i < n; ++i) rows[i * 4 + 1] = 1.0f;
    auto uni = table_from<float>(Component::kNoun, {n, 4}, std::move(rows));
    REQUIRE(std::fabs(component_ce_loss(tape, fx, uni, 2, 0.07).scalar_value() - std::log(double(n))) <
            1e-5);

    REQUIRE_THROWS_AS(component_ce_loss(tape, fx, two, 2, 0.07), LabelError);
    REQUIRE_THROWS_AS(component_ce_loss(tape, fx, two, 0, 0.0), ParameterError);
}

TEST_CASE("cross-entropy equals an independent probability computation") {
    Rng rng(61);
    for (int trial = 0; trial < 200; ++trial) {
        Rng r = rng.fork("t", trial);
        const std::size_t n = 2 + r.uniform_index(7);
        const std::size_t d = 4 + r.uniform_index(8);
        const double tau = trial % 2 ? 0.07 : 1.0;
        auto table = table_from<double>(Component::kVerb, {n, d},
                                        [&] {
                                            std::vector<double> v(n * d);
                                            for (auto& x : v) x = r.uniform(-1, 1) + 0.15;
                                            return v;
                                        }());
        std::vector<double> fv(d);
        for (auto& x : fv) x = r.uniform(-1, 1) + 0.15;
        auto f = TensorT<double>::make({d}, fv);
        const std::size_t y = r.uniform_index(n);

        TapeT<double> tape;
        const double got = component_ce_loss(tape, f, table, y, tau).scalar_value();

        std::vector<double> cosv(n);
        double fnorm = 0;
        for (auto x : fv) fnorm += x * x;
        fnorm = std::sqrt(fnorm);
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0, wn = 0;
            for (std::size_t j = 0; j < d; ++j) {
                dot += fv[j] * table.embeddings.value(i, j);
                wn += table.embeddings.value(i, j) * table.embeddings.value(i, j);
            }
            cosv[i] = dot / (fnorm * std::sqrt(wn));
        }
        double mx = *std::max_element(cosv.begin(), cosv.end());
        double s = 0;
        for (auto c : cosv) s += std::exp((c - mx) / tau);
        const double want = -std::log(std::exp((cosv[y] - mx) / tau) / s);
        REQUIRE(std::fabs(got - want) < 1e-5);
        REQUIRE(got >= 0.0);
    }
}

TEST_CASE("classification argmax is invariant to tau") {
    Rng rng(67);
    for (int trial = 0; trial < 50; ++trial) {
        Rng r = rng.fork("t", trial);
        const std::size_t n = 4, d = 8;
        std::vector<float> rows(n * d);
        for (auto& x : rows) x = static_cast<float>(r.uniform(-1, 1) + 0.1);
        auto table = table_from<float>(Component::kVerb, {n, d}, std::move(rows));
        auto f = Tensor::uniform({d}, r, -1, 1);

        Tape tape;
        std::vector<std::size_t> winners;
        for (double tau : {0.01, 0.07, 1.0}) {
            auto cosv = tape.matvec(tape.l2_normalize_rows(table.embeddings), tape.l2_normalize(f));
            auto p = tape.softmax_temp(cosv, tau);
            std::size_t best = 0;
            for (std::size_t i = 1; i < n; ++i)
                if (p.value(i) > p.value(best)) best = i;
            winners.push_back(best);
        }
        REQUIRE(winners[0] == winners[1]);
        REQUIRE(winners[1] == winners[2]);
    }
}

TEST_CASE("knowledge-guided loss") {
    Tape tape;
    auto learned = table_from<float>(Component::kNoun, {3, 4},
                                     {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
    auto frozen = table_from<float>(Component::kNoun, {3, 4},
                                    {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}, true);
    REQUIRE(kg_loss(tape, learned, frozen).scalar_value() == 0.0);

    // one row differs by a unit vector -> 1/N
    auto shifted = table_from<float>(Component::kNoun, {3, 4},
                                     {1, 2, 3, 4, 5, 7, 7, 8, 9, 10, 11, 12}, true);
    REQUIRE(std::fabs(kg_loss(tape, learned, shifted).scalar_value() - 1.0 / 3.0) < 1e-6);

    // random tables vs scalar loop oracle
    Rng rng(71);
    for (int trial = 0; trial < 30; ++trial) {
        Rng r = rng.fork("t", trial);
        const std::size_t n = 2 + r.uniform_index(5), d = 3 + r.uniform_index(6);
        std::vector<float> a(n * d), b(n * d);
        for (auto& x : a) x = static_cast<float>(r.uniform(-1, 1));
        for (auto& x : b) x = static_cast<float>(r.uniform(-1, 1));
        auto ta = table_from<float>(Component::kVerb, {n, d}, a);
        auto tb = table_from<float>(Component::kVerb, {n, d}, b, true);
        double want = 0;
        for (std::size_t i = 0; i < n * d; ++i)
            want += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
        want /= static_cast<double>(n);
        REQUIRE(std::fabs(kg_loss(tape, ta, tb).scalar_value() - want) < 1e-5);
    }

    auto wrong_shape = table_from<float>(Component::kNoun, {2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
    REQUIRE_THROWS_AS(kg_loss(tape, learned, wrong_shape), DimensionError);
    auto wrong_comp = table_from<float>(Component::kVerb, {3, 4},
                                        {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}, true);
    REQUIRE_THROWS_AS(kg_loss(tape, learned, wrong_comp), DimensionError);
}

TEST_CASE("frequency regularizer") {
    // uniform soft frequencies score zero
    {
        Tape tape;
        auto pool = init_pool<float>(4, 8, 73);
        PromptPool::SelectionEvent ev;
        ev.indices = {0, 1, 2, 3};
        ev.weights = Tensor::make({4}, {0.25f, 0.25f, 0.25f, 0.25f});
        pool.window[0].push_back(ev);
        REQUIRE(std::fabs(freq_reg_loss(tape, pool, 1).scalar_value()) < 1e-7);
        REQUIRE(std::fabs(freq_reg_loss(tape, pool, 2).scalar_value()) < 1e-7);
    }

    // all mass on one prompt: s_max - s_min = total mass
    {
        Tape tape;
        auto pool = init_pool<float>(4, 8, 79);
        PromptPool::SelectionEvent ev;
        ev.indices = {2};
        ev.weights = Tensor::make({1}, {1.0f});
        pool.window[1].push_back(ev);
        REQUIRE(std::fabs(freq_reg_loss(tape, pool, 1).scalar_value() - 1.0) < 1e-7);
    }

    // random windows match the sort-then-sum oracle and the sign convention
    Rng rng(83);
    for (int trial = 0; trial < 50; ++trial) {
        Rng r = rng.fork("t", trial);
        const std::size_t pool_size = 4 + r.uniform_index(8);
        const std::size_t k_freq = 1 + r.uniform_index(pool_size / 2);
        Tape tape;
        auto pool = init_pool<float>(pool_size, 4, r.next_u64());
        std::array<std::vector<double>, 2> s{};
        s[0].assign(pool_size, 0.0);
        s[1].assign(pool_size, 0.0);
        const int events = 1 + static_cast<int>(r.uniform_index(5));
        for (int e = 0; e < events; ++e) {
            const std::size_t c = r.uniform_index(2);
            const std::size_t k = 1 + r.uniform_index(pool_size);
            PromptPool::SelectionEvent ev;
            std::vector<float> w(k);
            double tot = 0;
            for (std::size_t i = 0; i < k; ++i) {
                w[i] = static_cast<float>(r.uniform(0.01, 1.0));
                tot += w[i];
            }
            for (auto& x : w) x = static_cast<float>(x / tot);
            std::vector<std::size_t> idx;
            while (idx.size() < k) {
                auto cand = r.uniform_index(pool_size);
                if (std::find(idx.begin(), idx.end(), cand) == idx.end()) idx.push_back(cand);
            }
            ev.indices = idx;
            ev.weights = Tensor::make({k}, w);
            pool.window[c].push_back(ev);
            for (std::size_t i = 0; i < k; ++i) s[c][idx[i]] += w[i];
        }
        double want = 0;
        double neg_form = 0;  // -(sum_min - sum_max)
        for (std::size_t c = 0; c < 2; ++c) {
            if (pool.window[c].empty()) continue;
            auto sorted = s[c];
            std::sort(sorted.begin(), sorted.end(), std::greater<>());
            double mx = 0, mn = 0;
            for (std::size_t i = 0; i < k_freq; ++i) {
                mx += sorted[i];
                mn += sorted[pool_size - 1 - i];
            }
            want += mx - mn;
            neg_form -= (mn - mx);
        }
        const double got = freq_reg_loss(tape, pool, k_freq).scalar_value();
        REQUIRE(std::fabs(got - want) < 1e-5);
        REQUIRE(got == Catch::Approx(neg_form).margin(1e-12));  // antisymmetric transcription
    }

    Tape tape;
    auto empty_pool = init_pool<float>(4, 8, 89);
    REQUIRE_THROWS_AS(freq_reg_loss(tape, empty_pool, 1), UsageError);
    auto pool2 = init_pool<float>(4, 8, 97);
    PromptPool::SelectionEvent ev;
    ev.indices = {0};
    ev.weights = Tensor::make({1}, {1.0f});
    pool2.window[0].push_back(ev);
    REQUIRE_THROWS_AS(freq_reg_loss(tape, pool2, 5), ParameterError);
}

TEST_CASE("orthogonalization loss") {
    Tape tape;

    // identical prompts: every ordered pair contributes |1| + |1|
    auto same = init_pool<float>(3, 4, 101);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t j = 0; j < 4; ++j) {
            same.queries.values_mut()[r * 4 + j] = static_cast<float>(j + 1);
            same.values.values_mut()[r * 4 + j] = static_cast<float>(2 * j + 1);
        }
    REQUIRE(std::fabs(orth_loss(tape, same).scalar_value() - 2.0) < 1e-6);

    // orthonormal queries and values score zero
    auto ortho = init_pool<float>(4, 4, 103);
    std::fill(ortho.queries.values_mut().begin(), ortho.queries.values_mut().end(), 0.0f);
    std::fill(ortho.values.values_mut().begin(), ortho.values.values_mut().end(), 0.0f);
    for (std::size_t i = 0; i < 4; ++i) {
        ortho.queries.values_mut()[i * 4 + i] = 1.0f;
        ortho.values.values_mut()[i * 4 + i] = 0.5f;
    }
    REQUIRE(std::fabs(orth_loss(tape, ortho).scalar_value()) < 1e-6);

    // P=2, queries at 45 degrees, values orthogonal
    auto angled = init_pool<float>(2, 2, 107);
    angled.queries.values_mut() = {1.0f, 0.0f, 0.70710678f, 0.70710678f};
    angled.values.values_mut() = {1.0f, 0.0f, 0.0f, 1.0f};
    REQUIRE(std::fabs(orth_loss(tape, angled).scalar_value() - 0.70711) < 1e-5);

    // invariant under positive rescaling of a single prompt
    Rng rng(109);
    auto pool = init_pool<float>(6, 8, 113);
    const double before = orth_loss(tape, pool).scalar_value();
    for (std::size_t j = 0; j < 8; ++j) pool.queries.values_mut()[2 * 8 + j] *= 7.5f;
    const double after = orth_loss(tape, pool).scalar_value();
    REQUIRE(std::fabs(before - after) < 1e-6);
    REQUIRE(before >= 0.0);
    REQUIRE(before <= 2.0);

    auto tiny = init_pool<float>(1, 4, 127);
    REQUIRE_THROWS_AS(orth_loss(tape, tiny), ParameterError);
}

TEST_CASE("stage-1 composite") {
    Tape tape;
    LossWeights w;
    w.lambda_kg = 0.0;

    Stage1BatchTerms terms;
    terms.ce_verb = {Tensor::scalar(1.0), Tensor::scalar(2.0)};
    terms.ce_noun = {Tensor::scalar(0.5), Tensor::scalar(1.5)};
    terms.kg_verb = Tensor::scalar(10.0);
    terms.kg_noun = Tensor::scalar(20.0);

    // lambda_kg = 0 reduces to the CE mean
    REQUIRE(std::fabs(stage1_loss(tape, terms, w).scalar_value() - 2.5) < 1e-6);

    // frozen-to-template tables make the kg term vanish
    w.lambda_kg = 1.0;
    terms.kg_verb = Tensor::scalar(0.0);
    terms.kg_noun = Tensor::scalar(0.0);
    REQUIRE(std::fabs(stage1_loss(tape, terms, w).scalar_value() - 2.5) < 1e-6);

    // random batch equals the independently recomputed parts
    Rng rng(131);
    for (int trial = 0; trial < 20; ++trial) {
        Rng r = rng.fork("t", trial);
        const std::size_t batch = 1 + r.uniform_index(6);
        Stage1BatchTerms tm;
        double ce_sum = 0;
        for (std::size_t i = 0; i < batch; ++i) {
            const double cv = r.uniform(0, 3), cn = r.uniform(0, 3);
            tm.ce_verb.push_back(Tensor::scalar(cv));
            tm.ce_noun.push_back(Tensor::scalar(cn));
            ce_sum += cv + cn;
        }
        const double kv = r.uniform(0, 2), kn = r.uniform(0, 2);
        tm.kg_verb = Tensor::scalar(kv);
        tm.kg_noun = Tensor::scalar(kn);
        LossWeights lw;
        lw.lambda_kg = r.uniform(0, 2);
        const double want = ce_sum / batch + lw.lambda_kg * (kv + kn);
        REQUIRE(std::fabs(stage1_loss(tape, tm, lw).scalar_value() - want) < 1e-5);
    }
}

TEST_CASE("unified composite and its gradient") {
    // lambda_freq = lambda_orth = 0 reduces to the fused-feature CE mean
    {
        Tape tape;
        auto pool = init_pool<float>(4, 8, 137);
        Rng rng(139);
        auto f = Tensor::uniform({8}, rng, -1, 1);
        auto res = retrieve_topk(tape, f, pool, 2, 0.07, Component::kVerb);
        record_selection(res, pool);
        UnifiedBatchTerms terms;
        terms.ce_verb = {Tensor::scalar(1.0)};
        terms.ce_noun = {Tensor::scalar(3.0)};
        LossWeights w;
        w.lambda_freq = 0.0;
        w.lambda_orth = 0.0;
        w.k_freq = 2;
        REQUIRE(std::fabs(unified_loss(tape, terms, pool, w).scalar_value() - 4.0) < 1e-6);

        // freshly initialized pool contributes a bounded orth term
        LossWeights w2 = w;
        w2.lambda_orth = 1.0;
        const double with_orth = unified_loss(tape, terms, pool, w2).scalar_value();
        REQUIRE(with_orth >= 4.0);
        REQUIRE(with_orth <= 4.0 + 2.0);
    }

    // random instance passes the finite-difference oracle end to end
    Rng rng(149);
    int done = 0;
    for (int trial = 0; done < 10 && trial < 60; ++trial) {
        Rng r = rng.fork("t", trial);
        const std::size_t pool_size = 4, d = 8, k = 2;
        auto pool = init_pool<double>(pool_size, d, r.next_u64());
        auto proj = init_fusion_projector<double>(d, r.next_u64());
        std::vector<TensorT<double>> fv, fn;
        for (int b = 0; b < 2; ++b) {
            fv.push_back(TensorT<double>::uniform({d}, r, -1, 1));
            fn.push_back(TensorT<double>::uniform({d}, r, -1, 1));
        }
        std::vector<double> vt(3 * d), nt(4 * d);
        for (auto& x : vt) x = r.uniform(-1, 1) + 0.1;
        for (auto& x : nt) x = r.uniform(-1, 1) + 0.1;
        auto verb_table = table_from<double>(Component::kVerb, {3, d}, vt);
        auto noun_table = table_from<double>(Component::kNoun, {4, d}, nt);

        // require a comfortable margin at every selection and ranking boundary
        {
            TapeT<double> t;
            bool stable = true;
            for (auto& fs : {fv, fn})
                for (auto& f : fs) {
                    auto cos_all = t.matvec(t.l2_normalize_rows(pool.queries), t.l2_normalize(f));
                    std::vector<double> c(cos_all.values().begin(), cos_all.values().end());
                    std::sort(c.begin(), c.end(), std::greater<>());
                    for (std::size_t i = 0; i + 1 < c.size(); ++i)
                        if (c[i] - c[i + 1] < 2e-2) stable = false;
                }
            if (!stable) continue;
        }

        LossWeights w;
        w.k_freq = 2;
        auto rep = grad_check<double>(
            [&](TapeT<double>& t) {
                pool.reset_window();
                UnifiedBatchTermsT<double> terms;
                for (int b = 0; b < 2; ++b) {
                    auto rv = retrieve_topk(t, fv[b], pool, k, 0.07, Component::kVerb);
                    record_selection(rv, pool);
                    auto rn = retrieve_topk(t, fn[b], pool, k, 0.07, Component::kNoun);
                    record_selection(rn, pool);
                    auto fs = project_fusion(t, fuse_patterns(t, rv, pool), fuse_patterns(t, rn, pool), proj);
                    terms.ce_verb.push_back(component_ce_loss(t, fs, verb_table, std::size_t(b), 0.07));
                    terms.ce_noun.push_back(component_ce_loss(t, fs, noun_table, std::size_t(b + 1), 0.07));
                }
                return unified_loss(t, terms, pool, w);
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
    REQUIRE(done == 10);
}
