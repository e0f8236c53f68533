#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "egoprompt/binfile.hpp"
#include "egoprompt/config.hpp"
#include "egoprompt/encoder.hpp"
#include "egoprompt/losses.hpp"
#include "egoprompt/optimizer.hpp"
#include "egoprompt/prompt_pool.hpp"
#include "egoprompt/synth_data.hpp"

namespace egoprompt {

inline constexpr const char* kCheckpointFormat = "egoprompt.checkpoint";
inline constexpr int kCheckpointFormatVersion = 1;

template <typename S>
struct ModelStateT {
    FrozenEncoderT<S> encoder;
    ComponentPromptSetT<S> verb_prompts;
    ComponentPromptSetT<S> noun_prompts;
    PromptPoolT<S> pool;
    FusionProjectorT<S> projector;

    ComponentPromptSetT<S>& prompts(Component c) {
        return c == Component::kVerb ? verb_prompts : noun_prompts;
    }

    template <typename Fn>
    void for_each_param(Fn&& fn) const {
        encoder.for_each_param(fn);
        verb_prompts.for_each_param(fn);
        noun_prompts.for_each_param(fn);
        pool.for_each_param(fn);
        projector.for_each_param(fn);
    }
};

template <typename S>
ModelStateT<S> init_model_state(const RunConfig& cfg) {
    ModelStateT<S> m;
    m.encoder = init_frozen_encoders<S>(cfg.seed, cfg.encoder_config());
    m.verb_prompts = init_component_prompts(m.encoder, Component::kVerb, cfg.model.verb_template, cfg.seed);
    m.noun_prompts = init_component_prompts(m.encoder, Component::kNoun, cfg.model.noun_template, cfg.seed);
    m.pool = init_pool<S>(cfg.train.pool_size, cfg.data.width, cfg.seed);
    m.projector = init_fusion_projector<S>(cfg.data.width, cfg.seed);
    return m;
}

// ---- label spaces -------------------------------------------------------------

/// Base-label class sets (ordered by global id) and global -> local maps.
struct LabelSpace {
    std::vector<std::string> base_verb_names, base_noun_names;
    std::vector<std::string> novel_verb_names, novel_noun_names;
    std::vector<int> verb_local, noun_local;    // global id -> base-local id, -1 for novel
    std::vector<int> verb_novel_local, noun_novel_local;  // global id -> novel-local id
};

inline LabelSpace build_label_space(const SyntheticBenchmark& bench) {
    LabelSpace ls;
    ls.verb_local.assign(bench.verb_names.size(), -1);
    ls.noun_local.assign(bench.noun_names.size(), -1);
    ls.verb_novel_local.assign(bench.verb_names.size(), -1);
    ls.noun_novel_local.assign(bench.noun_names.size(), -1);
    for (auto v : bench.base_verbs) {
        ls.verb_local[v] = static_cast<int>(ls.base_verb_names.size());
        ls.base_verb_names.push_back(bench.verb_names[v]);
    }
    for (auto n : bench.base_nouns) {
        ls.noun_local[n] = static_cast<int>(ls.base_noun_names.size());
        ls.base_noun_names.push_back(bench.noun_names[n]);
    }
    for (auto v : bench.novel_verbs) {
        ls.verb_novel_local[v] = static_cast<int>(ls.novel_verb_names.size());
        ls.novel_verb_names.push_back(bench.verb_names[v]);
    }
    for (auto n : bench.novel_nouns) {
        ls.noun_novel_local[n] = static_cast<int>(ls.novel_noun_names.size());
        ls.novel_noun_names.push_back(bench.noun_names[n]);
    }
    return ls;
}

// ---- parameter groups -----------------------------------------------------------

template <typename S>
using NamedParams = std::vector<std::pair<std::string, TensorT<S>>>;

template <typename S>
NamedParams<S> prompt_params(const ComponentPromptSetT<S>& set) {
    NamedParams<S> out;
    set.for_each_param([&](const std::string& name, const TensorT<S>& t) { out.emplace_back(name, t); });
    return out;
}

template <typename S>
NamedParams<S> pool_and_projector_params(const ModelStateT<S>& m) {
    NamedParams<S> out;
    m.pool.for_each_param([&](const std::string& name, const TensorT<S>& t) { out.emplace_back(name, t); });
    m.projector.for_each_param(
        [&](const std::string& name, const TensorT<S>& t) { out.emplace_back(name, t); });
    return out;
}

template <typename S>
double group_grad_norm(const NamedParams<S>& params) {
    double sq = 0;
    for (const auto& [name, p] : params) {
        const double n = p.grad_l2_norm();
        sq += n * n;
    }
    return std::sqrt(sq);
}

/// Per-step diagnostics handed to an optional hook (freeze audits, tests).
struct StepDiag {
    int stage = 0;  // 1, 2, or 3 (joint)
    std::uint64_t step = 0;
    std::size_t epoch = 0;
    double lr = 0;
    std::map<std::string, double> losses;
    std::map<std::string, double> group_grad_norms;
};

using StepHook = std::function<void(const StepDiag&)>;
using EpochHook = std::function<void(std::size_t epoch)>;

struct LossBreakdown {
    double ce_verb = 0, ce_noun = 0, kg_verb = 0, kg_noun = 0, freq = 0, orth = 0, total = 0;
};

// ---- batch loss builders (shared by the train loops and the gradient audits) ----

/// Stage-1 objective on one batch: component CE on f_c plus the
/// knowledge-guided anchors. Tables are rebuilt on the tape so gradients
/// reach the text prompts both through W^c and through the video path.
template <typename S>
TensorT<S> build_stage1_batch_loss(TapeT<S>& tape, ModelStateT<S>& model, const SyntheticBenchmark& bench,
                                   const LabelSpace& ls, const std::vector<std::size_t>& batch,
                                   const RunConfig& cfg, LossBreakdown* breakdown = nullptr) {
    const auto& tokens_dim = cfg.data;
    auto verb_table =
        encode_text_classes(tape, model.encoder, model.verb_prompts, ls.base_verb_names,
                            cfg.model.verb_template);
    auto noun_table =
        encode_text_classes(tape, model.encoder, model.noun_prompts, ls.base_noun_names,
                            cfg.model.noun_template);
    auto frozen_verb = encode_handcrafted_classes(model.encoder, Component::kVerb, ls.base_verb_names,
                                                  cfg.model.verb_template);
    auto frozen_noun = encode_handcrafted_classes(model.encoder, Component::kNoun, ls.base_noun_names,
                                                  cfg.model.noun_template);

    Stage1BatchTermsT<S> terms;
    for (auto idx : batch) {
        const Sample& s = bench.train.samples[idx];
        std::vector<S> tok(s.tokens.begin(), s.tokens.end());
        auto clip = TensorT<S>::make({tokens_dim.tokens_per_clip(), tokens_dim.width}, std::move(tok));
        auto f_v = component_video_feature(tape, model.encoder, model.verb_prompts, clip);
        auto f_n = component_video_feature(tape, model.encoder, model.noun_prompts, clip);
        terms.ce_verb.push_back(component_ce_loss(
            tape, f_v, verb_table, static_cast<std::size_t>(ls.verb_local[s.verb_label]), cfg.loss.tau_cls));
        terms.ce_noun.push_back(component_ce_loss(
            tape, f_n, noun_table, static_cast<std::size_t>(ls.noun_local[s.noun_label]), cfg.loss.tau_cls));
    }
    terms.kg_verb = kg_loss(tape, verb_table, frozen_verb);
    terms.kg_noun = kg_loss(tape, noun_table, frozen_noun);
    auto loss = stage1_loss(tape, terms, cfg.loss);
    if (breakdown) {
        LossBreakdown b;
        for (const auto& t : terms.ce_verb) b.ce_verb += t.scalar_value() / terms.ce_verb.size();
        for (const auto& t : terms.ce_noun) b.ce_noun += t.scalar_value() / terms.ce_noun.size();
        b.kg_verb = terms.kg_verb.scalar_value();
        b.kg_noun = terms.kg_noun.scalar_value();
        b.total = loss.scalar_value();
        *breakdown = b;
    }
    return loss;
}

/// Component features of every sample in a split, computed without gradient
/// tracking. Valid whenever the prompts are frozen (stage 2).
template <typename S>
std::vector<std::pair<TensorT<S>, TensorT<S>>> precompute_features(ModelStateT<S>& model,
                                                                   const Dataset& dataset,
                                                                   const RunConfig& cfg) {
    std::vector<std::pair<TensorT<S>, TensorT<S>>> out;
    out.reserve(dataset.size());
    for (const auto& s : dataset.samples) {
        TapeT<S> local;
        std::vector<S> tok(s.tokens.begin(), s.tokens.end());
        auto clip = TensorT<S>::make({cfg.data.tokens_per_clip(), cfg.data.width}, std::move(tok));
        auto f_v = component_video_feature(local, model.encoder, model.verb_prompts, clip);
        auto f_n = component_video_feature(local, model.encoder, model.noun_prompts, clip);
        out.emplace_back(TensorT<S>::make(f_v.shape(), f_v.values()),
                         TensorT<S>::make(f_n.shape(), f_n.values()));
    }
    return out;
}

/// Frozen class tables for stage 2 evaluated once from the (frozen) prompts.
template <typename S>
std::pair<ClassEmbeddingTableT<S>, ClassEmbeddingTableT<S>> snapshot_tables(
    ModelStateT<S>& model, const LabelSpace& ls, const RunConfig& cfg) {
    TapeT<S> local;
    auto vt = encode_text_classes(local, model.encoder, model.verb_prompts, ls.base_verb_names,
                                  cfg.model.verb_template);
    auto nt = encode_text_classes(local, model.encoder, model.noun_prompts, ls.base_noun_names,
                                  cfg.model.noun_template);
    ClassEmbeddingTableT<S> verb_frozen{Component::kVerb, false,
                                        TensorT<S>::make(vt.embeddings.shape(), vt.embeddings.values()),
                                        ls.base_verb_names};
    ClassEmbeddingTableT<S> noun_frozen{Component::kNoun, false,
                                        TensorT<S>::make(nt.embeddings.shape(), nt.embeddings.values()),
                                        ls.base_noun_names};
    return {verb_frozen, noun_frozen};
}

/// Stage-2 objective on one batch over precomputed features: retrieval,
/// fusion, projection, CE on f_s against both tables, plus the pool criteria.
template <typename S>
TensorT<S> build_stage2_batch_loss(TapeT<S>& tape, ModelStateT<S>& model,
                                   const std::vector<std::pair<TensorT<S>, TensorT<S>>>& features,
                                   const SyntheticBenchmark& bench, const LabelSpace& ls,
                                   const ClassEmbeddingTableT<S>& verb_table,
                                   const ClassEmbeddingTableT<S>& noun_table,
                                   const std::vector<std::size_t>& batch, const RunConfig& cfg,
                                   LossBreakdown* breakdown = nullptr) {
    model.pool.reset_window();
    UnifiedBatchTermsT<S> terms;
    for (auto idx : batch) {
        const Sample& s = bench.train.samples[idx];
        const auto& [f_v, f_n] = features[idx];
        auto rv = retrieve_topk(tape, f_v, model.pool, cfg.train.top_k, cfg.train.tau_pool, Component::kVerb);
        record_selection(rv, model.pool);
        auto rn = retrieve_topk(tape, f_n, model.pool, cfg.train.top_k, cfg.train.tau_pool, Component::kNoun);
        record_selection(rn, model.pool);
        auto f_s = project_fusion(tape, fuse_patterns(tape, rv, model.pool),
                                  fuse_patterns(tape, rn, model.pool), model.projector);
        terms.ce_verb.push_back(component_ce_loss(
            tape, f_s, verb_table, static_cast<std::size_t>(ls.verb_local[s.verb_label]), cfg.loss.tau_cls));
        terms.ce_noun.push_back(component_ce_loss(
            tape, f_s, noun_table, static_cast<std::size_t>(ls.noun_local[s.noun_label]), cfg.loss.tau_cls));
    }
    auto loss = unified_loss(tape, terms, model.pool, cfg.loss);
    if (breakdown) {
        LossBreakdown b;
        for (const auto& t : terms.ce_verb) b.ce_verb += t.scalar_value() / terms.ce_verb.size();
        for (const auto& t : terms.ce_noun) b.ce_noun += t.scalar_value() / terms.ce_noun.size();
        b.freq = freq_reg_value(model.pool, cfg.loss.k_freq);
        b.orth = orth_value(model.pool);
        b.total = loss.scalar_value();
        *breakdown = b;
    }
    return loss;
}

// ---- logging --------------------------------------------------------------------

inline void log_line(std::ostream* log, const Json& j) {
    if (log) *log << j.dump() << "\n";
}

template <typename S>
Json counters_to_json(const PromptPoolT<S>& pool) {
    Json j;
    j["verb"] = pool.counters[component_index(Component::kVerb)];
    j["noun"] = pool.counters[component_index(Component::kNoun)];
    return j;
}

// ---- stage loops ------------------------------------------------------------------

struct StageResult {
    std::uint64_t steps = 0;
    double first_epoch_mean_loss = 0;
    double last_epoch_mean_loss = 0;
};

namespace detail {

template <typename S>
void emit_step_diag(const StepHook& hook, ModelStateT<S>& model, int stage, std::uint64_t step,
                    std::size_t epoch, double lr, const LossBreakdown& b) {
    if (!hook) return;
    StepDiag d;
    d.stage = stage;
    d.step = step;
    d.epoch = epoch;
    d.lr = lr;
    d.losses = {{"ce_verb", b.ce_verb}, {"ce_noun", b.ce_noun}, {"kg_verb", b.kg_verb},
                {"kg_noun", b.kg_noun}, {"freq", b.freq},       {"orth", b.orth},
                {"total", b.total}};
    NamedParams<S> frozen;
    model.encoder.for_each_param(
        [&](const std::string& name, const TensorT<S>& t) { frozen.emplace_back(name, t); });
    d.group_grad_norms["frozen_base"] = group_grad_norm(frozen);
    d.group_grad_norms["prompts_verb"] = group_grad_norm(prompt_params(model.verb_prompts));
    d.group_grad_norms["prompts_noun"] = group_grad_norm(prompt_params(model.noun_prompts));
    NamedParams<S> pool_params;
    model.pool.for_each_param(
        [&](const std::string& name, const TensorT<S>& t) { pool_params.emplace_back(name, t); });
    d.group_grad_norms["pool"] = group_grad_norm(pool_params);
    NamedParams<S> proj_params;
    model.projector.for_each_param(
        [&](const std::string& name, const TensorT<S>& t) { proj_params.emplace_back(name, t); });
    d.group_grad_norms["projector"] = group_grad_norm(proj_params);
    hook(d);
}

}  // namespace detail

/// Stage 1: component-specific prompt learning. Only the prompt sets and
/// their projections move; the pool is untouched.
template <typename S>
StageResult train_stage1(ModelStateT<S>& model, const SyntheticBenchmark& bench, const RunConfig& cfg,
                         std::ostream* log = nullptr, const StepHook& hook = {},
                         const EpochHook& on_epoch_end = {}) {
    const LabelSpace ls = build_label_space(bench);
    model.verb_prompts.set_trainable(true);
    model.noun_prompts.set_trainable(true);

    NamedParams<S> params = prompt_params(model.verb_prompts);
    for (auto& p : prompt_params(model.noun_prompts)) params.push_back(p);
    AdamWT<S> opt(params, {cfg.train.lr, cfg.train.beta1, cfg.train.beta2, cfg.train.weight_decay, 1e-8});

    StageResult result;
    std::uint64_t global_step = 0;
    Rng seeder(cfg.seed);
    for (std::size_t epoch = 0; epoch < cfg.train.epochs_stage1; ++epoch) {
        const auto batches = sample_batches(bench.train.size(), cfg.train.batch_size,
                                            seeder.fork("stage1_epoch", epoch).next_u64());
        double epoch_loss = 0;
        for (const auto& batch : batches) {
            const double lr = lr_at_step(global_step, batches.size(), cfg.train.lr,
                                         cfg.train.warmup_floor_lr, cfg.train.warmup_epochs);
            TapeT<S> tape;
            LossBreakdown b;
            auto loss = build_stage1_batch_loss(tape, model, bench, ls, batch, cfg, &b);
            if (!std::isfinite(b.total))
                throw UsageError("stage 1 diverged at step " + std::to_string(global_step) +
                                 " (loss is not finite)");
            opt.zero_grad();
            tape.backward(loss);
            detail::emit_step_diag(hook, model, 1, global_step, epoch, lr, b);
            opt.step(lr);
            epoch_loss += b.total;
            Json j;
            j["stage"] = 1;
            j["step"] = global_step;
            j["epoch"] = epoch;
            j["lr"] = lr;
            j["ce_verb"] = b.ce_verb;
            j["ce_noun"] = b.ce_noun;
            j["kg_verb"] = b.kg_verb;
            j["kg_noun"] = b.kg_noun;
            j["total"] = b.total;
            log_line(log, j);
            ++global_step;
        }
        epoch_loss /= static_cast<double>(batches.size());
        if (epoch == 0) result.first_epoch_mean_loss = epoch_loss;
        result.last_epoch_mean_loss = epoch_loss;
        Json j;
        j["stage"] = 1;
        j["epoch"] = epoch;
        j["epoch_mean_total"] = epoch_loss;
        log_line(log, j);
        if (on_epoch_end) on_epoch_end(epoch);
    }
    result.steps = global_step;
    return result;
}

/// Stage 2: implicit pattern interaction learning. Prompts are frozen;
/// features and class tables are snapshot once (their inputs cannot move),
/// and only the pool and projector update.
template <typename S>
StageResult train_stage2(ModelStateT<S>& model, const SyntheticBenchmark& bench, const RunConfig& cfg,
                         std::ostream* log = nullptr, const StepHook& hook = {},
                         const EpochHook& on_epoch_end = {}) {
    const LabelSpace ls = build_label_space(bench);
    model.verb_prompts.set_trainable(false);
    model.noun_prompts.set_trainable(false);
    model.pool.set_trainable(true);
    model.projector.set_trainable(true);

    const auto features = precompute_features(model, bench.train, cfg);
    const auto [verb_table, noun_table] = snapshot_tables(model, ls, cfg);

    AdamWT<S> opt(pool_and_projector_params(model),
                  {cfg.train.lr, cfg.train.beta1, cfg.train.beta2, cfg.train.weight_decay, 1e-8});

    StageResult result;
    std::uint64_t global_step = 0;
    Rng seeder(cfg.seed);
    for (std::size_t epoch = 0; epoch < cfg.train.epochs_stage2; ++epoch) {
        const auto batches = sample_batches(bench.train.size(), cfg.train.batch_size,
                                            seeder.fork("stage2_epoch", epoch).next_u64());
        double epoch_loss = 0;
        for (const auto& batch : batches) {
            const double lr = lr_at_step(global_step, batches.size(), cfg.train.lr,
                                         cfg.train.warmup_floor_lr, cfg.train.warmup_epochs);
            TapeT<S> tape;
            LossBreakdown b;
            auto loss = build_stage2_batch_loss(tape, model, features, bench, ls, verb_table, noun_table,
                                                batch, cfg, &b);
            if (!std::isfinite(b.total))
                throw UsageError("stage 2 diverged at step " + std::to_string(global_step) +
                                 " (loss is not finite)");
            opt.zero_grad();
            tape.backward(loss);
            detail::emit_step_diag(hook, model, 2, global_step, epoch, lr, b);
            opt.step(lr);
            epoch_loss += b.total;
            Json j;
            j["stage"] = 2;
            j["step"] = global_step;
            j["epoch"] = epoch;
            j["lr"] = lr;
            j["ce_verb"] = b.ce_verb;
            j["ce_noun"] = b.ce_noun;
            j["freq"] = b.freq;
            j["orth"] = b.orth;
            j["total"] = b.total;
            j["entropy_verb"] = selection_entropy(model.pool, Component::kVerb);
            j["entropy_noun"] = selection_entropy(model.pool, Component::kNoun);
            log_line(log, j);
            ++global_step;
        }
        epoch_loss /= static_cast<double>(batches.size());
        if (epoch == 0) result.first_epoch_mean_loss = epoch_loss;
        result.last_epoch_mean_loss = epoch_loss;
        Json j;
        j["stage"] = 2;
        j["epoch"] = epoch;
        j["epoch_mean_total"] = epoch_loss;
        j["counters"] = counters_to_json(model.pool);
        j["entropy_verb"] = selection_entropy(model.pool, Component::kVerb);
        j["entropy_noun"] = selection_entropy(model.pool, Component::kNoun);
        log_line(log, j);
        model.pool.reset_counters();  // logged, then reset at the epoch boundary
        if (on_epoch_end) on_epoch_end(epoch);
    }
    result.steps = global_step;
    return result;
}

/// Joint variant: prompts, pool, and projector all optimize under the sum of
/// the stage-1 terms and the unified objective. Features and tables stay on
/// the tape, so this cannot use the stage-2 caches.
template <typename S>
StageResult train_joint(ModelStateT<S>& model, const SyntheticBenchmark& bench, const RunConfig& cfg,
                        std::ostream* log = nullptr, const StepHook& hook = {},
                        const EpochHook& on_epoch_end = {}) {
    const LabelSpace ls = build_label_space(bench);
    model.verb_prompts.set_trainable(true);
    model.noun_prompts.set_trainable(true);
    model.pool.set_trainable(true);
    model.projector.set_trainable(true);

    NamedParams<S> params = prompt_params(model.verb_prompts);
    for (auto& p : prompt_params(model.noun_prompts)) params.push_back(p);
    for (auto& p : pool_and_projector_params(model)) params.push_back(p);
    AdamWT<S> opt(params, {cfg.train.lr, cfg.train.beta1, cfg.train.beta2, cfg.train.weight_decay, 1e-8});

    const std::size_t total_epochs = cfg.train.epochs_stage1 + cfg.train.epochs_stage2;
    StageResult result;
    std::uint64_t global_step = 0;
    Rng seeder(cfg.seed);
    for (std::size_t epoch = 0; epoch < total_epochs; ++epoch) {
        const auto batches = sample_batches(bench.train.size(), cfg.train.batch_size,
                                            seeder.fork("joint_epoch", epoch).next_u64());
        double epoch_loss = 0;
        for (const auto& batch : batches) {
            const double lr = lr_at_step(global_step, batches.size(), cfg.train.lr,
                                         cfg.train.warmup_floor_lr, cfg.train.warmup_epochs);
            TapeT<S> tape;
            model.pool.reset_window();
            LossBreakdown b1;
            auto s1 = build_stage1_batch_loss(tape, model, bench, ls, batch, cfg, &b1);

            // unified terms on tape-resident features
            auto verb_table = encode_text_classes(tape, model.encoder, model.verb_prompts,
                                                  ls.base_verb_names, cfg.model.verb_template);
            auto noun_table = encode_text_classes(tape, model.encoder, model.noun_prompts,
                                                  ls.base_noun_names, cfg.model.noun_template);
            UnifiedBatchTermsT<S> terms;
            for (auto idx : batch) {
                const Sample& s = bench.train.samples[idx];
                std::vector<S> tok(s.tokens.begin(), s.tokens.end());
                auto clip = TensorT<S>::make({cfg.data.tokens_per_clip(), cfg.data.width}, std::move(tok));
                auto f_v = component_video_feature(tape, model.encoder, model.verb_prompts, clip);
                auto f_n = component_video_feature(tape, model.encoder, model.noun_prompts, clip);
                auto rv = retrieve_topk(tape, f_v, model.pool, cfg.train.top_k, cfg.train.tau_pool,
                                        Component::kVerb);
                record_selection(rv, model.pool);
                auto rn = retrieve_topk(tape, f_n, model.pool, cfg.train.top_k, cfg.train.tau_pool,
                                        Component::kNoun);
                record_selection(rn, model.pool);
                auto f_s = project_fusion(tape, fuse_patterns(tape, rv, model.pool),
                                          fuse_patterns(tape, rn, model.pool), model.projector);
                terms.ce_verb.push_back(component_ce_loss(
                    tape, f_s, verb_table, static_cast<std::size_t>(ls.verb_local[s.verb_label]),
                    cfg.loss.tau_cls));
                terms.ce_noun.push_back(component_ce_loss(
                    tape, f_s, noun_table, static_cast<std::size_t>(ls.noun_local[s.noun_label]),
                    cfg.loss.tau_cls));
            }
            auto loss = tape.add(s1, unified_loss(tape, terms, model.pool, cfg.loss));
            LossBreakdown b = b1;
            b.total = loss.scalar_value();
            b.freq = freq_reg_value(model.pool, cfg.loss.k_freq);
            b.orth = orth_value(model.pool);
            if (!std::isfinite(b.total))
                throw UsageError("joint training diverged at step " + std::to_string(global_step) +
                                 " (loss is not finite)");
            opt.zero_grad();
            tape.backward(loss);
            detail::emit_step_diag(hook, model, 3, global_step, epoch, lr, b);
            opt.step(lr);
            epoch_loss += b.total;
            Json j;
            j["stage"] = 3;
            j["step"] = global_step;
            j["epoch"] = epoch;
            j["lr"] = lr;
            j["total"] = b.total;
            j["freq"] = b.freq;
            j["orth"] = b.orth;
            j["entropy_verb"] = selection_entropy(model.pool, Component::kVerb);
            j["entropy_noun"] = selection_entropy(model.pool, Component::kNoun);
            log_line(log, j);
            ++global_step;
        }
        epoch_loss /= static_cast<double>(batches.size());
        if (epoch == 0) result.first_epoch_mean_loss = epoch_loss;
        result.last_epoch_mean_loss = epoch_loss;
        Json j;
        j["stage"] = 3;
        j["epoch"] = epoch;
        j["epoch_mean_total"] = epoch_loss;
        j["counters"] = counters_to_json(model.pool);
        log_line(log, j);
        model.pool.reset_counters();
        if (on_epoch_end) on_epoch_end(epoch);
    }
    result.steps = global_step;
    return result;
}

// ---- checkpoints -------------------------------------------------------------------

template <typename S>
void save_checkpoint(const ModelStateT<S>& model, const RunConfig& cfg, const std::string& stage,
                     const std::string& path) {
    Json manifest;
    manifest["format"] = kCheckpointFormat;
    manifest["format_version"] = kCheckpointFormatVersion;
    manifest["stage"] = stage;
    manifest["config"] = run_config_to_json(cfg);

    BinFileWriter w(std::move(manifest));
    model.for_each_param([&](const std::string& name, const TensorT<S>& t) {
        std::vector<float> vals(t.values().begin(), t.values().end());
        std::vector<std::uint64_t> shape(t.shape().begin(), t.shape().end());
        if (shape.empty()) shape.push_back(1);
        w.add_f32(name, std::move(shape), vals.data(), vals.size());
    });
    for (std::size_t c = 0; c < 2; ++c) {
        std::vector<std::int32_t> counts;
        for (auto n : model.pool.counters[c]) counts.push_back(static_cast<std::int32_t>(n));
        const std::string name =
            std::string("counters.") + (c == component_index(Component::kVerb) ? "verb" : "noun");
        w.add_i32(name, {counts.size()}, counts.data(), counts.size());
    }
    w.write(path);
}

template <typename S>
struct LoadedCheckpoint {
    RunConfig config;
    std::string stage;
    ModelStateT<S> model;
};

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
    BinFileReader r(path);
    const Json& m = r.manifest();
    if (!m.contains("format") || m["format"].get<std::string>() != kCheckpointFormat)
        throw LoadError("'" + path + "' is not a checkpoint file");
    if (m["format_version"].get<int>() != kCheckpointFormatVersion)
        throw LoadError("'" + path + "' has checkpoint format version " +
                        std::to_string(m["format_version"].get<int>()) + ", expected " +
                        std::to_string(kCheckpointFormatVersion));
    LoadedCheckpoint<S> out;
    out.config = run_config_from_json(m.at("config"));
    out.stage = m.at("stage").get<std::string>();
    out.model = init_model_state<S>(out.config);
    out.model.for_each_param([&](const std::string& name, const TensorT<S>& t) {
        auto vals = r.read_f32(name);
        if (vals.size() != t.size())
            throw LoadError("'" + path + "' parameter '" + name + "' holds " +
                            std::to_string(vals.size()) + " values, expected " + std::to_string(t.size()));
        auto& dst = const_cast<TensorT<S>&>(t).values_mut();
        for (std::size_t i = 0; i < vals.size(); ++i) dst[i] = static_cast<S>(vals[i]);
    });
    for (std::size_t c = 0; c < 2; ++c) {
        const std::string name =
            std::string("counters.") + (c == component_index(Component::kVerb) ? "verb" : "noun");
        auto counts = r.read_i32(name);
        out.model.pool.counters[c].assign(counts.begin(), counts.end());
    }
    return out;
}

using ModelState = ModelStateT<float>;

}  // namespace egoprompt
