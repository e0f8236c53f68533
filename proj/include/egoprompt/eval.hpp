#pragma once

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "egoprompt/metrics.hpp"
#include "egoprompt/trainer.hpp"

namespace egoprompt {

enum class EvalMode { kStage1, kStage2 };

inline const char* eval_mode_name(EvalMode m) { return m == EvalMode::kStage1 ? "stage1" : "stage2"; }

struct MetricsCell {
    double average_accuracy = 0;
    double class_average_accuracy = 0;
};

/// Per component x split accuracies plus harmonic means over the paper's two
/// pairings. A harmonic mean is reported as 0 when either input is 0.
struct MetricsReport {
    std::map<std::string, std::map<std::string, MetricsCell>> cells;  // component -> split -> cell
    std::map<std::string, double> hm_within_cross_avg, hm_within_cross_cls;
    std::map<std::string, double> hm_base_novel_avg, hm_base_novel_cls;
};

namespace detail {

inline double guarded_hm(double a, double b) { return (a > 0 && b > 0) ? harmonic_mean(a, b) : 0.0; }

/// Argmax of cosine scores against the table rows; ties resolve to the
/// lowest index by the fixed scan order.
template <typename S>
std::int32_t predict_label(const TensorT<S>& f, const ClassEmbeddingTableT<S>& table) {
    TapeT<S> local;
    auto cosv = local.matvec(local.l2_normalize_rows(table.embeddings), local.l2_normalize(f));
    std::size_t best = 0;
    for (std::size_t i = 1; i < cosv.size(); ++i)
        if (cosv.value(i) > cosv.value(best)) best = i;
    return static_cast<std::int32_t>(best);
}

template <typename S>
TensorT<S> fused_feature(ModelStateT<S>& model, const TensorT<S>& f_v, const TensorT<S>& f_n,
                         const RunConfig& cfg, TapeT<S>& tape) {
    auto rv = retrieve_topk(tape, f_v, model.pool, cfg.train.top_k, cfg.train.tau_pool, Component::kVerb);
    auto rn = retrieve_topk(tape, f_n, model.pool, cfg.train.top_k, cfg.train.tau_pool, Component::kNoun);
    return project_fusion(tape, fuse_patterns(tape, rv, model.pool), fuse_patterns(tape, rn, model.pool),
                          model.projector);
}

}  // namespace detail

/// Scores one dataset; truth labels are remapped through the given
/// global -> local tables. Evaluation is read-only: selection counters and
/// windows are untouched.
template <typename S>
MetricsCell evaluate_split_component(ModelStateT<S>& model, const Dataset& ds, Component comp,
                                     const ClassEmbeddingTableT<S>& table,
                                     const std::vector<int>& global_to_local, EvalMode mode,
                                     const ClassEmbeddingTableT<S>* other_table, const RunConfig& cfg) {
    (void)other_table;
    std::vector<std::int32_t> preds, truth;
    preds.reserve(ds.size());
    truth.reserve(ds.size());
    for (const auto& s : ds.samples) {
        TapeT<S> tape;
        std::vector<S> tok(s.tokens.begin(), s.tokens.end());
        auto clip = TensorT<S>::make({cfg.data.tokens_per_clip(), cfg.data.width}, std::move(tok));
        TensorT<S> f;
        if (mode == EvalMode::kStage1) {
            f = component_video_feature(tape, model.encoder, model.prompts(comp), clip);
        } else {
            auto f_v = component_video_feature(tape, model.encoder, model.verb_prompts, clip);
            auto f_n = component_video_feature(tape, model.encoder, model.noun_prompts, clip);
            f = detail::fused_feature(model, f_v, f_n, cfg, tape);
        }
        preds.push_back(detail::predict_label(f, table));
        const std::int32_t g = comp == Component::kVerb ? s.verb_label : s.noun_label;
        truth.push_back(global_to_local[static_cast<std::size_t>(g)]);
    }
    MetricsCell cell;
    cell.average_accuracy = average_accuracy(preds, truth);
    cell.class_average_accuracy = class_average_accuracy(preds, truth);
    return cell;
}

/// Full protocol: within/cross on the base class sets and base-to-novel with
/// zero-shot novel tables built from the learned prompts on novel names.
template <typename S>
MetricsReport evaluate_model(ModelStateT<S>& model, const SyntheticBenchmark& bench, EvalMode mode,
                             const RunConfig& cfg) {
    const LabelSpace ls = build_label_space(bench);
    auto [verb_table, noun_table] = snapshot_tables(model, ls, cfg);

    MetricsReport report;
    struct SplitJob {
        const char* split;
        const Dataset* ds;
    };
    const std::vector<SplitJob> base_jobs = {{"train", &bench.train},
                                             {"within", &bench.within_test},
                                             {"cross", &bench.cross_test},
                                             {"base", &bench.base_test}};
    for (Component comp : {Component::kVerb, Component::kNoun}) {
        const auto& table = comp == Component::kVerb ? verb_table : noun_table;
        const auto& to_local = comp == Component::kVerb ? ls.verb_local : ls.noun_local;
        for (const auto& job : base_jobs) {
            if (job.ds->empty()) continue;
            report.cells[component_name(comp)][job.split] =
                evaluate_split_component(model, *job.ds, comp, table, to_local, mode, nullptr, cfg);
        }
    }

    if (!bench.novel_test.empty()) {
        TapeT<S> local;
        auto nv = encode_text_classes(local, model.encoder, model.verb_prompts, ls.novel_verb_names,
                                      cfg.model.verb_template);
        auto nn = encode_text_classes(local, model.encoder, model.noun_prompts, ls.novel_noun_names,
                                      cfg.model.noun_template);
        ClassEmbeddingTableT<S> novel_verb{Component::kVerb, false,
                                           TensorT<S>::make(nv.embeddings.shape(), nv.embeddings.values()),
                                           ls.novel_verb_names};
        ClassEmbeddingTableT<S> novel_noun{Component::kNoun, false,
                                           TensorT<S>::make(nn.embeddings.shape(), nn.embeddings.values()),
                                           ls.novel_noun_names};
        report.cells["verb"]["novel"] = evaluate_split_component(
            model, bench.novel_test, Component::kVerb, novel_verb, ls.verb_novel_local, mode, nullptr, cfg);
        report.cells["noun"]["novel"] = evaluate_split_component(
            model, bench.novel_test, Component::kNoun, novel_noun, ls.noun_novel_local, mode, nullptr, cfg);
    }

    for (const char* comp : {"verb", "noun"}) {
        auto& splits = report.cells[comp];
        if (splits.count("within") && splits.count("cross")) {
            report.hm_within_cross_avg[comp] = detail::guarded_hm(splits["within"].average_accuracy,
                                                                  splits["cross"].average_accuracy);
            report.hm_within_cross_cls[comp] = detail::guarded_hm(
                splits["within"].class_average_accuracy, splits["cross"].class_average_accuracy);
        }
        if (splits.count("base") && splits.count("novel")) {
            report.hm_base_novel_avg[comp] =
                detail::guarded_hm(splits["base"].average_accuracy, splits["novel"].average_accuracy);
            report.hm_base_novel_cls[comp] = detail::guarded_hm(splits["base"].class_average_accuracy,
                                                                splits["novel"].class_average_accuracy);
        }
    }
    return report;
}

// ---- stable textual emission ---------------------------------------------------

inline std::string format_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

/// component,split,metric,value rows in a fixed order.
inline std::string metrics_to_csv(const MetricsReport& r) {
    std::string out = "component,split,metric,value\n";
    for (const char* comp : {"verb", "noun"}) {
        auto it = r.cells.find(comp);
        if (it == r.cells.end()) continue;
        for (const char* split : {"train", "within", "cross", "base", "novel"}) {
            auto sit = it->second.find(split);
            if (sit == it->second.end()) continue;
            out += std::string(comp) + "," + split + ",average_accuracy," +
                   format_metric(sit->second.average_accuracy) + "\n";
            out += std::string(comp) + "," + split + ",class_average_accuracy," +
                   format_metric(sit->second.class_average_accuracy) + "\n";
        }
        auto emit_hm = [&](const char* split, const std::map<std::string, double>& m, const char* metric) {
            auto hit = m.find(comp);
            if (hit != m.end())
                out += std::string(comp) + "," + split + "," + metric + "," + format_metric(hit->second) +
                       "\n";
        };
        emit_hm("within+cross", r.hm_within_cross_avg, "hm_average_accuracy");
        emit_hm("within+cross", r.hm_within_cross_cls, "hm_class_average_accuracy");
        emit_hm("base+novel", r.hm_base_novel_avg, "hm_average_accuracy");
        emit_hm("base+novel", r.hm_base_novel_cls, "hm_class_average_accuracy");
    }
    return out;
}

inline Json metrics_to_json(const MetricsReport& r) {
    Json j;
    for (const auto& [comp, splits] : r.cells)
        for (const auto& [split, cell] : splits) {
            j["cells"][comp][split]["average_accuracy"] = cell.average_accuracy;
            j["cells"][comp][split]["class_average_accuracy"] = cell.class_average_accuracy;
        }
    for (const auto& [comp, v] : r.hm_within_cross_avg) j["hm"]["within_cross"]["average"][comp] = v;
    for (const auto& [comp, v] : r.hm_within_cross_cls) j["hm"]["within_cross"]["class_average"][comp] = v;
    for (const auto& [comp, v] : r.hm_base_novel_avg) j["hm"]["base_novel"]["average"][comp] = v;
    for (const auto& [comp, v] : r.hm_base_novel_cls) j["hm"]["base_novel"]["class_average"][comp] = v;
    return j;
}

}  // namespace egoprompt
