#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "egoprompt/encoder.hpp"
#include "egoprompt/losses.hpp"
#include "egoprompt/synth_data.hpp"

namespace egoprompt {

enum class Variant { kTwoStage, kStage1Only, kStage2Only, kJoint };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::kTwoStage: return "two-stage";
        case Variant::kStage1Only: return "stage1-only";
        case Variant::kStage2Only: return "stage2-only";
        case Variant::kJoint: return "joint";
    }
    return "two-stage";
}

inline Variant variant_from_name(const std::string& name) {
    if (name == "two-stage") return Variant::kTwoStage;
    if (name == "stage1-only") return Variant::kStage1Only;
    if (name == "stage2-only") return Variant::kStage2Only;
    if (name == "joint") return Variant::kJoint;
    throw ConfigError("train.variant: unknown variant '" + name +
                      "' (expected two-stage | stage1-only | stage2-only | joint)");
}

struct TrainConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double weight_decay = 0.01;
    std::size_t warmup_epochs = 2;
    double warmup_floor_lr = 2e-5;
    std::size_t epochs_stage1 = 5;
    std::size_t epochs_stage2 = 5;
    std::size_t batch_size = 8;
    std::size_t pool_size = 16;  // P
    std::size_t top_k = 4;       // k
    double tau_pool = 0.07;
    Variant variant = Variant::kTwoStage;
};

/// Everything one run needs: model geometry, benchmark spec, optimization and
/// loss settings. Serialized verbatim into checkpoints and run manifests.
struct RunConfig {
    std::uint64_t seed = 0;
    struct Model {
        std::size_t depth = 2;
        std::size_t heads = 4;
        std::size_t text_prompt_len = 4;
        std::size_t video_prompt_len = 4;
        bool deep_prompting = true;
        std::string verb_template = kVerbTemplate;
        std::string noun_template = kNounTemplate;
    } model;
    BenchmarkSpec data;
    TrainConfig train;
    LossWeights loss;

    EncoderConfig encoder_config() const {
        EncoderConfig cfg;
        cfg.depth = model.depth;
        cfg.width = data.width;
        cfg.heads = model.heads;
        cfg.text_prompt_len = model.text_prompt_len;
        cfg.video_prompt_len = model.video_prompt_len;
        cfg.frames = data.frames;
        cfg.patches = data.patches;
        cfg.deep_prompting = model.deep_prompting;
        return cfg;
    }

    void validate() const {
        encoder_config().validate();
        data.validate();
        if (train.lr <= 0) throw ConfigError("train.lr: must be > 0");
        if (train.beta1 < 0 || train.beta1 >= 1) throw ConfigError("train.beta1: outside [0, 1)");
        if (train.beta2 < 0 || train.beta2 >= 1) throw ConfigError("train.beta2: outside [0, 1)");
        if (train.weight_decay < 0) throw ConfigError("train.weight_decay: must be >= 0");
        if (train.warmup_floor_lr < 0) throw ConfigError("train.warmup_floor_lr: must be >= 0");
        if (train.batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
        if (train.pool_size < 1) throw ConfigError("train.pool_size: must be >= 1");
        if (train.top_k < 1 || train.top_k > train.pool_size)
            throw ConfigError("train.top_k: " + std::to_string(train.top_k) + " outside [1, " +
                              std::to_string(train.pool_size) + "] (pool_size)");
        if (train.tau_pool <= 0) throw ConfigError("train.tau_pool: must be > 0");
        const bool uses_stage1 = train.variant != Variant::kStage2Only;
        const bool uses_stage2 = train.variant != Variant::kStage1Only;
        if (uses_stage1 && train.epochs_stage1 > 0 && train.warmup_epochs >= train.epochs_stage1)
            throw ConfigError("train.warmup_epochs: must be < epochs_stage1");
        if (uses_stage2 && train.epochs_stage2 > 0 && train.warmup_epochs >= train.epochs_stage2)
            throw ConfigError("train.warmup_epochs: must be < epochs_stage2");
        loss.validate(train.pool_size);
    }
};

// ---- json (strict schema; unknown keys are config errors) --------------------

namespace detail {

template <typename T>
void pull(const Json& j, const char* section, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const Json::exception&) {
        throw ConfigError(std::string(section) + "." + key + ": type mismatch");
    }
}

inline void reject_unknown(const Json& j, const char* section,
                           std::initializer_list<const char*> known) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (auto* k : known) ok = ok || it.key() == k;
        if (!ok) throw ConfigError(std::string(section) + "." + it.key() + ": unknown key");
    }
}

}  // namespace detail

inline Json run_config_to_json(const RunConfig& cfg) {
    Json j;
    j["seed"] = cfg.seed;
    Json m;
    m["depth"] = cfg.model.depth;
    m["heads"] = cfg.model.heads;
    m["text_prompt_len"] = cfg.model.text_prompt_len;
    m["video_prompt_len"] = cfg.model.video_prompt_len;
    m["deep_prompting"] = cfg.model.deep_prompting;
    m["verb_template"] = cfg.model.verb_template;
    m["noun_template"] = cfg.model.noun_template;
    j["model"] = m;
    j["data"] = benchmark_spec_to_json(cfg.data);
    Json t;
    t["lr"] = cfg.train.lr;
    t["beta1"] = cfg.train.beta1;
    t["beta2"] = cfg.train.beta2;
    t["weight_decay"] = cfg.train.weight_decay;
    t["warmup_epochs"] = cfg.train.warmup_epochs;
    t["warmup_floor_lr"] = cfg.train.warmup_floor_lr;
    t["epochs_stage1"] = cfg.train.epochs_stage1;
    t["epochs_stage2"] = cfg.train.epochs_stage2;
    t["batch_size"] = cfg.train.batch_size;
    t["pool_size"] = cfg.train.pool_size;
    t["top_k"] = cfg.train.top_k;
    t["tau_pool"] = cfg.train.tau_pool;
    t["variant"] = variant_name(cfg.train.variant);
    j["train"] = t;
    Json l;
    l["lambda_freq"] = cfg.loss.lambda_freq;
    l["lambda_orth"] = cfg.loss.lambda_orth;
    l["lambda_kg"] = cfg.loss.lambda_kg;
    l["tau_cls"] = cfg.loss.tau_cls;
    l["k_freq"] = cfg.loss.k_freq;
    j["loss"] = l;
    return j;
}

/// Strict parse over documented defaults: unknown keys, type mismatches, and
/// constraint violations raise ConfigError naming the key. When loss.k_freq
/// is absent it follows train.top_k.
inline RunConfig run_config_from_json(const Json& j) {
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    detail::reject_unknown(j, "config", {"seed", "model", "data", "train", "loss"});
    RunConfig cfg;
    detail::pull(j, "config", "seed", cfg.seed);
    if (j.contains("model")) {
        const Json& m = j.at("model");
        detail::reject_unknown(m, "model",
                               {"depth", "heads", "text_prompt_len", "video_prompt_len", "deep_prompting",
                                "verb_template", "noun_template"});
        detail::pull(m, "model", "depth", cfg.model.depth);
        detail::pull(m, "model", "heads", cfg.model.heads);
        detail::pull(m, "model", "text_prompt_len", cfg.model.text_prompt_len);
        detail::pull(m, "model", "video_prompt_len", cfg.model.video_prompt_len);
        detail::pull(m, "model", "deep_prompting", cfg.model.deep_prompting);
        detail::pull(m, "model", "verb_template", cfg.model.verb_template);
        detail::pull(m, "model", "noun_template", cfg.model.noun_template);
    }
    if (j.contains("data")) {
        const Json& d = j.at("data");
        detail::reject_unknown(d, "data",
                               {"n_verbs", "n_nouns", "compat", "samples_per_split", "frames", "patches",
                                "width", "clutter_ratio", "noise_std_within", "noise_std_cross",
                                "rotation_strength", "novel_fraction"});
        detail::pull(d, "data", "n_verbs", cfg.data.n_verbs);
        detail::pull(d, "data", "n_nouns", cfg.data.n_nouns);
        detail::pull(d, "data", "compat", cfg.data.compat);
        detail::pull(d, "data", "samples_per_split", cfg.data.samples_per_split);
        detail::pull(d, "data", "frames", cfg.data.frames);
        detail::pull(d, "data", "patches", cfg.data.patches);
        detail::pull(d, "data", "width", cfg.data.width);
        detail::pull(d, "data", "clutter_ratio", cfg.data.clutter_ratio);
        detail::pull(d, "data", "noise_std_within", cfg.data.domain_shift.noise_std_within);
        detail::pull(d, "data", "noise_std_cross", cfg.data.domain_shift.noise_std_cross);
        detail::pull(d, "data", "rotation_strength", cfg.data.domain_shift.rotation_strength);
        detail::pull(d, "data", "novel_fraction", cfg.data.novel_fraction);
    }
    bool k_freq_given = false;
    if (j.contains("train")) {
        const Json& t = j.at("train");
        detail::reject_unknown(t, "train",
                               {"lr", "beta1", "beta2", "weight_decay", "warmup_epochs", "warmup_floor_lr",
                                "epochs_stage1", "epochs_stage2", "batch_size", "pool_size", "top_k",
                                "tau_pool", "variant"});
        detail::pull(t, "train", "lr", cfg.train.lr);
        detail::pull(t, "train", "beta1", cfg.train.beta1);
        detail::pull(t, "train", "beta2", cfg.train.beta2);
        detail::pull(t, "train", "weight_decay", cfg.train.weight_decay);
        detail::pull(t, "train", "warmup_epochs", cfg.train.warmup_epochs);
        detail::pull(t, "train", "warmup_floor_lr", cfg.train.warmup_floor_lr);
        detail::pull(t, "train", "epochs_stage1", cfg.train.epochs_stage1);
        detail::pull(t, "train", "epochs_stage2", cfg.train.epochs_stage2);
        detail::pull(t, "train", "batch_size", cfg.train.batch_size);
        detail::pull(t, "train", "pool_size", cfg.train.pool_size);
        detail::pull(t, "train", "top_k", cfg.train.top_k);
        detail::pull(t, "train", "tau_pool", cfg.train.tau_pool);
        if (t.contains("variant")) cfg.train.variant = variant_from_name(t.at("variant").get<std::string>());
    }
    if (j.contains("loss")) {
        const Json& l = j.at("loss");
        detail::reject_unknown(l, "loss", {"lambda_freq", "lambda_orth", "lambda_kg", "tau_cls", "k_freq"});
        detail::pull(l, "loss", "lambda_freq", cfg.loss.lambda_freq);
        detail::pull(l, "loss", "lambda_orth", cfg.loss.lambda_orth);
        detail::pull(l, "loss", "lambda_kg", cfg.loss.lambda_kg);
        detail::pull(l, "loss", "tau_cls", cfg.loss.tau_cls);
        k_freq_given = l.contains("k_freq");
        detail::pull(l, "loss", "k_freq", cfg.loss.k_freq);
    }
    if (!k_freq_given) cfg.loss.k_freq = cfg.train.top_k;
    cfg.validate();
    return cfg;
}

}  // namespace egoprompt
