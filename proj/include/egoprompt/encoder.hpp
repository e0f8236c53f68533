#pragma once

#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "egoprompt/crc32.hpp"
#include "egoprompt/tensor.hpp"

namespace egoprompt {

enum class Component { kVerb, kNoun };

inline const char* component_name(Component c) { return c == Component::kVerb ? "verb" : "noun"; }

inline constexpr const char* kVerbTemplate = "a video of a [CLASS] action";
inline constexpr const char* kNounTemplate = "a video of actioning on [CLASS]";

struct EncoderConfig {
    std::size_t depth = 2;             // transformer layers K (text and video)
    std::size_t width = 32;            // embedding width d
    std::size_t heads = 4;
    std::size_t text_prompt_len = 4;   // L_t
    std::size_t video_prompt_len = 4;  // L_v
    std::size_t frames = 4;            // T
    std::size_t patches = 4;           // S, patch tokens per frame
    bool deep_prompting = true;        // fresh prompts at every layer vs layer 1 only

    void validate() const {
        if (depth < 1) throw ConfigError("model.depth: must be >= 1");
        if (width < 1) throw ConfigError("model.width: must be >= 1");
        if (heads < 1 || width % heads != 0)
            throw ConfigError("model.heads: width " + std::to_string(width) +
                              " must be divisible by heads " + std::to_string(heads));
        if (text_prompt_len < 1) throw ConfigError("model.text_prompt_len: must be >= 1");
        if (video_prompt_len < 1) throw ConfigError("model.video_prompt_len: must be >= 1");
        if (frames < 1) throw ConfigError("model.frames: must be >= 1");
        if (patches < 1) throw ConfigError("model.patches: must be >= 1");
    }

    std::size_t video_tokens() const { return frames * patches; }
};

// ---- tokenization (deterministic hash embeddings, no vocabulary) ------------

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

/// Instantiates `[CLASS]` in the template and tokenizes to lowercase words.
inline std::vector<std::string> tokenize_template(const std::string& tmpl, const std::string& cls) {
    const std::string placeholder = "[CLASS]";
    const auto pos = tmpl.find(placeholder);
    if (pos == std::string::npos)
        throw TemplateError("template '" + tmpl + "' is missing the [CLASS] placeholder");
    std::string text = tmpl.substr(0, pos) + cls + tmpl.substr(pos + placeholder.size());
    return split_words(text);
}

/// Deterministic embedding of a token string: a Gaussian row seeded from the
/// token's hash, std 0.02 like the rest of the frozen base.
template <typename S>
std::vector<S> token_embedding(const std::string& token, std::uint64_t vocab_seed, std::size_t d) {
    Rng rng = Rng(vocab_seed).fork(token);
    std::vector<S> row(d);
    for (auto& x : row) x = static_cast<S>(rng.gaussian(0.0, 0.02));
    return row;
}

/// Sinusoidal position encoding row, scaled to sit at the content's magnitude.
template <typename S>
std::vector<S> position_encoding(std::size_t pos, std::size_t d, double scale) {
    std::vector<S> row(d);
    for (std::size_t j = 0; j < d; ++j) {
        const double freq = std::pow(10000.0, -static_cast<double>(j / 2 * 2) / static_cast<double>(d));
        const double angle = static_cast<double>(pos) * freq;
        row[j] = static_cast<S>(scale * (j % 2 == 0 ? std::sin(angle) : std::cos(angle)));
    }
    return row;
}

// ---- frozen dual-encoder parameters -----------------------------------------

template <typename S>
struct AttentionParamsT {
    TensorT<S> wq, bq, wk, bk, wv, bv, wo, bo;

    template <typename Fn>
    void for_each_param(const std::string& prefix, Fn&& fn) const {
        fn(prefix + ".wq", wq);
        fn(prefix + ".bq", bq);
        fn(prefix + ".wk", wk);
        fn(prefix + ".bk", bk);
        fn(prefix + ".wv", wv);
        fn(prefix + ".bv", bv);
        fn(prefix + ".wo", wo);
        fn(prefix + ".bo", bo);
    }
};

template <typename S>
struct TextLayerT {
    AttentionParamsT<S> attn;
    TensorT<S> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    TensorT<S> mlp_w1, mlp_b1, mlp_w2, mlp_b2;

    template <typename Fn>
    void for_each_param(const std::string& prefix, Fn&& fn) const {
        attn.for_each_param(prefix + ".attn", fn);
        fn(prefix + ".ln1_gamma", ln1_gamma);
        fn(prefix + ".ln1_beta", ln1_beta);
        fn(prefix + ".ln2_gamma", ln2_gamma);
        fn(prefix + ".ln2_beta", ln2_beta);
        fn(prefix + ".mlp_w1", mlp_w1);
        fn(prefix + ".mlp_b1", mlp_b1);
        fn(prefix + ".mlp_w2", mlp_w2);
        fn(prefix + ".mlp_b2", mlp_b2);
    }
};

template <typename S>
struct VideoLayerT {
    AttentionParamsT<S> time_attn, space_attn;
    TensorT<S> mlp_w1, mlp_b1, mlp_w2, mlp_b2;

    template <typename Fn>
    void for_each_param(const std::string& prefix, Fn&& fn) const {
        time_attn.for_each_param(prefix + ".time_attn", fn);
        space_attn.for_each_param(prefix + ".space_attn", fn);
        fn(prefix + ".mlp_w1", mlp_w1);
        fn(prefix + ".mlp_b1", mlp_b1);
        fn(prefix + ".mlp_w2", mlp_w2);
        fn(prefix + ".mlp_b2", mlp_b2);
    }
};

inline constexpr std::size_t kMlpRatio = 4;
inline constexpr double kTextPeScale = 0.02;
inline constexpr double kVideoPeScale = 0.1;

/// Frozen base: a tiny text transformer and a divided space-time video
/// transformer. Only prompt parameters learn; these weights never move.
template <typename S>
struct FrozenEncoderT {
    EncoderConfig cfg;
    std::uint64_t seed = 0;
    std::uint64_t vocab_seed = 0;
    std::vector<TextLayerT<S>> text_layers;
    std::vector<VideoLayerT<S>> video_layers;
    TensorT<S> eos_embedding;  // [d]

    template <typename Fn>
    void for_each_param(Fn&& fn) const {
        for (std::size_t k = 0; k < text_layers.size(); ++k)
            text_layers[k].for_each_param("text." + std::to_string(k), fn);
        for (std::size_t k = 0; k < video_layers.size(); ++k)
            video_layers[k].for_each_param("video." + std::to_string(k), fn);
        fn("eos_embedding", eos_embedding);
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for_each_param([&](const std::string&, const TensorT<S>& t) { n += t.size(); });
        return n;
    }

    std::uint32_t checksum() const {
        std::uint32_t crc = 0;
        for_each_param([&](const std::string&, const TensorT<S>& t) {
            crc = crc32(t.values().data(), t.values().size() * sizeof(S), crc);
        });
        return crc;
    }
};

/// Closed-form frozen parameter count for a config (audited by enumeration in
/// tests). Text layer: attention 4(d^2+d), two layer norms 4d, MLP 8d^2+5d.
/// Video layer: two attentions, MLP, no norms. Plus the EOS embedding.
inline std::size_t frozen_param_count(const EncoderConfig& cfg) {
    const std::size_t d = cfg.width;
    const std::size_t attn = 4 * (d * d + d);
    const std::size_t mlp = d * (kMlpRatio * d) + kMlpRatio * d + (kMlpRatio * d) * d + d;
    const std::size_t text_layer = attn + 4 * d + mlp;
    const std::size_t video_layer = 2 * attn + mlp;
    return cfg.depth * (text_layer + video_layer) + d;
}

namespace detail {

template <typename S>
AttentionParamsT<S> init_attention(Rng rng, std::size_t d) {
    AttentionParamsT<S> p;
    auto w = [&](const char* tag) {
        Rng r = rng.fork(tag);
        return TensorT<S>::gaussian({d, d}, r, 0.0, 0.02);
    };
    auto b = [&](const char* tag) {
        Rng r = rng.fork(tag);
        return TensorT<S>::gaussian({d}, r, 0.0, 0.02);
    };
    p.wq = w("wq");
    p.bq = b("bq");
    p.wk = w("wk");
    p.bk = b("bk");
    p.wv = w("wv");
    p.bv = b("bv");
    p.wo = w("wo");
    p.bo = b("bo");
    return p;
}

template <typename S>
void init_mlp(Rng rng, std::size_t d, TensorT<S>& w1, TensorT<S>& b1, TensorT<S>& w2, TensorT<S>& b2) {
    Rng r1 = rng.fork("w1");
    Rng r2 = rng.fork("b1");
    Rng r3 = rng.fork("w2");
    Rng r4 = rng.fork("b2");
    w1 = TensorT<S>::gaussian({d, kMlpRatio * d}, r1, 0.0, 0.02);
    b1 = TensorT<S>::gaussian({kMlpRatio * d}, r2, 0.0, 0.02);
    w2 = TensorT<S>::gaussian({kMlpRatio * d, d}, r3, 0.0, 0.02);
    b2 = TensorT<S>::gaussian({d}, r4, 0.0, 0.02);
}

}  // namespace detail

template <typename S>
FrozenEncoderT<S> init_frozen_encoders(std::uint64_t seed, const EncoderConfig& cfg) {
    cfg.validate();
    FrozenEncoderT<S> enc;
    enc.cfg = cfg;
    enc.seed = seed;
    Rng root(seed);
    enc.vocab_seed = root.fork("vocab").next_u64();
    const std::size_t d = cfg.width;
    for (std::size_t k = 0; k < cfg.depth; ++k) {
        Rng lr = root.fork("text_layer", k);
        TextLayerT<S> layer;
        layer.attn = detail::init_attention<S>(lr.fork("attn"), d);
        layer.ln1_gamma = TensorT<S>::full({d}, 1.0);
        layer.ln1_beta = TensorT<S>::zeros({d});
        layer.ln2_gamma = TensorT<S>::full({d}, 1.0);
        layer.ln2_beta = TensorT<S>::zeros({d});
        detail::init_mlp<S>(lr.fork("mlp"), d, layer.mlp_w1, layer.mlp_b1, layer.mlp_w2, layer.mlp_b2);
        enc.text_layers.push_back(std::move(layer));
    }
    for (std::size_t k = 0; k < cfg.depth; ++k) {
        Rng lr = root.fork("video_layer", k);
        VideoLayerT<S> layer;
        layer.time_attn = detail::init_attention<S>(lr.fork("time_attn"), d);
        layer.space_attn = detail::init_attention<S>(lr.fork("space_attn"), d);
        detail::init_mlp<S>(lr.fork("mlp"), d, layer.mlp_w1, layer.mlp_b1, layer.mlp_w2, layer.mlp_b2);
        enc.video_layers.push_back(std::move(layer));
    }
    Rng er = root.fork("eos");
    enc.eos_embedding = TensorT<S>::gaussian({d}, er, 0.0, 0.02);
    return enc;
}

// ---- component prompt set (the stage-1 trainables) ---------------------------

/// Per-layer learnable text prompts plus the layer-wise text-to-video
/// projection maps. Derived video prompts are recomputed on every forward.
template <typename S>
struct ComponentPromptSetT {
    Component component = Component::kVerb;
    std::vector<TensorT<S>> text_prompts;  // K x [L_t x d]
    std::vector<TensorT<S>> proj_weights;  // K x [d x d], applied token-wise
    std::vector<TensorT<S>> proj_biases;   // K x [d]
    TensorT<S> token_resample;             // fixed [L_v x L_t] interpolation

    template <typename Fn>
    void for_each_param(Fn&& fn) const {
        const std::string p = std::string("prompts.") + component_name(component);
        for (std::size_t k = 0; k < text_prompts.size(); ++k)
            fn(p + ".text." + std::to_string(k), text_prompts[k]);
        for (std::size_t k = 0; k < proj_weights.size(); ++k) {
            fn(p + ".proj_w." + std::to_string(k), proj_weights[k]);
            fn(p + ".proj_b." + std::to_string(k), proj_biases[k]);
        }
    }

    void set_trainable(bool trainable) {
        for (auto& t : text_prompts) t.set_requires_grad(trainable);
        for (auto& t : proj_weights) t.set_requires_grad(trainable);
        for (auto& t : proj_biases) t.set_requires_grad(trainable);
    }
};

/// Piecewise-linear token-count resampling matrix [L_v x L_t]; identity when
/// the lengths agree.
template <typename S>
TensorT<S> token_resample_matrix(std::size_t l_t, std::size_t l_v) {
    std::vector<S> m(l_v * l_t, S(0));
    if (l_t == 1) {
        for (std::size_t j = 0; j < l_v; ++j) m[j * l_t] = S(1);
    } else if (l_v == 1) {
        const double pos = static_cast<double>(l_t - 1) / 2.0;
        const auto lo = static_cast<std::size_t>(pos);
        const double frac = pos - static_cast<double>(lo);
        m[lo] = static_cast<S>(1.0 - frac);
        if (frac > 0) m[lo + 1] = static_cast<S>(frac);
    } else {
        for (std::size_t j = 0; j < l_v; ++j) {
            const double pos = static_cast<double>(j) * static_cast<double>(l_t - 1) /
                               static_cast<double>(l_v - 1);
            const auto lo = static_cast<std::size_t>(pos);
            const double frac = pos - static_cast<double>(lo);
            m[j * l_t + lo] += static_cast<S>(1.0 - frac);
            if (frac > 0) m[j * l_t + lo + 1] += static_cast<S>(frac);
        }
    }
    return TensorT<S>::make({l_v, l_t}, std::move(m));
}

/// Fresh trainable prompt set. Layer-0 prompts start from the template's
/// leading token embeddings (cycled to L_t); deeper layers and the projection
/// maps start at the frozen-base scale.
template <typename S>
ComponentPromptSetT<S> init_component_prompts(const FrozenEncoderT<S>& enc, Component comp,
                                              const std::string& tmpl, std::uint64_t seed) {
    const EncoderConfig& cfg = enc.cfg;
    ComponentPromptSetT<S> set;
    set.component = comp;
    set.token_resample = token_resample_matrix<S>(cfg.text_prompt_len, cfg.video_prompt_len);
    Rng root = Rng(seed).fork("component_prompts").fork(component_name(comp));

    std::vector<std::string> words = tokenize_template(tmpl, "");
    if (words.empty()) words.push_back("a");
    for (std::size_t k = 0; k < cfg.depth; ++k) {
        std::vector<S> block(cfg.text_prompt_len * cfg.width);
        if (k == 0) {
            for (std::size_t i = 0; i < cfg.text_prompt_len; ++i) {
                auto row = token_embedding<S>(words[i % words.size()], enc.vocab_seed, cfg.width);
                std::copy(row.begin(), row.end(), block.begin() + i * cfg.width);
            }
        } else {
            Rng r = root.fork("text", k);
            for (auto& x : block) x = static_cast<S>(r.gaussian(0.0, 0.02));
        }
        set.text_prompts.push_back(
            TensorT<S>::make({cfg.text_prompt_len, cfg.width}, std::move(block), true));
    }
    for (std::size_t k = 0; k < cfg.depth; ++k) {
        Rng rw = root.fork("proj_w", k);
        set.proj_weights.push_back(TensorT<S>::gaussian({cfg.width, cfg.width}, rw, 0.0, 0.02, true));
        set.proj_biases.push_back(TensorT<S>::zeros({cfg.width}, true));
    }
    return set;
}

/// p_v^k: token-wise affine map of p_t^k followed by L_t -> L_v resampling.
template <typename S>
std::vector<TensorT<S>> map_text_prompts_to_video(TapeT<S>& tape, const ComponentPromptSetT<S>& set) {
    std::vector<TensorT<S>> out;
    out.reserve(set.text_prompts.size());
    for (std::size_t k = 0; k < set.text_prompts.size(); ++k) {
        auto projected = tape.add_bias(tape.matmul(set.text_prompts[k], set.proj_weights[k]),
                                       set.proj_biases[k]);
        out.push_back(tape.matmul(set.token_resample, projected));
    }
    return out;
}

// ---- attention and transformer blocks ----------------------------------------

template <typename S>
TensorT<S> multi_head_attention(TapeT<S>& tape, const AttentionParamsT<S>& p, const TensorT<S>& x,
                                std::size_t heads) {
    const std::size_t d = x.extent(1);
    const std::size_t dh = d / heads;
    auto q = tape.add_bias(tape.matmul(x, p.wq), p.bq);
    auto k = tape.add_bias(tape.matmul(x, p.wk), p.bk);
    auto v = tape.add_bias(tape.matmul(x, p.wv), p.bv);
    std::vector<TensorT<S>> head_outs;
    head_outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        auto qh = tape.slice_cols(q, h * dh, dh);
        auto kh = tape.slice_cols(k, h * dh, dh);
        auto vh = tape.slice_cols(v, h * dh, dh);
        auto scores = tape.scale(tape.matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
        auto alpha = tape.row_softmax_temp(scores, 1.0);
        head_outs.push_back(tape.matmul(alpha, vh));
    }
    auto merged = heads == 1 ? head_outs[0] : tape.concat_cols(head_outs);
    return tape.add_bias(tape.matmul(merged, p.wo), p.bo);
}

template <typename S>
TensorT<S> token_mlp(TapeT<S>& tape, const TensorT<S>& w1, const TensorT<S>& b1, const TensorT<S>& w2,
                     const TensorT<S>& b2, const TensorT<S>& x) {
    auto hidden = tape.gelu(tape.add_bias(tape.matmul(x, w1), b1));
    return tape.add_bias(tape.matmul(hidden, w2), b2);
}

/// Pre-LN text transformer block.
template <typename S>
TensorT<S> text_block(TapeT<S>& tape, const TextLayerT<S>& layer, const TensorT<S>& x, std::size_t heads) {
    auto attn_in = tape.layer_norm(x, layer.ln1_gamma, layer.ln1_beta);
    auto z = tape.add(x, multi_head_attention(tape, layer.attn, attn_in, heads));
    auto mlp_in = tape.layer_norm(z, layer.ln2_gamma, layer.ln2_beta);
    return tape.add(z, token_mlp(tape, layer.mlp_w1, layer.mlp_b1, layer.mlp_w2, layer.mlp_b2, mlp_in));
}

/// Divided space-time block over [T*S patch tokens; L_v prompt tokens]:
///   z  = TimeAttn(e) + e      (frames at a fixed spatial index; prompts skip)
///   z' = SpaceAttn(z) + z     (within each frame; prompts join every frame
///                              and take the frame-average of their outputs)
///   out = MLP(z') + z'
template <typename S>
TensorT<S> divided_spacetime_block(TapeT<S>& tape, const VideoLayerT<S>& layer, const TensorT<S>& e,
                                   const EncoderConfig& cfg, std::size_t prompt_tokens) {
    const std::size_t t_frames = cfg.frames;
    const std::size_t s_patches = cfg.patches;
    const std::size_t n_patch = t_frames * s_patches;
    const std::size_t total = n_patch + prompt_tokens;
    if (e.rank() != 2 || e.extent(0) != total || e.extent(1) != cfg.width)
        throw DimensionError("divided_spacetime_block: token grid " + shape_str(e.shape()) +
                             " does not match config (" + std::to_string(total) + "x" +
                             std::to_string(cfg.width) + ")");

    // Temporal attention: groups of T tokens at a fixed spatial index.
    // Prompt rows receive no temporal output, so the residual leaves them as-is.
    TensorT<S> time_out;
    for (std::size_t s = 0; s < s_patches; ++s) {
        std::vector<std::size_t> idx(t_frames);
        for (std::size_t t = 0; t < t_frames; ++t) idx[t] = t * s_patches + s;
        auto group = tape.gather_rows(e, idx);
        auto out = multi_head_attention(tape, layer.time_attn, group, cfg.heads);
        auto placed = tape.scatter_rows(out, idx, total);
        time_out = time_out.defined() ? tape.add(time_out, placed) : placed;
    }
    auto z = tape.add(e, time_out);

    // Spatial attention: each frame's patches plus every prompt token.
    std::vector<std::size_t> prompt_idx(prompt_tokens);
    for (std::size_t i = 0; i < prompt_tokens; ++i) prompt_idx[i] = n_patch + i;
    TensorT<S> space_out;
    TensorT<S> prompt_sum;
    for (std::size_t t = 0; t < t_frames; ++t) {
        std::vector<std::size_t> idx(s_patches);
        for (std::size_t s = 0; s < s_patches; ++s) idx[s] = t * s_patches + s;
        std::vector<std::size_t> full = idx;
        full.insert(full.end(), prompt_idx.begin(), prompt_idx.end());
        auto group = tape.gather_rows(z, full);
        auto out = multi_head_attention(tape, layer.space_attn, group, cfg.heads);
        auto patch_part = tape.slice_rows(out, 0, s_patches);
        auto placed = tape.scatter_rows(patch_part, idx, total);
        space_out = space_out.defined() ? tape.add(space_out, placed) : placed;
        if (prompt_tokens > 0) {
            auto prompt_part = tape.slice_rows(out, s_patches, prompt_tokens);
            prompt_sum = prompt_sum.defined() ? tape.add(prompt_sum, prompt_part) : prompt_part;
        }
    }
    if (prompt_tokens > 0) {
        auto prompt_mean = tape.scale(prompt_sum, 1.0 / static_cast<double>(t_frames));
        space_out = tape.add(space_out, tape.scatter_rows(prompt_mean, prompt_idx, total));
    }
    auto zp = tape.add(z, space_out);

    return tape.add(zp, token_mlp(tape, layer.mlp_w1, layer.mlp_b1, layer.mlp_w2, layer.mlp_b2, zp));
}

// ---- class embedding tables ---------------------------------------------------

template <typename S>
struct ClassEmbeddingTableT {
    Component component = Component::kVerb;
    bool frozen_template = false;  // true: hand-crafted source, never trained
    TensorT<S> embeddings;         // [N x d]
    std::vector<std::string> labels;
};

namespace detail {

/// Runs one token sequence through the text stack with per-layer prompt
/// injection. `prompt_blocks[k]` is the block appended before layer k; with
/// deep prompting off, layers past the first carry their transformed slots.
template <typename S>
TensorT<S> text_encode_sequence(TapeT<S>& tape, const FrozenEncoderT<S>& enc,
                                const std::vector<std::string>& words,
                                const std::vector<TensorT<S>>& prompt_blocks) {
    const EncoderConfig& cfg = enc.cfg;
    const std::size_t d = cfg.width;
    std::vector<S> main_rows((words.size() + 1) * d);
    for (std::size_t i = 0; i < words.size(); ++i) {
        auto emb = token_embedding<S>(words[i], enc.vocab_seed, d);
        auto pe = position_encoding<S>(i, d, kTextPeScale);
        for (std::size_t j = 0; j < d; ++j) main_rows[i * d + j] = static_cast<S>(emb[j] + pe[j]);
    }
    auto eos_pe = position_encoding<S>(words.size(), d, kTextPeScale);
    for (std::size_t j = 0; j < d; ++j)
        main_rows[words.size() * d + j] = static_cast<S>(enc.eos_embedding.value(j) + eos_pe[j]);

    const std::size_t n_main = words.size() + 1;
    auto state = tape.constant({n_main, d}, std::move(main_rows));
    TensorT<S> carried = prompt_blocks[0];
    for (std::size_t k = 0; k < cfg.depth; ++k) {
        const TensorT<S>& inject = (k == 0 || cfg.deep_prompting) ? prompt_blocks[k] : carried;
        auto seq = tape.concat_rows({state, inject});
        auto out = text_block(tape, enc.text_layers[k], seq, cfg.heads);
        state = tape.slice_rows(out, 0, n_main);
        carried = tape.slice_rows(out, n_main, cfg.text_prompt_len);
    }
    return tape.row(state, n_main - 1);  // end-of-sequence token embedding
}

}  // namespace detail

/// Learned class-embedding table W^c: every row is the EOS embedding of the
/// template-instantiated class name run with the set's per-layer prompts.
template <typename S>
ClassEmbeddingTableT<S> encode_text_classes(TapeT<S>& tape, const FrozenEncoderT<S>& enc,
                                            const ComponentPromptSetT<S>& prompts,
                                            const std::vector<std::string>& labels,
                                            const std::string& tmpl) {
    ClassEmbeddingTableT<S> table;
    table.component = prompts.component;
    table.frozen_template = false;
    table.labels = labels;
    std::vector<TensorT<S>> rows;
    rows.reserve(labels.size());
    for (const auto& label : labels) {
        auto words = tokenize_template(tmpl, label);
        rows.push_back(detail::text_encode_sequence(tape, enc, words, prompts.text_prompts));
    }
    table.embeddings = tape.concat_rows(rows);
    return table;
}

/// Frozen-template table W-hat^c: the same pipeline with all-zero prompt
/// blocks and no gradient tracking.
template <typename S>
ClassEmbeddingTableT<S> encode_handcrafted_classes(const FrozenEncoderT<S>& enc, Component component,
                                                   const std::vector<std::string>& labels,
                                                   const std::string& tmpl) {
    TapeT<S> local;
    std::vector<TensorT<S>> zero_blocks(
        enc.cfg.depth, TensorT<S>::zeros({enc.cfg.text_prompt_len, enc.cfg.width}));
    std::vector<S> flat;
    flat.reserve(labels.size() * enc.cfg.width);
    for (const auto& label : labels) {
        auto words = tokenize_template(tmpl, label);
        auto w = detail::text_encode_sequence(local, enc, words, zero_blocks);
        flat.insert(flat.end(), w.values().begin(), w.values().end());
    }
    ClassEmbeddingTableT<S> table;
    table.component = component;
    table.frozen_template = true;
    table.labels = labels;
    table.embeddings = TensorT<S>::make({labels.size(), enc.cfg.width}, std::move(flat));
    return table;
}

/// f_c: K divided space-time blocks over the clip tokens with per-layer video
/// prompts, then mean pooling over patch tokens and L2 normalization.
/// `tokens` is the flattened [T*S x d] clip (frame-major rows).
template <typename S>
TensorT<S> encode_video(TapeT<S>& tape, const FrozenEncoderT<S>& enc, const TensorT<S>& tokens,
                        const std::vector<TensorT<S>>& video_prompts) {
    const EncoderConfig& cfg = enc.cfg;
    const std::size_t n_patch = cfg.video_tokens();
    if (tokens.rank() != 2 || tokens.extent(0) != n_patch || tokens.extent(1) != cfg.width)
        throw DimensionError("encode_video: clip shape " + shape_str(tokens.shape()) +
                             " does not match config grid [" + std::to_string(n_patch) + "x" +
                             std::to_string(cfg.width) + "]");
    std::vector<S> pe(n_patch * cfg.width);
    for (std::size_t p = 0; p < n_patch; ++p) {
        auto row = position_encoding<S>(p, cfg.width, kVideoPeScale);
        std::copy(row.begin(), row.end(), pe.begin() + p * cfg.width);
    }
    auto state = tape.add(tokens, tape.constant({n_patch, cfg.width}, std::move(pe)));

    TensorT<S> carried = video_prompts[0];
    TensorT<S> full;
    for (std::size_t k = 0; k < cfg.depth; ++k) {
        const TensorT<S>& inject = (k == 0 || cfg.deep_prompting) ? video_prompts[k] : carried;
        auto seq = tape.concat_rows({state, inject});
        full = divided_spacetime_block(tape, enc.video_layers[k], seq, cfg, cfg.video_prompt_len);
        state = tape.slice_rows(full, 0, n_patch);
        carried = tape.slice_rows(full, n_patch, cfg.video_prompt_len);
    }
    return tape.l2_normalize(tape.mean_rows(state));
}

/// Component feature in one call: derives the video prompts from the text
/// prompts (gradients flow through the projection) and encodes the clip.
template <typename S>
TensorT<S> component_video_feature(TapeT<S>& tape, const FrozenEncoderT<S>& enc,
                                   const ComponentPromptSetT<S>& prompts, const TensorT<S>& tokens) {
    return encode_video(tape, enc, tokens, map_text_prompts_to_video(tape, prompts));
}

using FrozenEncoder = FrozenEncoderT<float>;
using ComponentPromptSet = ComponentPromptSetT<float>;
using ClassEmbeddingTable = ClassEmbeddingTableT<float>;

}  // namespace egoprompt
