#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "egoprompt/encoder.hpp"
#include "egoprompt/grad_check.hpp"

using namespace egoprompt;

namespace {

EncoderConfig tiny_cfg() {
    EncoderConfig cfg;
    cfg.depth = 2;
    cfg.width = 32;
    cfg.heads = 4;
    cfg.text_prompt_len = 4;
    cfg.video_prompt_len = 4;
    cfg.frames = 4;
    cfg.patches = 4;
    return cfg;
}

template <typename S>
VideoLayerT<S> zero_video_layer(std::size_t d) {
    VideoLayerT<S> layer;
    auto zero_attn = [&] {
        AttentionParamsT<S> a;
        a.wq = TensorT<S>::zeros({d, d});
        a.bq = TensorT<S>::zeros({d});
        a.wk = TensorT<S>::zeros({d, d});
        a.bk = TensorT<S>::zeros({d});
        a.wv = TensorT<S>::zeros({d, d});
        a.bv = TensorT<S>::zeros({d});
        a.wo = TensorT<S>::zeros({d, d});
        a.bo = TensorT<S>::zeros({d});
        return a;
    };
    layer.time_attn = zero_attn();
    layer.space_attn = zero_attn();
    layer.mlp_w1 = TensorT<S>::zeros({d, kMlpRatio * d});
    layer.mlp_b1 = TensorT<S>::zeros({kMlpRatio * d});
    layer.mlp_w2 = TensorT<S>::zeros({kMlpRatio * d, d});
    layer.mlp_b2 = TensorT<S>::zeros({d});
    return layer;
}

}  // namespace

TEST_CASE("frozen encoder init is deterministic and counted") {
    auto cfg = tiny_cfg();
    auto a = init_frozen_encoders<float>(7, cfg);
    auto b = init_frozen_encoders<float>(7, cfg);
    REQUIRE(a.checksum() == b.checksum());

    auto c = init_frozen_encoders<float>(8, cfg);
    REQUIRE(a.checksum() != c.checksum());

    // every base weight frozen
    a.for_each_param([](const std::string&, const Tensor& t) { REQUIRE(!t.requires_grad()); });

    // closed-form parameter count audited by enumeration
    REQUIRE(a.param_count() == frozen_param_count(cfg));
    EncoderConfig other = cfg;
    other.depth = 3;
    other.width = 16;
    other.heads = 2;
    auto e = init_frozen_encoders<float>(3, other);
    REQUIRE(e.param_count() == frozen_param_count(other));
}

TEST_CASE("divided block with zero weights is a pure residual") {
    auto cfg = tiny_cfg();
    auto layer = zero_video_layer<float>(cfg.width);
    Rng rng(5);
    auto e = Tensor::uniform({cfg.video_tokens() + cfg.video_prompt_len, cfg.width}, rng, -1, 1);
    Tape tape;
    auto out = divided_spacetime_block(tape, layer, e, cfg, cfg.video_prompt_len);
    for (std::size_t i = 0; i < e.size(); ++i) REQUIRE(out.value(i) == e.value(i));
}

TEST_CASE("token count mismatch raises a dimension error") {
    auto cfg = tiny_cfg();
    auto enc = init_frozen_encoders<float>(1, cfg);
    Rng rng(5);
    auto bad = Tensor::uniform({3, cfg.width}, rng, -1, 1);
    Tape tape;
    REQUIRE_THROWS_AS(divided_spacetime_block(tape, enc.video_layers[0], bad, cfg, cfg.video_prompt_len),
                      DimensionError);
}

TEST_CASE("T=1 temporal attention equals the single-token oracle") {
    EncoderConfig cfg = tiny_cfg();
    cfg.frames = 1;
    cfg.patches = 3;
    auto enc = init_frozen_encoders<float>(11, cfg);
    // keep only the temporal stage observable
    auto layer = zero_video_layer<float>(cfg.width);
    layer.time_attn = enc.video_layers[0].time_attn;

    Rng rng(13);
    auto e = Tensor::uniform({cfg.video_tokens() + cfg.video_prompt_len, cfg.width}, rng, -1, 1);
    Tape tape;
    auto z = divided_spacetime_block(tape, layer, e, cfg, cfg.video_prompt_len);

    const std::size_t d = cfg.width;
    const auto& p = layer.time_attn;
    for (std::size_t r = 0; r < cfg.video_tokens(); ++r) {
        // single-element softmax is 1, so the row reduces to wo(wv.e + bv) + bo
        std::vector<double> v(d);
        for (std::size_t j = 0; j < d; ++j) {
            double s = p.bv.value(j);
            for (std::size_t i = 0; i < d; ++i) s += e.value(r, i) * p.wv.value(i, j);
            v[j] = s;
        }
        for (std::size_t j = 0; j < d; ++j) {
            double s = p.bo.value(j);
            for (std::size_t i = 0; i < d; ++i) s += v[i] * p.wo.value(i, j);
            REQUIRE(std::fabs(z.value(r, j) - (e.value(r, j) + s)) < 1e-4);
        }
    }
    // prompt rows pass through the temporal stage unchanged
    for (std::size_t r = cfg.video_tokens(); r < cfg.video_tokens() + cfg.video_prompt_len; ++r)
        for (std::size_t j = 0; j < d; ++j) REQUIRE(z.value(r, j) == e.value(r, j));
}

TEST_CASE("frame permutation permutes temporal group outputs identically") {
    EncoderConfig cfg = tiny_cfg();
    cfg.frames = 2;
    cfg.patches = 2;
    auto enc = init_frozen_encoders<float>(17, cfg);
    const auto& layer = enc.video_layers[0];

    Rng rng(19);
    const std::size_t n = cfg.video_tokens() + cfg.video_prompt_len;
    auto e = Tensor::uniform({n, cfg.width}, rng, -1, 1);

    // swap frames 0 and 1 (rows 0..S-1 with rows S..2S-1)
    std::vector<float> swapped(e.values());
    for (std::size_t s = 0; s < cfg.patches; ++s)
        for (std::size_t j = 0; j < cfg.width; ++j)
            std::swap(swapped[(0 * cfg.patches + s) * cfg.width + j],
                      swapped[(1 * cfg.patches + s) * cfg.width + j]);
    auto e2 = Tensor::make({n, cfg.width}, swapped);

    Tape tape;
    auto out1 = divided_spacetime_block(tape, layer, e, cfg, cfg.video_prompt_len);
    auto out2 = divided_spacetime_block(tape, layer, e2, cfg, cfg.video_prompt_len);

    auto perm_row = [&](std::size_t r) {
        if (r >= cfg.video_tokens()) return r;
        const std::size_t t = r / cfg.patches, s = r % cfg.patches;
        return (1 - t) * cfg.patches + s;
    };
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < cfg.width; ++j)
            REQUIRE(std::fabs(out2.value(perm_row(r), j) - out1.value(r, j)) < 1e-6);
}

TEST_CASE("text class tables: determinism, prompt causality, shape") {
    auto cfg = tiny_cfg();
    auto enc = init_frozen_encoders<float>(23, cfg);
    auto prompts = init_component_prompts(enc, Component::kVerb, kVerbTemplate, 23);

    Tape tape;
    auto t1 = encode_text_classes(tape, enc, prompts, {"cut", "pour", "cut"}, kVerbTemplate);
    REQUIRE(t1.embeddings.extent(0) == 3);
    REQUIRE(t1.embeddings.extent(1) == cfg.width);
    for (std::size_t j = 0; j < cfg.width; ++j)
        REQUIRE(t1.embeddings.value(0, j) == t1.embeddings.value(2, j));

    // prompts causally affect the rows
    auto zero_set = prompts;
    zero_set.text_prompts.clear();
    for (std::size_t k = 0; k < cfg.depth; ++k)
        zero_set.text_prompts.push_back(Tensor::zeros({cfg.text_prompt_len, cfg.width}, true));
    auto t0 = encode_text_classes(tape, enc, zero_set, {"cut", "pour", "cut"}, kVerbTemplate);
    double diff = 0;
    for (std::size_t i = 0; i < t1.embeddings.size(); ++i)
        diff += std::fabs(t1.embeddings.value(i) - t0.embeddings.value(i));
    REQUIRE(diff > 1e-4);

    auto one = encode_text_classes(tape, enc, prompts, {"slice"}, kVerbTemplate);
    REQUIRE(one.embeddings.extent(0) == 1);

    REQUIRE_THROWS_AS(encode_text_classes(tape, enc, prompts, {"cut"}, "a video without placeholder"),
                      TemplateError);
}

TEST_CASE("handcrafted tables are deterministic and template-sensitive") {
    auto cfg = tiny_cfg();
    auto enc = init_frozen_encoders<float>(29, cfg);
    std::vector<std::string> labels = {"knife", "board", "bowl"};
    auto a = encode_handcrafted_classes(enc, Component::kNoun, labels, kNounTemplate);
    auto b = encode_handcrafted_classes(enc, Component::kNoun, labels, kNounTemplate);
    REQUIRE(a.frozen_template);
    REQUIRE(!a.embeddings.requires_grad());
    for (std::size_t i = 0; i < a.embeddings.size(); ++i)
        REQUIRE(a.embeddings.value(i) == b.embeddings.value(i));

    auto c = encode_handcrafted_classes(enc, Component::kNoun, labels, kVerbTemplate);
    for (std::size_t r = 0; r < labels.size(); ++r) {
        double diff = 0;
        for (std::size_t j = 0; j < cfg.width; ++j)
            diff += std::fabs(a.embeddings.value(r, j) - c.embeddings.value(r, j));
        REQUIRE(diff > 1e-6);
    }
}

TEST_CASE("learned table with zero prompts equals the frozen path exactly") {
    auto cfg = tiny_cfg();
    auto enc = init_frozen_encoders<float>(31, cfg);
    auto zero_set = init_component_prompts(enc, Component::kVerb, kVerbTemplate, 31);
    for (auto& p : zero_set.text_prompts) std::fill(p.values_mut().begin(), p.values_mut().end(), 0.0f);

    std::vector<std::string> labels = {"cut", "pour"};
    Tape tape;
    auto learned = encode_text_classes(tape, enc, zero_set, labels, kVerbTemplate);
    auto frozen = encode_handcrafted_classes(enc, Component::kVerb, labels, kVerbTemplate);
    for (std::size_t i = 0; i < learned.embeddings.size(); ++i)
        REQUIRE(learned.embeddings.value(i) == frozen.embeddings.value(i));
}

TEST_CASE("prompt-to-video mapping: zero, identity, gradient flow") {
    auto cfg = tiny_cfg();
    auto enc = init_frozen_encoders<float>(37, cfg);
    auto set = init_component_prompts(enc, Component::kVerb, kVerbTemplate, 37);

    // zero weights and biases -> zero video prompts
    for (std::size_t k = 0; k < cfg.depth; ++k) {
        std::fill(set.proj_weights[k].values_mut().begin(), set.proj_weights[k].values_mut().end(), 0.0f);
        std::fill(set.proj_biases[k].values_mut().begin(), set.proj_biases[k].values_mut().end(), 0.0f);
    }
    Tape tape;
    auto pv = map_text_prompts_to_video(tape, set);
    REQUIRE(pv.size() == cfg.depth);
    for (const auto& p : pv)
        for (std::size_t i = 0; i < p.size(); ++i) REQUIRE(p.value(i) == 0.0f);

    // identity projection with L_t == L_v reproduces the text prompts
    for (std::size_t k = 0; k < cfg.depth; ++k)
        for (std::size_t i = 0; i < cfg.width; ++i) set.proj_weights[k].values_mut()[i * cfg.width + i] = 1.0f;
    auto pv2 = map_text_prompts_to_video(tape, set);
    for (std::size_t k = 0; k < cfg.depth; ++k)
        for (std::size_t i = 0; i < pv2[k].size(); ++i)
            REQUIRE(std::fabs(pv2[k].value(i) - set.text_prompts[k].value(i)) < 1e-6);

    // gradient of a loss on p_v flows into p_t and the projection map
    EncoderConfig dcfg = cfg;
    auto denc = init_frozen_encoders<double>(41, dcfg);
    auto dset = init_component_prompts(denc, Component::kNoun, kNounTemplate, 41);
    Rng rng(43);
    auto rep = grad_check<double>(
        [&](TapeT<double>& t) {
            auto mapped = map_text_prompts_to_video(t, dset);
            std::vector<TensorT<double>> sums;
            for (auto& m : mapped) sums.push_back(t.sum(t.mul(m, m)));
            return sum_scalars(t, sums);
        },
        {{"p_t0", dset.text_prompts[0]},
         {"proj_w0", dset.proj_weights[0]},
         {"proj_b0", dset.proj_biases[0]},
         {"p_t1", dset.text_prompts[1]}},
        1e-3, 1e-3);
    INFO("max rel err " << rep.max_rel_err);
    REQUIRE(rep.pass);
}

TEST_CASE("video features: determinism, component sensitivity, unit norm") {
    auto cfg = tiny_cfg();
    auto enc = init_frozen_encoders<float>(47, cfg);
    auto verb = init_component_prompts(enc, Component::kVerb, kVerbTemplate, 47);
    auto noun = init_component_prompts(enc, Component::kNoun, kNounTemplate, 47);

    Rng rng(53);
    auto clip = Tensor::uniform({cfg.video_tokens(), cfg.width}, rng, -1, 1);

    Tape tape;
    auto f1 = component_video_feature(tape, enc, verb, clip);
    auto f2 = component_video_feature(tape, enc, verb, clip);
    for (std::size_t i = 0; i < f1.size(); ++i) REQUIRE(f1.value(i) == f2.value(i));

    auto fn = component_video_feature(tape, enc, noun, clip);
    double diff = 0;
    for (std::size_t i = 0; i < f1.size(); ++i) diff += std::fabs(f1.value(i) - fn.value(i));
    REQUIRE(diff > 1e-5);

    double norm = 0;
    for (std::size_t i = 0; i < f1.size(); ++i) norm += f1.value(i) * f1.value(i);
    REQUIRE(std::fabs(std::sqrt(norm) - 1.0) < 1e-6);
    REQUIRE(f1.all_finite());

    Tape t2;
    REQUIRE_THROWS_AS(encode_video(t2, enc, Tensor::zeros({5, cfg.width}), map_text_prompts_to_video(t2, verb)),
                      DimensionError);
}

TEST_CASE("deep prompting changes the computation") {
    auto cfg = tiny_cfg();
    auto enc_deep = init_frozen_encoders<float>(59, cfg);
    EncoderConfig shallow_cfg = cfg;
    shallow_cfg.deep_prompting = false;
    auto enc_shallow = init_frozen_encoders<float>(59, shallow_cfg);
    REQUIRE(enc_deep.checksum() == enc_shallow.checksum());

    auto prompts_deep = init_component_prompts(enc_deep, Component::kVerb, kVerbTemplate, 59);
    auto prompts_shallow = init_component_prompts(enc_shallow, Component::kVerb, kVerbTemplate, 59);

    Rng rng(61);
    auto clip = Tensor::uniform({cfg.video_tokens(), cfg.width}, rng, -1, 1);
    Tape tape;
    auto fd = component_video_feature(tape, enc_deep, prompts_deep, clip);
    auto fs = component_video_feature(tape, enc_shallow, prompts_shallow, clip);
    double diff = 0;
    for (std::size_t i = 0; i < fd.size(); ++i) diff += std::fabs(fd.value(i) - fs.value(i));
    REQUIRE(diff > 1e-6);

    Tape t3;
    auto td = encode_text_classes(t3, enc_deep, prompts_deep, {"cut"}, kVerbTemplate);
    auto ts = encode_text_classes(t3, enc_shallow, prompts_shallow, {"cut"}, kVerbTemplate);
    double tdiff = 0;
    for (std::size_t i = 0; i < td.embeddings.size(); ++i)
        tdiff += std::fabs(td.embeddings.value(i) - ts.embeddings.value(i));
    REQUIRE(tdiff > 1e-7);
}

TEST_CASE("gradients flow through the full video path into prompts") {
    EncoderConfig cfg;
    cfg.depth = 2;
    cfg.width = 8;
    cfg.heads = 2;
    cfg.text_prompt_len = 2;
    cfg.video_prompt_len = 2;
    cfg.frames = 2;
    cfg.patches = 2;
    auto enc = init_frozen_encoders<double>(67, cfg);
    auto set = init_component_prompts(enc, Component::kVerb, kVerbTemplate, 67);
    Rng rng(71);
    auto clip = TensorT<double>::uniform({cfg.video_tokens(), cfg.width}, rng, -1, 1);
    auto probe = TensorT<double>::uniform({cfg.width}, rng, -1, 1);

    auto rep = grad_check<double>(
        [&](TapeT<double>& t) { return t.dot(component_video_feature(t, enc, set, clip), probe); },
        {{"p_t0", set.text_prompts[0]},
         {"p_t1", set.text_prompts[1]},
         {"proj_w0", set.proj_weights[0]},
         {"proj_b1", set.proj_biases[1]}},
        1e-3, 1e-3);
    INFO("max rel err " << rep.max_rel_err);
    REQUIRE(rep.pass);
}
