#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "egoprompt/trainer.hpp"

using namespace egoprompt;

namespace {

RunConfig tiny_run_config() {
    RunConfig cfg;
    cfg.seed = 11;
    cfg.model.depth = 1;
    cfg.model.heads = 2;
    cfg.model.text_prompt_len = 2;
    cfg.model.video_prompt_len = 2;
    cfg.data.n_verbs = 3;
    cfg.data.n_nouns = 4;
    cfg.data.frames = 2;
    cfg.data.patches = 2;
    cfg.data.width = 16;
    cfg.data.samples_per_split = 24;
    cfg.data.novel_fraction = 0.25;
    cfg.train.batch_size = 6;
    cfg.train.epochs_stage1 = 2;
    cfg.train.epochs_stage2 = 2;
    cfg.train.warmup_epochs = 1;
    cfg.train.pool_size = 6;
    cfg.train.top_k = 2;
    cfg.loss.k_freq = 2;
    return cfg;
}

template <typename S>
std::vector<float> snapshot_params(const ModelStateT<S>& m, const std::string& prefix) {
    std::vector<float> out;
    m.for_each_param([&](const std::string& name, const TensorT<S>& t) {
        if (name.rfind(prefix, 0) == 0)
            out.insert(out.end(), t.values().begin(), t.values().end());
    });
    return out;
}

std::string temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

}  // namespace

TEST_CASE("adamw basics") {
    // zero gradient and zero weight decay leave parameters unchanged
    auto p = Tensor::make({3}, {1.0f, -2.0f, 3.0f}, true);
    AdamW opt({{"p", p}}, {1e-2, 0.9, 0.98, 0.0, 1e-8});
    opt.zero_grad();
    opt.step(1e-2);
    REQUIRE(p.values() == std::vector<float>{1.0f, -2.0f, 3.0f});

    // first-step magnitude is ~lr after bias correction
    auto q = Tensor::make({2}, {0.0f, 0.0f}, true);
    AdamW opt2({{"q", q}}, {1e-2, 0.9, 0.98, 0.0, 1e-8});
    q.grad_mut().assign(2, 0.0f);
    q.grad_mut()[0] = 0.7f;
    q.grad_mut()[1] = -1.3f;
    opt2.step(1e-2);
    REQUIRE(std::fabs(std::fabs(q.value(0)) - 1e-2) < 1e-6);
    REQUIRE(std::fabs(std::fabs(q.value(1)) - 1e-2) < 1e-6);
    REQUIRE(q.value(0) < 0);  // moves against the gradient
    REQUIRE(q.value(1) > 0);

    // identical runs produce bit-identical parameters
    auto run = [] {
        auto x = Tensor::make({4}, {0.5f, 0.5f, 0.5f, 0.5f}, true);
        AdamW o({{"x", x}}, {});
        for (int i = 0; i < 10; ++i) {
            x.grad_mut().assign(4, 0.0f);
            for (std::size_t j = 0; j < 4; ++j)
                x.grad_mut()[j] = static_cast<float>(0.1 * (j + 1) * (i % 3 == 0 ? 1 : -1));
            o.step(1e-3);
        }
        return x.values();
    };
    REQUIRE(run() == run());

    // non-finite gradients abort with the parameter named
    auto r = Tensor::make({2}, {0.0f, 0.0f}, true);
    AdamW opt3({{"bad_param", r}}, {});
    r.grad_mut().assign(2, 0.0f);
    r.grad_mut()[1] = std::numeric_limits<float>::quiet_NaN();
    try {
        opt3.step(1e-3);
        FAIL("expected UsageError");
    } catch (const UsageError& e) {
        REQUIRE(std::string(e.what()).find("bad_param") != std::string::npos);
    }
}

TEST_CASE("learning-rate schedule") {
    const double lr = 1e-4, floor = 2e-5;
    const std::uint64_t spe = 10, warmup = 2;
    REQUIRE(lr_at_step(0, spe, lr, floor, warmup) == floor);
    REQUIRE(lr_at_step(warmup * spe, spe, lr, floor, warmup) == lr);
    REQUIRE(std::fabs(lr_at_step(warmup * spe / 2, spe, lr, floor, warmup) - 6e-5) < 1e-18);
    // continuity at the warmup boundary
    const double before = lr_at_step(warmup * spe - 1, spe, lr, floor, warmup);
    const double at = lr_at_step(warmup * spe, spe, lr, floor, warmup);
    REQUIRE(std::fabs(at - before) <= lr - floor);  // one linear increment
    const double increment = (lr - floor) / static_cast<double>(warmup * spe);
    REQUIRE(std::fabs((at - before) - increment) / lr < 1e-12);
    // constant afterward
    REQUIRE(lr_at_step(warmup * spe + 57, spe, lr, floor, warmup) == lr);
}

TEST_CASE("stage 1 trains prompts only") {
    auto cfg = tiny_run_config();
    auto bench = make_benchmark(cfg.seed, cfg.data);
    auto model = init_model_state<float>(cfg);

    // zero epochs: identity on parameters
    {
        RunConfig zero = cfg;
        zero.train.epochs_stage1 = 0;
        zero.train.warmup_epochs = 0;
        auto m2 = init_model_state<float>(zero);
        const auto before = snapshot_params(m2, "");
        train_stage1(m2, bench, zero);
        REQUIRE(snapshot_params(m2, "") == before);
    }

    const auto base_checksum = model.encoder.checksum();
    const auto pool_before = snapshot_params(model, "pool.");
    std::ostringstream log;
    bool saw_step = false;
    auto result = train_stage1(model, bench, cfg, nullptr, [&](const StepDiag& d) {
        saw_step = true;
        REQUIRE(d.stage == 1);
        REQUIRE(d.group_grad_norms.at("frozen_base") == 0.0);
        REQUIRE(d.group_grad_norms.at("pool") == 0.0);
        REQUIRE(d.group_grad_norms.at("projector") == 0.0);
    });
    REQUIRE(saw_step);
    REQUIRE(result.steps == 2 * 4);  // 24 samples / batch 6 * 2 epochs
    REQUIRE(result.last_epoch_mean_loss < result.first_epoch_mean_loss);
    REQUIRE(model.encoder.checksum() == base_checksum);
    REQUIRE(snapshot_params(model, "pool.") == pool_before);
}

TEST_CASE("stage 2 trains the pool and projector only") {
    auto cfg = tiny_run_config();
    auto bench = make_benchmark(cfg.seed, cfg.data);
    auto model = init_model_state<float>(cfg);
    train_stage1(model, bench, cfg);

    const auto prompts_before = snapshot_params(model, "prompts.");
    const auto base_checksum = model.encoder.checksum();

    std::ostringstream log;
    auto result = train_stage2(model, bench, cfg, &log, [&](const StepDiag& d) {
        REQUIRE(d.stage == 2);
        REQUIRE(d.group_grad_norms.at("frozen_base") == 0.0);
        REQUIRE(d.group_grad_norms.at("prompts_verb") == 0.0);
        REQUIRE(d.group_grad_norms.at("prompts_noun") == 0.0);
    });
    REQUIRE(snapshot_params(model, "prompts.") == prompts_before);
    REQUIRE(model.encoder.checksum() == base_checksum);
    REQUIRE(result.last_epoch_mean_loss < result.first_epoch_mean_loss);

    // epoch log lines carry counters that sum to samples * k per component
    std::istringstream lines(log.str());
    std::string line;
    std::size_t epoch_lines = 0;
    while (std::getline(lines, line)) {
        auto j = Json::parse(line);
        if (!j.contains("counters")) continue;
        ++epoch_lines;
        for (const char* comp : {"verb", "noun"}) {
            std::uint64_t total = 0;
            for (auto n : j["counters"][comp]) total += n.get<std::uint64_t>();
            REQUIRE(total == 24 * cfg.train.top_k);
        }
        REQUIRE(j.contains("entropy_verb"));
        REQUIRE(j.contains("entropy_noun"));
    }
    REQUIRE(epoch_lines == cfg.train.epochs_stage2);
}

TEST_CASE("divergence aborts with a diagnosable error") {
    auto cfg = tiny_run_config();
    auto bench = make_benchmark(cfg.seed, cfg.data);
    auto model = init_model_state<float>(cfg);
    model.verb_prompts.text_prompts[0].values_mut()[0] = std::numeric_limits<float>::quiet_NaN();
    REQUIRE_THROWS_AS(train_stage1(model, bench, cfg), UsageError);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    auto cfg = tiny_run_config();
    auto bench = make_benchmark(cfg.seed, cfg.data);
    auto model = init_model_state<float>(cfg);
    train_stage1(model, bench, cfg);
    model.pool.counters[0][1] = 7;  // nontrivial counters round-trip too

    const std::string dir = temp_dir("egoprompt_ckpt_test");
    const std::string p1 = dir + "/a.ckpt";
    const std::string p2 = dir + "/b.ckpt";
    save_checkpoint(model, cfg, "stage1", p1);
    auto loaded = load_checkpoint<float>(p1);
    REQUIRE(loaded.stage == "stage1");
    REQUIRE(loaded.model.pool.counters[0][1] == 7);
    save_checkpoint(loaded.model, loaded.config, loaded.stage, p2);
    REQUIRE(read_file(p1) == read_file(p2));

    // prompts restored exactly into a stage-2 consumer
    REQUIRE(snapshot_params(loaded.model, "prompts.") == snapshot_params(model, "prompts."));
    REQUIRE(loaded.model.encoder.checksum() == model.encoder.checksum());

    // single-byte corruption is caught
    Rng rng(3);
    auto data = read_file(p1);
    for (int trial = 0; trial < 10; ++trial) {
        auto corrupted = data;
        const std::size_t pos = rng.uniform_index(corrupted.size());
        corrupted[pos] = static_cast<char>(corrupted[pos] ^ 0x20);
        if (corrupted[pos] == data[pos]) continue;
        const std::string pc = dir + "/corrupt.ckpt";
        {
            std::ofstream f(pc, std::ios::binary | std::ios::trunc);
            f.write(corrupted.data(), static_cast<std::streamsize>(corrupted.size()));
        }
        REQUIRE_THROWS_AS(load_checkpoint<float>(pc), Error);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("identical configs and seeds train bit-identically") {
    auto cfg = tiny_run_config();
    auto bench = make_benchmark(cfg.seed, cfg.data);

    auto run_once = [&]() {
        auto model = init_model_state<float>(cfg);
        std::ostringstream log;
        train_stage1(model, bench, cfg, &log);
        train_stage2(model, bench, cfg, &log);
        return std::pair{snapshot_params(model, ""), log.str()};
    };
    auto [params1, log1] = run_once();
    auto [params2, log2] = run_once();
    REQUIRE(params1 == params2);
    REQUIRE(log1 == log2);
}
