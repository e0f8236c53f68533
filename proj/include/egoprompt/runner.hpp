#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "egoprompt/eval.hpp"
#include "egoprompt/trainer.hpp"

#ifndef EGOPROMPT_BUILD_ID
#define EGOPROMPT_BUILD_ID "egoprompt-dev"
#endif

namespace egoprompt {

inline constexpr const char* kRunManifestFormat = "egoprompt.run_manifest";
inline constexpr int kRunManifestFormatVersion = 1;

inline std::size_t worker_thread_cap() {
    if (const char* env = std::getenv("EGOPROMPT_THREADS")) {
        const long n = std::strtol(env, nullptr, 10);
        if (n >= 1) return static_cast<std::size_t>(n);
    }
    return 1;
}

struct RunArtifacts {
    std::string out_dir;
    std::vector<std::string> checkpoints;
    std::string log_path, metrics_path, manifest_path;
    MetricsReport metrics;
    StageResult stage1, stage2;
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline Json output_entry(const std::string& name, const std::string& path) {
    Json o;
    o["name"] = name;
    o["path"] = path;
    o["bytes"] = std::filesystem::file_size(path);
    o["crc32"] = file_crc32(path);
    return o;
}

}  // namespace detail

/// Executes one training run into `out_dir`: checkpoints per stage (refreshed
/// at every epoch boundary so a divergence abort leaves the last good state),
/// a JSONL step log, metrics.csv, and an atomically written manifest naming
/// every output with its checksum.
inline RunArtifacts run_training(const RunConfig& cfg, const SyntheticBenchmark& bench,
                                 const std::string& out_dir, const std::string& dataset_path = "",
                                 const std::string& command = "train", const StepHook& hook = {}) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    RunArtifacts art;
    art.out_dir = out_dir;
    art.log_path = out_dir + "/train.log.jsonl";
    art.metrics_path = out_dir + "/metrics.csv";
    art.manifest_path = out_dir + "/manifest.json";

    const auto t0 = std::chrono::steady_clock::now();
    auto model = init_model_state<float>(cfg);

    std::ofstream log(art.log_path, std::ios::trunc);
    if (!log) throw LoadError("cannot open '" + art.log_path + "' for writing");

    Json timings;
    const Variant variant = cfg.train.variant;
    const bool runs_stage1 = variant == Variant::kTwoStage || variant == Variant::kStage1Only;
    const bool runs_stage2 = variant == Variant::kTwoStage || variant == Variant::kStage2Only;

    if (runs_stage1) {
        const auto ts = std::chrono::steady_clock::now();
        const std::string ckpt = out_dir + "/stage1.ckpt";
        art.stage1 = train_stage1(model, bench, cfg, &log, hook,
                                  [&](std::size_t) { save_checkpoint(model, cfg, "stage1", ckpt); });
        save_checkpoint(model, cfg, "stage1", ckpt);
        art.checkpoints.push_back(ckpt);
        timings["stage1_seconds"] = detail::seconds_since(ts);
    }
    if (runs_stage2) {
        const auto ts = std::chrono::steady_clock::now();
        const std::string ckpt = out_dir + "/stage2.ckpt";
        art.stage2 = train_stage2(model, bench, cfg, &log, hook,
                                  [&](std::size_t) { save_checkpoint(model, cfg, "stage2", ckpt); });
        save_checkpoint(model, cfg, "stage2", ckpt);
        art.checkpoints.push_back(ckpt);
        timings["stage2_seconds"] = detail::seconds_since(ts);
    }
    if (variant == Variant::kJoint) {
        const auto ts = std::chrono::steady_clock::now();
        const std::string ckpt = out_dir + "/joint.ckpt";
        art.stage1 = train_joint(model, bench, cfg, &log, hook,
                                 [&](std::size_t) { save_checkpoint(model, cfg, "joint", ckpt); });
        save_checkpoint(model, cfg, "joint", ckpt);
        art.checkpoints.push_back(ckpt);
        timings["joint_seconds"] = detail::seconds_since(ts);
    }
    log.close();

    const auto te = std::chrono::steady_clock::now();
    const EvalMode mode = variant == Variant::kStage1Only ? EvalMode::kStage1 : EvalMode::kStage2;
    art.metrics = evaluate_model(model, bench, mode, cfg);
    write_file_atomic(art.metrics_path, metrics_to_csv(art.metrics));
    timings["eval_seconds"] = detail::seconds_since(te);
    timings["total_seconds"] = detail::seconds_since(t0);

    Json manifest;
    manifest["format"] = kRunManifestFormat;
    manifest["format_version"] = kRunManifestFormatVersion;
    manifest["build_id"] = EGOPROMPT_BUILD_ID;
    manifest["command"] = command;
    manifest["seed"] = cfg.seed;
    manifest["config"] = run_config_to_json(cfg);
    manifest["eval_mode"] = eval_mode_name(mode);
    Json dataset;
    if (!dataset_path.empty()) {
        dataset["path"] = dataset_path;
        dataset["crc32"] = file_crc32(dataset_path);
    }
    dataset["content_crc32"] = benchmark_checksum(bench);
    manifest["dataset"] = dataset;
    Json outputs = Json::array();
    for (const auto& c : art.checkpoints)
        outputs.push_back(detail::output_entry(std::filesystem::path(c).filename().string(), c));
    outputs.push_back(detail::output_entry("train.log.jsonl", art.log_path));
    outputs.push_back(detail::output_entry("metrics.csv", art.metrics_path));
    manifest["outputs"] = outputs;
    manifest["timings"] = timings;
    manifest["status"] = "ok";
    write_file_atomic(art.manifest_path, manifest.dump(2) + "\n");
    return art;
}

/// Re-evaluates a checkpoint. Stage-2 scoring on a stage-1 checkpoint is a
/// mode mismatch.
inline MetricsReport evaluate_checkpoint(const std::string& ckpt_path, const SyntheticBenchmark& bench,
                                         EvalMode mode) {
    auto loaded = load_checkpoint<float>(ckpt_path);
    if (mode == EvalMode::kStage2 && loaded.stage == "stage1")
        throw UsageError("cannot evaluate a stage1 checkpoint in stage2 mode (pool and projector are "
                         "untrained); evaluate with --mode stage1");
    return evaluate_model(loaded.model, bench, mode, loaded.config);
}

// ---- medians, dispersion -------------------------------------------------------

inline double median_of(std::vector<double> v) {
    if (v.empty()) throw UsageError("median_of: empty sample");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return (v[(n - 1) / 2] + v[n / 2]) / 2.0;
}

inline double iqr_of(std::vector<double> v) {
    if (v.empty()) throw UsageError("iqr_of: empty sample");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return v[(3 * (n - 1)) / 4] - v[(n - 1) / 4];
}

// ---- ablation grid ----------------------------------------------------------------

struct AblationOptions {
    std::vector<Variant> variants = {Variant::kStage1Only, Variant::kStage2Only, Variant::kJoint,
                                     Variant::kTwoStage};
    bool sweep_lambdas = true;  // {0, base} x {0, base}
    bool sweep_deep_prompting = true;
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
};

struct AblationCell {
    Variant variant = Variant::kTwoStage;
    double lambda_freq = 1.0, lambda_orth = 1.0;
    bool deep_prompting = true;
    bool is_full_method = false;
    std::vector<MetricsReport> per_seed;

    std::string name() const {
        std::string n = variant_name(variant);
        n += lambda_freq > 0 ? "_lf1" : "_lf0";
        n += lambda_orth > 0 ? "_lo1" : "_lo0";
        n += deep_prompting ? "_deep" : "_shallow";
        return n;
    }
};

struct AblationReport {
    std::vector<AblationCell> cells;
    std::size_t seeds = 0;
    std::string csv;
    Json json;
};

namespace detail {

struct GridJob {
    std::size_t cell_index;
    std::size_t seed_index;
    RunConfig cfg;
};

/// Runs independent jobs across at most EGOPROMPT_THREADS workers. Results
/// land in caller-indexed slots, so scheduling cannot affect the output.
template <typename JobFn>
void run_jobs(std::size_t count, JobFn&& fn) {
    const std::size_t workers = std::min(worker_thread_cap(), std::max<std::size_t>(1, count));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr first_error;
    std::mutex err_mu;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

/// Variant x regularizer x deep-prompting grid over R seeds, each cell a full
/// run directory under `<out_dir>/cells/`. Reports per-cell seed medians,
/// IQRs, and win/loss against the full method on the cross-domain hm.
inline AblationReport run_ablation(const RunConfig& base_cfg, const SyntheticBenchmark& bench,
                                   const AblationOptions& opts, const std::string& out_dir) {
    if (opts.seeds.empty()) throw ConfigError("ablate.seeds: need at least one seed");
    AblationReport report;
    report.seeds = opts.seeds.size();

    std::vector<std::pair<double, double>> lambda_combos;
    if (opts.sweep_lambdas) {
        lambda_combos = {{0.0, 0.0},
                         {base_cfg.loss.lambda_freq, 0.0},
                         {0.0, base_cfg.loss.lambda_orth},
                         {base_cfg.loss.lambda_freq, base_cfg.loss.lambda_orth}};
    } else {
        lambda_combos = {{base_cfg.loss.lambda_freq, base_cfg.loss.lambda_orth}};
    }
    const std::vector<bool> deep_options =
        opts.sweep_deep_prompting ? std::vector<bool>{true, false} : std::vector<bool>{true};

    for (Variant v : opts.variants)
        for (auto [lf, lo] : lambda_combos)
            for (bool deep : deep_options) {
                AblationCell cell;
                cell.variant = v;
                cell.lambda_freq = lf;
                cell.lambda_orth = lo;
                cell.deep_prompting = deep;
                cell.is_full_method = v == Variant::kTwoStage && lf == base_cfg.loss.lambda_freq &&
                                      lo == base_cfg.loss.lambda_orth && deep;
                cell.per_seed.resize(opts.seeds.size());
                report.cells.push_back(std::move(cell));
            }

    std::vector<detail::GridJob> jobs;
    for (std::size_t c = 0; c < report.cells.size(); ++c)
        for (std::size_t s = 0; s < opts.seeds.size(); ++s) {
            RunConfig cfg = base_cfg;
            cfg.seed = opts.seeds[s];
            cfg.train.variant = report.cells[c].variant;
            cfg.loss.lambda_freq = report.cells[c].lambda_freq;
            cfg.loss.lambda_orth = report.cells[c].lambda_orth;
            cfg.model.deep_prompting = report.cells[c].deep_prompting;
            jobs.push_back({c, s, std::move(cfg)});
        }

    detail::run_jobs(jobs.size(), [&](std::size_t i) {
        const auto& job = jobs[i];
        const std::string dir = out_dir + "/cells/" + report.cells[job.cell_index].name() + "-s" +
                                std::to_string(opts.seeds[job.seed_index]);
        auto art = run_training(job.cfg, bench, dir, "", "ablate");
        report.cells[job.cell_index].per_seed[job.seed_index] = std::move(art.metrics);
    });

    // full-method reference medians on the cross-domain hm
    std::map<std::string, double> full_hm;
    for (const auto& cell : report.cells)
        if (cell.is_full_method)
            for (const char* comp : {"verb", "noun"}) {
                std::vector<double> hms;
                for (const auto& m : cell.per_seed) hms.push_back(m.hm_within_cross_avg.at(comp));
                full_hm[comp] = median_of(hms);
            }

    std::string csv =
        "variant,lambda_freq,lambda_orth,deep_prompting,component,split,metric,seeds,values,seed_median,"
        "iqr,vs_full\n";
    Json jrows = Json::array();
    for (const auto& cell : report.cells) {
        auto emit = [&](const char* comp, const char* split, const char* metric,
                        const std::vector<double>& values, bool compare_full) {
            std::string joined;
            for (std::size_t i = 0; i < values.size(); ++i)
                joined += (i ? ";" : "") + format_metric(values[i]);
            const double med = median_of(values);
            const double iqr = iqr_of(values);
            std::string vs = "";
            if (compare_full && full_hm.count(comp))
                vs = cell.is_full_method ? "full" : (med > full_hm.at(comp) ? "win" : "loss");
            csv += std::string(variant_name(cell.variant)) + "," + format_metric(cell.lambda_freq) + "," +
                   format_metric(cell.lambda_orth) + "," + (cell.deep_prompting ? "1" : "0") + "," + comp +
                   "," + split + "," + metric + "," + std::to_string(values.size()) + "," + joined + "," +
                   format_metric(med) + "," + format_metric(iqr) + "," + vs + "\n";
            Json row;
            row["variant"] = variant_name(cell.variant);
            row["lambda_freq"] = cell.lambda_freq;
            row["lambda_orth"] = cell.lambda_orth;
            row["deep_prompting"] = cell.deep_prompting;
            row["component"] = comp;
            row["split"] = split;
            row["metric"] = metric;
            row["seeds"] = values.size();
            row["values"] = values;
            row["seed_median"] = med;
            row["iqr"] = iqr;
            if (!vs.empty()) row["vs_full"] = vs;
            jrows.push_back(std::move(row));
        };
        for (const char* comp : {"verb", "noun"}) {
            for (const char* split : {"within", "cross"}) {
                std::vector<double> avg, cls;
                for (const auto& m : cell.per_seed) {
                    avg.push_back(m.cells.at(comp).at(split).average_accuracy);
                    cls.push_back(m.cells.at(comp).at(split).class_average_accuracy);
                }
                emit(comp, split, "average_accuracy", avg, false);
                emit(comp, split, "class_average_accuracy", cls, false);
            }
            std::vector<double> hms;
            for (const auto& m : cell.per_seed) hms.push_back(m.hm_within_cross_avg.at(comp));
            emit(comp, "within+cross", "hm_average_accuracy", hms, true);
        }
    }
    report.csv = csv;
    report.json["format"] = "egoprompt.ablation_report";
    report.json["seeds"] = opts.seeds;
    report.json["rows"] = jrows;

    std::filesystem::create_directories(out_dir);
    write_file_atomic(out_dir + "/report.csv", csv);
    write_file_atomic(out_dir + "/report.json", report.json.dump(2) + "\n");
    return report;
}

// ---- parameter sweeps ---------------------------------------------------------------

struct SweepResult {
    std::string axis;
    std::vector<double> values;
    // value index -> component -> per-seed cross-domain hm
    std::vector<std::map<std::string, std::vector<double>>> hm;
    std::string csv;
    Json json;
};

/// One two-stage run per (value, seed); axis in
/// {pool_size, lambda_freq, lambda_orth, k}.
inline SweepResult run_sweep(const RunConfig& base_cfg, const SyntheticBenchmark& bench,
                             const std::string& axis, const std::vector<double>& values,
                             const std::vector<std::uint64_t>& seeds, const std::string& out_dir) {
    if (values.empty()) throw ConfigError("sweep.values: need at least one value");
    if (seeds.empty()) throw ConfigError("sweep.seeds: need at least one seed");

    auto apply = [&](RunConfig& cfg, double value) {
        if (axis == "pool_size") {
            if (value < 1 || value != std::floor(value))
                throw ConfigError("sweep.pool_size: invalid value " + std::to_string(value));
            cfg.train.pool_size = static_cast<std::size_t>(value);
            cfg.train.top_k = std::min(cfg.train.top_k, cfg.train.pool_size);
            cfg.loss.k_freq = std::min(cfg.loss.k_freq, cfg.train.pool_size);
        } else if (axis == "lambda_freq") {
            if (value < 0) throw ConfigError("sweep.lambda_freq: invalid value " + std::to_string(value));
            cfg.loss.lambda_freq = value;
        } else if (axis == "lambda_orth") {
            if (value < 0) throw ConfigError("sweep.lambda_orth: invalid value " + std::to_string(value));
            cfg.loss.lambda_orth = value;
        } else if (axis == "k") {
            if (value < 1 || value != std::floor(value))
                throw ConfigError("sweep.k: invalid value " + std::to_string(value));
            cfg.train.top_k = static_cast<std::size_t>(value);
            cfg.loss.k_freq = cfg.train.top_k;
        } else {
            throw ConfigError("sweep.axis: unknown axis '" + axis + "'");
        }
        cfg.train.variant = Variant::kTwoStage;
        cfg.validate();
    };

    SweepResult result;
    result.axis = axis;
    result.values = values;
    result.hm.resize(values.size());
    for (auto& m : result.hm)
        for (const char* comp : {"verb", "noun"}) m[comp].resize(seeds.size());

    struct Job {
        std::size_t vi, si;
        RunConfig cfg;
    };
    std::vector<Job> jobs;
    for (std::size_t vi = 0; vi < values.size(); ++vi)
        for (std::size_t si = 0; si < seeds.size(); ++si) {
            RunConfig cfg = base_cfg;
            cfg.seed = seeds[si];
            apply(cfg, values[vi]);
            jobs.push_back({vi, si, std::move(cfg)});
        }
    detail::run_jobs(jobs.size(), [&](std::size_t i) {
        const auto& job = jobs[i];
        const std::string dir = out_dir + "/runs/" + axis + "-" + format_metric(values[job.vi]) + "-s" +
                                std::to_string(seeds[job.si]);
        auto art = run_training(job.cfg, bench, dir, "", "sweep");
        for (const char* comp : {"verb", "noun"})
            result.hm[job.vi][comp][job.si] = art.metrics.hm_within_cross_avg.at(comp);
    });

    std::string csv = "axis,value,component,metric,seeds,values,seed_median,iqr\n";
    Json jrows = Json::array();
    for (std::size_t vi = 0; vi < values.size(); ++vi)
        for (const char* comp : {"verb", "noun"}) {
            const auto& vals = result.hm[vi].at(comp);
            std::string joined;
            for (std::size_t i = 0; i < vals.size(); ++i) joined += (i ? ";" : "") + format_metric(vals[i]);
            csv += axis + "," + format_metric(values[vi]) + "," + comp + ",hm_average_accuracy," +
                   std::to_string(vals.size()) + "," + joined + "," + format_metric(median_of(vals)) + "," +
                   format_metric(iqr_of(vals)) + "\n";
            Json row;
            row["axis"] = axis;
            row["value"] = values[vi];
            row["component"] = comp;
            row["metric"] = "hm_average_accuracy";
            row["values"] = vals;
            row["seed_median"] = median_of(vals);
            row["iqr"] = iqr_of(vals);
            jrows.push_back(std::move(row));
        }
    result.csv = csv;
    result.json["format"] = "egoprompt.sweep_report";
    result.json["axis"] = axis;
    result.json["rows"] = jrows;

    std::filesystem::create_directories(out_dir);
    write_file_atomic(out_dir + "/report.csv", csv);
    write_file_atomic(out_dir + "/report.json", result.json.dump(2) + "\n");
    for (const char* comp : {"verb", "noun"}) {
        std::string dat;
        for (std::size_t vi = 0; vi < values.size(); ++vi)
            dat += format_metric(values[vi]) + " " + format_metric(median_of(result.hm[vi].at(comp))) + "\n";
        write_file_atomic(out_dir + "/sweep_" + axis + "_" + comp + ".dat", dat);
    }
    return result;
}

// ---- run aggregation ------------------------------------------------------------------

/// Collects every run directory (identified by manifest.json) under `dir`,
/// sorted by path. Throws when none exist.
inline Json aggregate_runs(const std::string& dir) {
    std::vector<std::string> manifests;
    if (std::filesystem::exists(dir))
        for (const auto& entry : std::filesystem::recursive_directory_iterator(dir))
            if (entry.is_regular_file() && entry.path().filename() == "manifest.json")
                manifests.push_back(entry.path().string());
    std::sort(manifests.begin(), manifests.end());
    if (manifests.empty()) throw Error("no runs found under '" + dir + "'");

    Json rows = Json::array();
    for (const auto& mp : manifests) {
        Json manifest = Json::parse(read_file(mp));
        const std::string run_dir = std::filesystem::path(mp).parent_path().string();
        const std::string metrics_path = run_dir + "/metrics.csv";
        if (!std::filesystem::exists(metrics_path)) continue;
        std::istringstream csv(read_file(metrics_path));
        std::string line;
        std::getline(csv, line);  // header
        while (std::getline(csv, line)) {
            if (line.empty()) continue;
            std::istringstream ls(line);
            std::string comp, split, metric, value;
            std::getline(ls, comp, ',');
            std::getline(ls, split, ',');
            std::getline(ls, metric, ',');
            std::getline(ls, value, ',');
            Json row;
            row["run"] = run_dir;
            row["seed"] = manifest["seed"];
            row["variant"] = manifest["config"]["train"]["variant"];
            row["component"] = comp;
            row["split"] = split;
            row["metric"] = metric;
            row["value"] = std::stod(value);
            rows.push_back(std::move(row));
        }
    }
    if (rows.empty()) throw Error("no runs found under '" + dir + "'");
    Json out;
    out["format"] = "egoprompt.aggregate_report";
    out["rows"] = rows;
    return out;
}

inline std::string aggregate_runs_csv(const Json& agg) {
    std::string csv = "run,seed,variant,component,split,metric,value\n";
    for (const auto& row : agg.at("rows"))
        csv += row["run"].get<std::string>() + "," + std::to_string(row["seed"].get<std::uint64_t>()) +
               "," + row["variant"].get<std::string>() + "," + row["component"].get<std::string>() + "," +
               row["split"].get<std::string>() + "," + row["metric"].get<std::string>() + "," +
               format_metric(row["value"].get<double>()) + "\n";
    return csv;
}

}  // namespace egoprompt
