#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "egoprompt/binfile.hpp"
#include "egoprompt/errors.hpp"
#include "egoprompt/rng.hpp"

namespace egoprompt {

inline constexpr const char* kDatasetFormat = "egoprompt.dataset";
inline constexpr int kDatasetFormatVersion = 1;

struct DomainShift {
    double noise_std_within = 0.1;
    double noise_std_cross = 0.2;
    double rotation_strength = 0.3;  // max Givens angle (radians) for the cross domain
};

struct BenchmarkSpec {
    std::size_t n_verbs = 8;
    std::size_t n_nouns = 12;
    std::vector<std::uint8_t> compat;  // n_verbs x n_nouns; empty selects the default pattern
    std::size_t samples_per_split = 512;
    std::size_t frames = 4;   // T
    std::size_t patches = 4;  // S
    std::size_t width = 32;   // d
    double clutter_ratio = 0.5;
    DomainShift domain_shift;
    double novel_fraction = 0.25;

    bool compat_at(std::size_t v, std::size_t n) const {
        if (compat.empty()) return (v + n) % 3 != 0;  // default: dense, structured, MI > 0
        return compat[v * n_nouns + n] != 0;
    }

    std::size_t hoi_patches() const {
        const auto clutter = static_cast<std::size_t>(std::llround(clutter_ratio * static_cast<double>(patches)));
        return patches > clutter ? patches - clutter : 1;
    }

    std::size_t tokens_per_clip() const { return frames * patches; }

    std::size_t novel_count(std::size_t n_labels) const {
        return static_cast<std::size_t>(std::floor(novel_fraction * static_cast<double>(n_labels)));
    }

    void validate() const {
        if (n_verbs < 1 || n_nouns < 1) throw SpecError("benchmark: label counts must be >= 1");
        if (frames < 1 || patches < 1 || width < 2) throw SpecError("benchmark: clip geometry too small");
        if (!compat.empty() && compat.size() != n_verbs * n_nouns)
            throw SpecError("benchmark: compat matrix size mismatch");
        if (clutter_ratio < 0.0 || clutter_ratio >= 1.0)
            throw SpecError("benchmark: clutter_ratio outside [0, 1)");
        if (novel_fraction < 0.0 || novel_fraction >= 1.0)
            throw SpecError("benchmark: novel_fraction outside [0, 1)");
        if (samples_per_split < 1) throw SpecError("benchmark: samples_per_split must be >= 1");
        for (std::size_t v = 0; v < n_verbs; ++v) {
            bool any = false;
            for (std::size_t n = 0; n < n_nouns && !any; ++n) any = compat_at(v, n);
            if (!any) throw SpecError("benchmark: verb " + std::to_string(v) + " has no compatible noun");
        }
        for (std::size_t n = 0; n < n_nouns; ++n) {
            bool any = false;
            for (std::size_t v = 0; v < n_verbs && !any; ++v) any = compat_at(v, n);
            if (!any) throw SpecError("benchmark: noun " + std::to_string(n) + " has no compatible verb");
        }
        // base-only training must still cover every base label
        const std::size_t nv = n_verbs - novel_count(n_verbs);
        const std::size_t nn = n_nouns - novel_count(n_nouns);
        if (nv < 1 || nn < 1) throw SpecError("benchmark: novel_fraction leaves no base labels");
        for (std::size_t v = 0; v < nv; ++v) {
            bool any = false;
            for (std::size_t n = 0; n < nn && !any; ++n) any = compat_at(v, n);
            if (!any)
                throw SpecError("benchmark: base verb " + std::to_string(v) +
                                " has no base-compatible noun");
        }
        for (std::size_t n = 0; n < nn; ++n) {
            bool any = false;
            for (std::size_t v = 0; v < nv && !any; ++v) any = compat_at(v, n);
            if (!any)
                throw SpecError("benchmark: base noun " + std::to_string(n) +
                                " has no base-compatible verb");
        }
    }
};

struct Sample {
    std::vector<float> tokens;  // frames*patches x width, row-major
    std::int32_t verb_label = 0;
    std::int32_t noun_label = 0;
    std::int32_t domain_id = 0;
};

struct Dataset {
    std::vector<Sample> samples;
    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
};

struct SyntheticBenchmark {
    BenchmarkSpec spec;
    std::uint64_t seed = 0;
    std::vector<std::string> verb_names, noun_names;
    std::vector<std::size_t> base_verbs, novel_verbs;  // global label ids
    std::vector<std::size_t> base_nouns, novel_nouns;
    Dataset train, within_test, cross_test, base_test, novel_test;

    const Dataset& split(const std::string& name) const {
        return const_cast<SyntheticBenchmark*>(this)->split_mut(name);
    }

    Dataset& split_mut(const std::string& name) {
        if (name == "train") return train;
        if (name == "within") return within_test;
        if (name == "cross") return cross_test;
        if (name == "base") return base_test;
        if (name == "novel") return novel_test;
        throw UsageError("unknown split '" + name + "'");
    }

    static const std::vector<std::string>& split_names() {
        static const std::vector<std::string> names = {"train", "within", "cross", "base", "novel"};
        return names;
    }
};

namespace detail {

struct LatentFactors {
    std::vector<std::vector<double>> noun_vecs;       // content written into HOI patches
    std::vector<std::vector<double>> verb_dirs;       // direction modulated over time
    std::vector<double> verb_mean, verb_freq, verb_phase;
    std::vector<std::vector<double>> background;      // shared clutter pool
    std::vector<std::pair<std::size_t, std::size_t>> rotation_pairs;
    std::vector<double> rotation_angles;
};

inline std::vector<double> unit_gaussian(Rng& rng, std::size_t d) {
    std::vector<double> v(d);
    double norm = 0;
    for (auto& x : v) {
        x = rng.gaussian();
        norm += x * x;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-9) {
        v[0] = 1.0;
        norm = 1.0;
    }
    for (auto& x : v) x /= norm;
    return v;
}

inline LatentFactors make_factors(std::uint64_t seed, const BenchmarkSpec& spec) {
    LatentFactors f;
    Rng root(seed);
    Rng rn = root.fork("noun_factors");
    for (std::size_t n = 0; n < spec.n_nouns; ++n) f.noun_vecs.push_back(unit_gaussian(rn, spec.width));
    Rng rv = root.fork("verb_factors");
    for (std::size_t v = 0; v < spec.n_verbs; ++v) {
        f.verb_dirs.push_back(unit_gaussian(rv, spec.width));
        const double centered =
            spec.n_verbs > 1 ? (static_cast<double>(v) / static_cast<double>(spec.n_verbs - 1)) - 0.5 : 0.0;
        f.verb_mean.push_back(0.6 * centered * 2.0);
        f.verb_freq.push_back(1.0 + static_cast<double>(v % std::max<std::size_t>(1, spec.frames / 2)));
        f.verb_phase.push_back(2.0 * 3.141592653589793 * static_cast<double>(v) /
                               static_cast<double>(spec.n_verbs));
    }
    Rng rb = root.fork("background");
    for (std::size_t b = 0; b < 32; ++b) f.background.push_back(unit_gaussian(rb, spec.width));

    // mild seeded rotation: two passes of disjoint Givens planes
    Rng rr = root.fork("rotation");
    const double strength = spec.domain_shift.rotation_strength;
    for (std::size_t off = 0; off < 2; ++off)
        for (std::size_t i = off; i + 1 < spec.width; i += 2) {
            f.rotation_pairs.emplace_back(i, i + 1);
            const double mag = rr.uniform(0.5 * strength, strength);
            f.rotation_angles.push_back(rr.uniform() < 0.5 ? mag : -mag);
        }
    return f;
}

inline void apply_rotation(const LatentFactors& f, std::vector<float>& tokens, std::size_t width) {
    for (std::size_t base = 0; base + width <= tokens.size(); base += width)
        for (std::size_t g = 0; g < f.rotation_pairs.size(); ++g) {
            const auto [i, j] = f.rotation_pairs[g];
            const double c = std::cos(f.rotation_angles[g]);
            const double s = std::sin(f.rotation_angles[g]);
            const double xi = tokens[base + i], xj = tokens[base + j];
            tokens[base + i] = static_cast<float>(c * xi - s * xj);
            tokens[base + j] = static_cast<float>(s * xi + c * xj);
        }
}

inline double verb_waveform(const LatentFactors& f, std::size_t verb, std::size_t t, std::size_t frames) {
    return f.verb_mean[verb] +
           std::sin(2.0 * 3.141592653589793 *
                    (f.verb_freq[verb] * static_cast<double>(t) / static_cast<double>(frames) +
                     f.verb_phase[verb]));
}

/// Clean (pre-noise, pre-rotation) clip for a label pair; the HOI block sits
/// at the first hoi_patches() spatial slots of every frame.
inline std::vector<float> clean_clip(const BenchmarkSpec& spec, const LatentFactors& f, std::size_t verb,
                                     std::size_t noun, Rng& rng) {
    const std::size_t d = spec.width;
    const std::size_t n_hoi = spec.hoi_patches();
    std::vector<float> tokens(spec.tokens_per_clip() * d, 0.0f);
    const double noun_jitter = 1.0 + rng.gaussian(0.0, 0.1);
    const double verb_jitter = 1.0 + rng.gaussian(0.0, 0.1);
    for (std::size_t t = 0; t < spec.frames; ++t) {
        const double w = verb_waveform(f, verb, t, spec.frames) * verb_jitter;
        for (std::size_t s = 0; s < spec.patches; ++s) {
            float* row = tokens.data() + (t * spec.patches + s) * d;
            if (s < n_hoi) {
                for (std::size_t j = 0; j < d; ++j)
                    row[j] = static_cast<float>(noun_jitter * f.noun_vecs[noun][j] +
                                                w * f.verb_dirs[verb][j]);
            }
        }
    }
    // clutter: per-slot picks from the shared background pool, constant in time
    for (std::size_t s = n_hoi; s < spec.patches; ++s) {
        const auto& bg = f.background[rng.uniform_index(f.background.size())];
        const double scale = 1.0 + rng.gaussian(0.0, 0.2);
        for (std::size_t t = 0; t < spec.frames; ++t) {
            float* row = tokens.data() + (t * spec.patches + s) * d;
            for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<float>(scale * bg[j]);
        }
    }
    return tokens;
}

inline std::vector<std::pair<std::size_t, std::size_t>> allowed_pairs(
    const BenchmarkSpec& spec, const std::vector<std::size_t>& verbs, const std::vector<std::size_t>& nouns) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (auto v : verbs)
        for (auto n : nouns)
            if (spec.compat_at(v, n)) pairs.emplace_back(v, n);
    return pairs;
}

inline Dataset make_split(const BenchmarkSpec& spec, const LatentFactors& factors,
                          const std::vector<std::pair<std::size_t, std::size_t>>& pairs, std::size_t count,
                          int domain, Rng rng) {
    if (pairs.empty()) return {};
    Dataset ds;
    ds.samples.reserve(count);
    const double noise =
        domain == 0 ? spec.domain_shift.noise_std_within : spec.domain_shift.noise_std_cross;
    for (std::size_t i = 0; i < count; ++i) {
        const auto [verb, noun] = pairs[rng.uniform_index(pairs.size())];
        Sample s;
        s.verb_label = static_cast<std::int32_t>(verb);
        s.noun_label = static_cast<std::int32_t>(noun);
        s.domain_id = domain;
        s.tokens = clean_clip(spec, factors, verb, noun, rng);
        if (noise > 0)
            for (auto& x : s.tokens) x = static_cast<float>(x + rng.gaussian(0.0, noise));
        if (domain == 1) apply_rotation(factors, s.tokens, spec.width);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace detail

inline SyntheticBenchmark make_benchmark(std::uint64_t seed, const BenchmarkSpec& spec) {
    spec.validate();
    SyntheticBenchmark bench;
    bench.spec = spec;
    bench.seed = seed;
    for (std::size_t v = 0; v < spec.n_verbs; ++v) bench.verb_names.push_back("verb" + std::to_string(v));
    for (std::size_t n = 0; n < spec.n_nouns; ++n) bench.noun_names.push_back("noun" + std::to_string(n));

    const std::size_t novel_v = spec.novel_count(spec.n_verbs);
    const std::size_t novel_n = spec.novel_count(spec.n_nouns);
    for (std::size_t v = 0; v < spec.n_verbs; ++v)
        (v < spec.n_verbs - novel_v ? bench.base_verbs : bench.novel_verbs).push_back(v);
    for (std::size_t n = 0; n < spec.n_nouns; ++n)
        (n < spec.n_nouns - novel_n ? bench.base_nouns : bench.novel_nouns).push_back(n);

    auto factors = detail::make_factors(seed, spec);
    const auto base_pairs = detail::allowed_pairs(spec, bench.base_verbs, bench.base_nouns);
    const auto novel_pairs = detail::allowed_pairs(spec, bench.novel_verbs, bench.novel_nouns);
    if (base_pairs.empty()) throw SpecError("benchmark: no compatible base label pairs");

    Rng root(seed);
    const std::size_t n = spec.samples_per_split;
    bench.train = detail::make_split(spec, factors, base_pairs, n, 0, root.fork("split_train"));
    bench.within_test = detail::make_split(spec, factors, base_pairs, n, 0, root.fork("split_within"));
    bench.cross_test = detail::make_split(spec, factors, base_pairs, n, 1, root.fork("split_cross"));
    bench.base_test = detail::make_split(spec, factors, base_pairs, n, 1, root.fork("split_base"));
    bench.novel_test = detail::make_split(spec, factors, novel_pairs, novel_pairs.empty() ? 0 : n, 1,
                                          root.fork("split_novel"));
    return bench;
}

/// Seeded shuffle without replacement; the last partial batch is kept.
inline std::vector<std::vector<std::size_t>> sample_batches(std::size_t dataset_size,
                                                            std::size_t batch_size,
                                                            std::uint64_t epoch_seed) {
    if (dataset_size == 0) throw UsageError("sample_batches: empty dataset");
    if (batch_size == 0 || batch_size > dataset_size)
        throw UsageError("sample_batches: batch size " + std::to_string(batch_size) +
                         " outside [1, " + std::to_string(dataset_size) + "]");
    std::vector<std::size_t> order(dataset_size);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(epoch_seed);
    for (std::size_t i = dataset_size - 1; i > 0; --i) {
        const std::size_t j = rng.uniform_index(i + 1);
        std::swap(order[i], order[j]);
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < dataset_size; start += batch_size) {
        const std::size_t end = std::min(dataset_size, start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

// ---- spec <-> json, dataset file io -----------------------------------------

inline Json benchmark_spec_to_json(const BenchmarkSpec& s) {
    Json j;
    j["n_verbs"] = s.n_verbs;
    j["n_nouns"] = s.n_nouns;
    if (!s.compat.empty()) j["compat"] = s.compat;
    j["samples_per_split"] = s.samples_per_split;
    j["frames"] = s.frames;
    j["patches"] = s.patches;
    j["width"] = s.width;
    j["clutter_ratio"] = s.clutter_ratio;
    j["noise_std_within"] = s.domain_shift.noise_std_within;
    j["noise_std_cross"] = s.domain_shift.noise_std_cross;
    j["rotation_strength"] = s.domain_shift.rotation_strength;
    j["novel_fraction"] = s.novel_fraction;
    return j;
}

inline BenchmarkSpec benchmark_spec_from_json(const Json& j) {
    BenchmarkSpec s;
    s.n_verbs = j.at("n_verbs").get<std::size_t>();
    s.n_nouns = j.at("n_nouns").get<std::size_t>();
    if (j.contains("compat")) s.compat = j.at("compat").get<std::vector<std::uint8_t>>();
    s.samples_per_split = j.at("samples_per_split").get<std::size_t>();
    s.frames = j.at("frames").get<std::size_t>();
    s.patches = j.at("patches").get<std::size_t>();
    s.width = j.at("width").get<std::size_t>();
    s.clutter_ratio = j.at("clutter_ratio").get<double>();
    s.domain_shift.noise_std_within = j.at("noise_std_within").get<double>();
    s.domain_shift.noise_std_cross = j.at("noise_std_cross").get<double>();
    s.domain_shift.rotation_strength = j.at("rotation_strength").get<double>();
    s.novel_fraction = j.at("novel_fraction").get<double>();
    return s;
}

inline void export_dataset(const SyntheticBenchmark& bench, const std::string& path) {
    Json manifest;
    manifest["format"] = kDatasetFormat;
    manifest["format_version"] = kDatasetFormatVersion;
    manifest["seed"] = bench.seed;
    manifest["spec"] = benchmark_spec_to_json(bench.spec);
    manifest["verb_names"] = bench.verb_names;
    manifest["noun_names"] = bench.noun_names;
    manifest["base_verbs"] = bench.base_verbs;
    manifest["novel_verbs"] = bench.novel_verbs;
    manifest["base_nouns"] = bench.base_nouns;
    manifest["novel_nouns"] = bench.novel_nouns;
    Json sizes;
    for (const auto& name : SyntheticBenchmark::split_names()) sizes[name] = bench.split(name).size();
    manifest["split_sizes"] = sizes;

    BinFileWriter w(std::move(manifest));
    const std::size_t dim = bench.spec.tokens_per_clip() * bench.spec.width;
    for (const auto& name : SyntheticBenchmark::split_names()) {
        const Dataset& ds = bench.split(name);
        std::vector<float> tokens;
        tokens.reserve(ds.size() * dim);
        std::vector<std::int32_t> verbs, nouns, domains;
        for (const auto& s : ds.samples) {
            tokens.insert(tokens.end(), s.tokens.begin(), s.tokens.end());
            verbs.push_back(s.verb_label);
            nouns.push_back(s.noun_label);
            domains.push_back(s.domain_id);
        }
        w.add_f32(name + ".tokens", {ds.size(), dim}, tokens.data(), tokens.size());
        w.add_i32(name + ".verb", {ds.size()}, verbs.data(), verbs.size());
        w.add_i32(name + ".noun", {ds.size()}, nouns.data(), nouns.size());
        w.add_i32(name + ".domain", {ds.size()}, domains.data(), domains.size());
    }
    w.write(path);
}

inline SyntheticBenchmark import_dataset(const std::string& path) {
    BinFileReader r(path);
    const Json& m = r.manifest();
    if (!m.contains("format") || m["format"].get<std::string>() != kDatasetFormat)
        throw LoadError("'" + path + "' is not a dataset file");
    if (m["format_version"].get<int>() != kDatasetFormatVersion)
        throw LoadError("'" + path + "' has dataset format version " +
                        std::to_string(m["format_version"].get<int>()) + ", expected " +
                        std::to_string(kDatasetFormatVersion));
    SyntheticBenchmark bench;
    bench.seed = m.at("seed").get<std::uint64_t>();
    bench.spec = benchmark_spec_from_json(m.at("spec"));
    bench.verb_names = m.at("verb_names").get<std::vector<std::string>>();
    bench.noun_names = m.at("noun_names").get<std::vector<std::string>>();
    bench.base_verbs = m.at("base_verbs").get<std::vector<std::size_t>>();
    bench.novel_verbs = m.at("novel_verbs").get<std::vector<std::size_t>>();
    bench.base_nouns = m.at("base_nouns").get<std::vector<std::size_t>>();
    bench.novel_nouns = m.at("novel_nouns").get<std::vector<std::size_t>>();

    const std::size_t dim = bench.spec.tokens_per_clip() * bench.spec.width;
    for (const auto& name : SyntheticBenchmark::split_names()) {
        const auto shape = r.section_shape(name + ".tokens");
        if (shape.size() != 2 || shape[1] != dim)
            throw DimensionError("'" + path + "' split '" + name + "' token width " +
                                 std::to_string(shape.size() == 2 ? shape[1] : 0) +
                                 " does not match the manifest clip geometry " + std::to_string(dim));
        auto tokens = r.read_f32(name + ".tokens");
        auto verbs = r.read_i32(name + ".verb");
        auto nouns = r.read_i32(name + ".noun");
        auto domains = r.read_i32(name + ".domain");
        Dataset ds;
        ds.samples.resize(shape[0]);
        for (std::size_t i = 0; i < shape[0]; ++i) {
            ds.samples[i].tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(i * dim),
                                        tokens.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
            ds.samples[i].verb_label = verbs[i];
            ds.samples[i].noun_label = nouns[i];
            ds.samples[i].domain_id = domains[i];
        }
        bench.split_mut(name) = std::move(ds);
    }
    return bench;
}

/// Content hash over every split's tokens and labels.
inline std::uint32_t benchmark_checksum(const SyntheticBenchmark& bench) {
    std::uint32_t crc = 0;
    for (const auto& name : SyntheticBenchmark::split_names()) {
        for (const auto& s : bench.split(name).samples) {
            crc = crc32(s.tokens.data(), s.tokens.size() * sizeof(float), crc);
            crc = crc32(&s.verb_label, sizeof(s.verb_label), crc);
            crc = crc32(&s.noun_label, sizeof(s.noun_label), crc);
            crc = crc32(&s.domain_id, sizeof(s.domain_id), crc);
        }
    }
    return crc;
}

}  // namespace egoprompt
