#pragma once

// Feature datasets: the CRF1 on-disk format, the planted-rotation synthetic
// generator, and mini-batch sampling with negatives.
//
// CRF1 is a JSON manifest
//   {"version":"CRF1","n":..,"g":..,"d":..,"h":..,
//    "blobs":{"query":..,"text":..,"target":..},
//    "target_index":[..],"target_group":[..],"base_loss":"SMAX"|"ST" (optional)}
// plus three headerless little-endian float32 blobs, row-major, with paths
// relative to the manifest.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "losses.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace composeae {

inline constexpr std::int64_t kNoGroup = -1;

struct FeatureDataset {
    std::size_t n = 0, g = 0, d = 0, h = 0;
    Tensor<float> query;   // (n x d)
    Tensor<float> text;    // (n x h)
    Tensor<float> target;  // (g x d) gallery
    std::vector<std::size_t> target_index;
    std::vector<std::int64_t> target_group;
    std::optional<BaseLoss> base_loss;  // manifest hint

    /// Group of each gallery entry; kNoGroup for entries no sample points to.
    /// Filled by finalize().
    std::vector<std::int64_t> gallery_group;
    /// Number of gallery entries per group. Filled by finalize().
    std::map<std::int64_t, std::size_t> group_gallery_size;

    /// Checks every invariant and derives the gallery-side group tables.
    /// Throws FormatError.
    void finalize() {
        auto fail = [](const std::string& m) { throw FormatError(m); };
        if (n == 0 || g == 0 || d == 0 || h == 0) fail("dataset dimensions must be positive");
        if (query.shape != Shape{n, d}) fail("query features must be (n x d) = " + to_string(Shape{n, d}));
        if (text.shape != Shape{n, h}) fail("text features must be (n x h) = " + to_string(Shape{n, h}));
        if (target.shape != Shape{g, d}) fail("target features must be (g x d) = " + to_string(Shape{g, d}));
        if (query.data.size() != n * d || text.data.size() != n * h || target.data.size() != g * d)
            fail("feature array lengths do not match their shapes");
        if (target_index.size() != n) fail("target_index must have n = " + std::to_string(n) + " entries");
        if (target_group.size() != n) fail("target_group must have n = " + std::to_string(n) + " entries");
        if (!all_finite<float>(query.data)) fail("query features contain non-finite values");
        if (!all_finite<float>(text.data)) fail("text features contain non-finite values");
        if (!all_finite<float>(target.data)) fail("target features contain non-finite values");
        gallery_group.assign(g, kNoGroup);
        for (std::size_t i = 0; i < n; ++i) {
            if (target_index[i] >= g)
                fail("target_index[" + std::to_string(i) + "] = " + std::to_string(target_index[i]) +
                     " out of range [0, " + std::to_string(g) + ")");
            if (target_group[i] < 0)
                fail("target_group[" + std::to_string(i) + "] must be non-negative");
            auto& gg = gallery_group[target_index[i]];
            if (gg != kNoGroup && gg != target_group[i])
                fail("gallery entry " + std::to_string(target_index[i]) + " is the target of two different groups");
            gg = target_group[i];
        }
        group_gallery_size.clear();
        for (auto gg : gallery_group)
            if (gg != kNoGroup) ++group_gallery_size[gg];
    }

    /// True when gallery entry j is a correct target for sample i.
    bool is_correct(std::size_t sample, std::size_t gallery_entry) const {
        return gallery_group[gallery_entry] == target_group[sample];
    }

    friend bool operator==(const FeatureDataset& a, const FeatureDataset& b) {
        return a.n == b.n && a.g == b.g && a.d == b.d && a.h == b.h && a.query == b.query && a.text == b.text &&
               a.target == b.target && a.target_index == b.target_index && a.target_group == b.target_group &&
               a.base_loss == b.base_loss;
    }
};

// ---- CRF1 ------------------------------------------------------------------

namespace detail {

inline void write_f32_blob(const std::filesystem::path& path, const std::vector<float>& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
    std::vector<std::uint32_t> words(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::uint32_t w = std::bit_cast<std::uint32_t>(data[i]);
        if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
        words[i] = w;
    }
    out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
    if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

inline std::vector<float> read_f32_blob(const std::filesystem::path& path, const std::string& name,
                                        std::size_t rows, std::size_t cols, const char* rows_name,
                                        const char* cols_name) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("blob '" + name + "' not found at '" + path.string() + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::size_t expected = rows * cols * 4;
    if (bytes.size() != expected) {
        std::ostringstream msg;
        msg << "blob '" << name << "' (" << path.string() << ") holds " << bytes.size() << " bytes but manifest "
            << rows_name << " = " << rows << ", " << cols_name << " = " << cols << " requires " << expected
            << " bytes; blob length implies " << cols_name << " = "
            << (rows ? static_cast<double>(bytes.size()) / 4.0 / static_cast<double>(rows) : 0.0);
        throw FormatError(msg.str());
    }
    std::vector<float> out(rows * cols);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t w;
        std::memcpy(&w, bytes.data() + 4 * i, 4);
        if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
        out[i] = std::bit_cast<float>(w);
    }
    if (!all_finite<float>(out)) throw FormatError("blob '" + name + "' contains non-finite values");
    return out;
}

inline std::size_t json_size(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_number_unsigned())
        throw FormatError(std::string("manifest field '") + key + "' must be a non-negative integer");
    return j[key].get<std::size_t>();
}

}  // namespace detail

/// Writes `<dir>/<stem>.json` plus `<stem>.query.f32`, `<stem>.text.f32`,
/// `<stem>.target.f32` next to it. Returns the manifest path.
inline std::filesystem::path save_dataset(const FeatureDataset& ds, const std::filesystem::path& manifest_path) {
    namespace fs = std::filesystem;
    const fs::path dir = manifest_path.parent_path();
    if (!dir.empty()) fs::create_directories(dir);
    const std::string stem = manifest_path.stem().string();
    nlohmann::json m;
    m["version"] = "CRF1";
    m["n"] = ds.n;
    m["g"] = ds.g;
    m["d"] = ds.d;
    m["h"] = ds.h;
    m["blobs"] = {{"query", stem + ".query.f32"}, {"text", stem + ".text.f32"}, {"target", stem + ".target.f32"}};
    m["target_index"] = ds.target_index;
    m["target_group"] = ds.target_group;
    if (ds.base_loss) m["base_loss"] = to_string(*ds.base_loss);
    detail::write_f32_blob(dir / (stem + ".query.f32"), ds.query.data);
    detail::write_f32_blob(dir / (stem + ".text.f32"), ds.text.data);
    detail::write_f32_blob(dir / (stem + ".target.f32"), ds.target.data);
    std::ofstream out(manifest_path, std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + manifest_path.string() + "' for writing");
    out << m.dump(1) << "\n";
    return manifest_path;
}

/// Reads and fully validates a CRF1 dataset. Throws FormatError.
inline FeatureDataset load_dataset(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw FormatError("manifest not found: '" + manifest_path.string() + "'");
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest '" + manifest_path.string() + "' is not valid JSON: " + e.what());
    }
    if (!m.is_object() || !m.contains("version") || !m["version"].is_string())
        throw FormatError("manifest has no version field");
    if (m["version"] != "CRF1")
        throw UnsupportedVersionError("unsupported dataset version '" + m["version"].get<std::string>() + "'");

    FeatureDataset ds;
    ds.n = detail::json_size(m, "n");
    ds.g = detail::json_size(m, "g");
    ds.d = detail::json_size(m, "d");
    ds.h = detail::json_size(m, "h");
    if (!m.contains("blobs") || !m["blobs"].is_object()) throw FormatError("manifest field 'blobs' missing");
    const auto dir = manifest_path.parent_path();
    auto blob = [&](const char* key) {
        if (!m["blobs"].contains(key) || !m["blobs"][key].is_string())
            throw FormatError(std::string("manifest blobs.") + key + " missing");
        return dir / m["blobs"][key].get<std::string>();
    };
    ds.query = Tensor<float>({ds.n, ds.d}, detail::read_f32_blob(blob("query"), "query", ds.n, ds.d, "n", "d"));
    ds.text = Tensor<float>({ds.n, ds.h}, detail::read_f32_blob(blob("text"), "text", ds.n, ds.h, "n", "h"));
    ds.target = Tensor<float>({ds.g, ds.d}, detail::read_f32_blob(blob("target"), "target", ds.g, ds.d, "g", "d"));
    try {
        ds.target_index = m.at("target_index").get<std::vector<std::size_t>>();
        ds.target_group = m.at("target_group").get<std::vector<std::int64_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("manifest target_index/target_group malformed: ") + e.what());
    }
    if (m.contains("base_loss")) {
        try {
            ds.base_loss = parse_base_loss(m["base_loss"].get<std::string>());
        } catch (const std::exception& e) {
            throw FormatError(std::string("manifest base_loss: ") + e.what());
        }
    }
    ds.finalize();
    return ds;
}

// ---- synthetic planted-rotation data -----------------------------------------

struct SynthConfig {
    std::size_t n = 2000;       // training samples
    std::size_t g = 0;          // training gallery size; 0 means n
    std::size_t n_test = 0;     // held-out samples
    std::size_t g_test = 0;     // held-out gallery size; 0 means n_test
    std::size_t d = 64;
    std::size_t h = 32;
    std::size_t k_true = 32;
    double noise_sigma = 0.05;
    double text_noise = 0.1;    // std of the noise added to concept codes
    double max_angle = std::numbers::pi;
    std::size_t num_text_concepts = 8;
    std::uint64_t seed = 0;

    std::size_t gallery() const { return g ? g : n; }
    std::size_t gallery_test() const { return g_test ? g_test : n_test; }

    void validate() const {
        if (n == 0 || d == 0 || h == 0 || k_true == 0) throw ConfigError("synth: n, d, h, k_true must be positive");
        if (gallery() < n) throw ConfigError("synth.g must be at least synth.n");
        if (gallery_test() < n_test) throw ConfigError("synth.g_test must be at least synth.n_test");
        if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ConfigError("synth.noise_sigma must be >= 0");
        if (!(text_noise >= 0.0) || !std::isfinite(text_noise)) throw ConfigError("synth.text_noise must be >= 0");
        if (num_text_concepts < 1) throw ConfigError("synth.num_text_concepts must be >= 1");
        if (num_text_concepts > h) throw ConfigError("synth.num_text_concepts must not exceed h");
    }

    friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

/// The planted map: y = E^T (e^{j theta_c} (.) E z). E is (2k x d) with
/// orthonormal rows or columns, interleaved (re, im) per complex coordinate,
/// so E^T is its pseudo-inverse.
struct PlantedTruth {
    std::size_t d = 0, k = 0;
    std::vector<double> embed;                // (2k x d)
    std::vector<std::vector<double>> angles;  // per concept, length k
    std::vector<std::size_t> concept_of;      // per sample

    std::vector<double> apply(std::span<const float> z, std::size_t concept_id) const {
        std::vector<double> c(2 * k, 0.0);
        for (std::size_t r = 0; r < 2 * k; ++r)
            for (std::size_t j = 0; j < d; ++j) c[r] += embed[r * d + j] * z[j];
        for (std::size_t i = 0; i < k; ++i) {
            const double cs = std::cos(angles[concept_id][i]), sn = std::sin(angles[concept_id][i]);
            const double re = c[2 * i], im = c[2 * i + 1];
            c[2 * i] = cs * re - sn * im;
            c[2 * i + 1] = sn * re + cs * im;
        }
        std::vector<double> y(d, 0.0);
        for (std::size_t r = 0; r < 2 * k; ++r)
            for (std::size_t j = 0; j < d; ++j) y[j] += embed[r * d + j] * c[r];
        return y;
    }
};

struct SyntheticData {
    FeatureDataset train;
    FeatureDataset test;  // empty (n = 0) when n_test = 0
    PlantedTruth truth;
    std::vector<std::size_t> test_concept_of;
};

namespace detail {

/// Gaussian (rows x cols) matrix orthonormalised along its shorter side with
/// modified Gram-Schmidt.
inline std::vector<double> random_orthonormal(std::size_t rows, std::size_t cols, Rng& rng) {
    std::vector<double> m(rows * cols);
    for (auto& x : m) x = rng.normal();
    const bool by_rows = rows <= cols;
    const std::size_t count = by_rows ? rows : cols, len = by_rows ? cols : rows;
    auto at = [&](std::size_t v, std::size_t i) -> double& { return by_rows ? m[v * cols + i] : m[i * cols + v]; };
    for (std::size_t v = 0; v < count; ++v) {
        for (std::size_t u = 0; u < v; ++u) {
            double dot = 0.0;
            for (std::size_t i = 0; i < len; ++i) dot += at(u, i) * at(v, i);
            for (std::size_t i = 0; i < len; ++i) at(v, i) -= dot * at(u, i);
        }
        double norm = 0.0;
        for (std::size_t i = 0; i < len; ++i) norm += at(v, i) * at(v, i);
        norm = std::sqrt(norm);
        for (std::size_t i = 0; i < len; ++i) at(v, i) /= norm;
    }
    return m;
}

inline FeatureDataset make_split(const SynthConfig& cfg, const PlantedTruth& truth,
                                 const std::vector<std::vector<float>>& codes, std::size_t n, std::size_t g,
                                 Rng& rng, std::vector<std::size_t>& concept_of) {
    FeatureDataset ds;
    ds.n = n;
    ds.g = g;
    ds.d = cfg.d;
    ds.h = cfg.h;
    ds.query = Tensor<float>({n, cfg.d});
    ds.text = Tensor<float>({n, cfg.h});
    ds.target = Tensor<float>({g, cfg.d});
    ds.base_loss = BaseLoss::SMAX;
    concept_of.assign(n, 0);
    std::vector<float> z(cfg.d);
    // Samples first, then distractor gallery entries from unused queries.
    for (std::size_t i = 0; i < g; ++i) {
        for (auto& x : z) x = static_cast<float>(rng.normal());
        const std::size_t c = rng.below(cfg.num_text_concepts);
        const auto y = truth.apply(z, c);
        for (std::size_t j = 0; j < cfg.d; ++j)
            ds.target.data[i * cfg.d + j] = static_cast<float>(y[j] + cfg.noise_sigma * rng.normal());
        if (i < n) {
            std::copy(z.begin(), z.end(), ds.query.data.begin() + i * cfg.d);
            for (std::size_t j = 0; j < cfg.h; ++j)
                ds.text.data[i * cfg.h + j] = codes[c][j] + static_cast<float>(cfg.text_noise * rng.normal());
            concept_of[i] = c;
            ds.target_index.push_back(i);
            ds.target_group.push_back(static_cast<std::int64_t>(i));
        }
    }
    ds.finalize();
    return ds;
}

}  // namespace detail

/// Draws the planted map once from the seed, then the training split, then
/// the held-out split. Every sample owns its gallery entry and group.
inline SyntheticData gen_synthetic_split(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    SyntheticData out;
    auto& t = out.truth;
    t.d = cfg.d;
    t.k = cfg.k_true;
    t.embed = detail::random_orthonormal(2 * cfg.k_true, cfg.d, rng);
    t.angles.assign(cfg.num_text_concepts, std::vector<double>(cfg.k_true));
    for (auto& a : t.angles)
        for (auto& x : a) x = rng.uniform(-cfg.max_angle, cfg.max_angle);
    std::vector<std::vector<float>> codes(cfg.num_text_concepts, std::vector<float>(cfg.h, 0.0f));
    for (std::size_t c = 0; c < cfg.num_text_concepts; ++c) codes[c][c] = 1.0f;

    out.train = detail::make_split(cfg, t, codes, cfg.n, cfg.gallery(), rng, t.concept_of);
    if (cfg.n_test > 0)
        out.test = detail::make_split(cfg, t, codes, cfg.n_test, cfg.gallery_test(), rng, out.test_concept_of);
    return out;
}

inline FeatureDataset gen_synthetic(const SynthConfig& cfg) { return gen_synthetic_split(cfg).train; }

// ---- batches -------------------------------------------------------------------

struct Batch {
    std::vector<std::size_t> sample_indices;
    std::vector<std::vector<std::size_t>> negative_indices;  // (N x M) gallery indices

    friend bool operator==(const Batch&, const Batch&) = default;
};

/// M distinct gallery entries outside the sample's group, uniform over all
/// such choices.
inline std::vector<std::size_t> sample_negatives(const FeatureDataset& ds, std::size_t sample, std::size_t M,
                                                 Rng& rng) {
    const std::int64_t group = ds.target_group[sample];
    const auto it = ds.group_gallery_size.find(group);
    const std::size_t same = it == ds.group_gallery_size.end() ? 0 : it->second;
    const std::size_t valid = ds.g - same;
    if (valid < M)
        throw ConfigError("sample " + std::to_string(sample) + " has only " + std::to_string(valid) +
                          " valid negatives but M = " + std::to_string(M));
    std::vector<std::size_t> out;
    out.reserve(M);
    if (2 * valid >= ds.g) {
        while (out.size() < M) {
            const std::size_t j = rng.below(ds.g);
            if (ds.gallery_group[j] == group) continue;
            if (std::find(out.begin(), out.end(), j) != out.end()) continue;
            out.push_back(j);
        }
    } else {
        std::vector<std::size_t> pool;
        pool.reserve(valid);
        for (std::size_t j = 0; j < ds.g; ++j)
            if (ds.gallery_group[j] != group) pool.push_back(j);
        for (std::size_t m = 0; m < M; ++m) {
            const std::size_t pick = m + rng.below(pool.size() - m);
            std::swap(pool[m], pool[pick]);
            out.push_back(pool[m]);
        }
    }
    return out;
}

/// Batch over the given samples with M negatives each.
inline Batch make_batch(const FeatureDataset& ds, std::vector<std::size_t> samples, std::size_t M, Rng& rng) {
    Batch b;
    b.negative_indices.reserve(samples.size());
    for (std::size_t s : samples) {
        require(s < ds.n, "make_batch: sample index out of range");
        b.negative_indices.push_back(sample_negatives(ds, s, M, rng));
    }
    b.sample_indices = std::move(samples);
    return b;
}

/// N distinct samples drawn uniformly, each with M negatives.
inline Batch sample_batch(const FeatureDataset& ds, std::size_t N, std::size_t M, Rng& rng) {
    if (N == 0 || N > ds.n)
        throw ConfigError("batch size " + std::to_string(N) + " must lie in [1, n = " + std::to_string(ds.n) + "]");
    std::vector<std::size_t> idx(ds.n);
    for (std::size_t i = 0; i < ds.n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < N; ++i) std::swap(idx[i], idx[i + rng.below(ds.n - i)]);
    idx.resize(N);
    return make_batch(ds, std::move(idx), M, rng);
}

}  // namespace composeae
