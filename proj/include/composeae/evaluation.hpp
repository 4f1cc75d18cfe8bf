#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "checkpoint.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "model.hpp"

namespace composeae {

struct RetrievalReport {
    std::vector<std::size_t> ks;  // as requested
    std::vector<double> recall;   // one per k
    std::vector<std::size_t> first_correct_rank;  // 0-based; gallery_size when no correct entry exists
    std::size_t gallery_size = 0;
    std::size_t num_queries = 0;
    double elapsed_seconds = 0.0;
    bool k_clamped = false;  // some k exceeded the gallery size
    bool normalized = false;

    double recall_at(std::size_t k) const {
        for (std::size_t i = 0; i < ks.size(); ++i)
            if (ks[i] == k) return recall[i];
        throw ContractError("recall_at: k = " + std::to_string(k) + " was not evaluated");
    }
};

inline nlohmann::json to_json(const RetrievalReport& r) {
    nlohmann::json rec = nlohmann::json::object();
    for (std::size_t i = 0; i < r.ks.size(); ++i) rec["R@" + std::to_string(r.ks[i])] = r.recall[i];
    return {{"recall", rec},
            {"ks", r.ks},
            {"first_correct_rank", r.first_correct_rank},
            {"gallery_size", r.gallery_size},
            {"num_queries", r.num_queries},
            {"elapsed_seconds", r.elapsed_seconds},
            {"k_clamped", r.k_clamped},
            {"normalized", r.normalized}};
}

/// Dot product.
template <class T>
T similarity(std::span<const T> u, std::span<const T> v) {
    require(u.size() == v.size(), "similarity: lengths differ (" + std::to_string(u.size()) + " vs " +
                                      std::to_string(v.size()) + ")");
    T s{};
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
}

/// Gallery indices by descending similarity to `query`; ties go to the
/// lower index. `gallery` is (g x d) row-major.
template <class T>
std::vector<std::size_t> rank_gallery(std::span<const T> query, std::span<const T> gallery) {
    require(!query.empty(), "rank_gallery: empty query");
    require(!gallery.empty(), "rank_gallery: empty gallery");
    require(gallery.size() % query.size() == 0, "rank_gallery: gallery width does not match query length");
    const std::size_t d = query.size(), g = gallery.size() / d;
    std::vector<T> sims(g);
    for (std::size_t j = 0; j < g; ++j) sims[j] = similarity<T>(query, gallery.subspan(j * d, d));
    std::vector<std::size_t> order(g);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return sims[a] != sims[b] ? sims[a] > sims[b] : a < b;
    });
    return order;
}

namespace detail {
inline std::vector<float> l2_normalized_rows(std::span<const float> m, std::size_t d) {
    std::vector<float> out(m.begin(), m.end());
    for (std::size_t r = 0; r < out.size() / d; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(out[r * d + j]) * out[r * d + j];
        const double inv = s > 0.0 ? 1.0 / std::sqrt(s) : 0.0;
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = static_cast<float>(out[r * d + j] * inv);
    }
    return out;
}
}  // namespace detail

/// Recall@k of precomputed query embeddings (n x d) against the dataset's
/// gallery. A query counts as retrieved at k when any of its top-k entries
/// belongs to its target group. k larger than the gallery is clamped and
/// flagged in the report.
inline RetrievalReport recall_at_k(const Tensor<float>& embeddings, const FeatureDataset& ds,
                                   const std::vector<std::size_t>& ks, bool normalize = false) {
    const auto t0 = std::chrono::steady_clock::now();
    require(!ks.empty(), "recall_at_k: no k values");
    for (std::size_t i = 0; i < ks.size(); ++i) {
        require(ks[i] >= 1, "recall_at_k: k must be >= 1");
        require(i == 0 || ks[i] > ks[i - 1], "recall_at_k: ks must be ascending");
    }
    require(embeddings.shape.size() == 2 && embeddings.shape[0] == ds.n && embeddings.shape[1] == ds.d,
            "recall_at_k: embeddings must be (n x d) = " + to_string(Shape{ds.n, ds.d}) + ", got " +
                to_string(embeddings.shape));
    require(ds.g > 0, "recall_at_k: empty gallery");
    const std::size_t d = ds.d, g = ds.g;

    std::vector<float> queries = embeddings.data, gallery = ds.target.data;
    if (normalize) {
        queries = detail::l2_normalized_rows(queries, d);
        gallery = detail::l2_normalized_rows(gallery, d);
    }

    RetrievalReport rep;
    rep.ks = ks;
    rep.gallery_size = g;
    rep.num_queries = ds.n;
    rep.normalized = normalize;
    rep.first_correct_rank.assign(ds.n, g);
    std::vector<float> sims(g);
    for (std::size_t i = 0; i < ds.n; ++i) {
        std::span<const float> q(queries.data() + i * d, d);
        for (std::size_t j = 0; j < g; ++j) sims[j] = similarity<float>(q, std::span<const float>(gallery.data() + j * d, d));
        // Best-placed correct entry under (similarity desc, index asc).
        std::size_t best = g;
        for (std::size_t j = 0; j < g; ++j) {
            if (!ds.is_correct(i, j)) continue;
            if (best == g || sims[j] > sims[best]) best = j;
        }
        if (best == g) continue;
        std::size_t rank = 0;
        for (std::size_t j = 0; j < g; ++j)
            if (sims[j] > sims[best] || (sims[j] == sims[best] && j < best)) ++rank;
        rep.first_correct_rank[i] = rank;
    }
    for (std::size_t k : ks) {
        std::size_t kk = k;
        if (kk > g) {
            kk = g;
            rep.k_clamped = true;
        }
        std::size_t hits = 0;
        for (auto r : rep.first_correct_rank)
            if (r < kk) ++hits;
        rep.recall.push_back(static_cast<double>(hits) / static_cast<double>(ds.n));
    }
    rep.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

/// Composes every query with `model` and scores it against the full gallery.
template <class T>
RetrievalReport evaluate(Model<T>& model, const FeatureDataset& ds, const std::vector<std::size_t>& ks,
                         bool normalize = false) {
    const auto& c = model.config();
    if (c.d != ds.d || c.h != ds.h)
        throw ConfigError("model dims (d = " + std::to_string(c.d) + ", h = " + std::to_string(c.h) +
                          ") do not match dataset dims (d = " + std::to_string(ds.d) + ", h = " + std::to_string(ds.h) +
                          ")");
    const auto t0 = std::chrono::steady_clock::now();
    Tensor<float> emb;
    if constexpr (std::is_same_v<T, float>) {
        emb = compose_rows(model, ds.query, ds.text);
    } else {
        Tensor<T> z(ds.query.shape, std::vector<T>(ds.query.data.begin(), ds.query.data.end()));
        Tensor<T> q(ds.text.shape, std::vector<T>(ds.text.data.begin(), ds.text.data.end()));
        auto e = compose_rows(model, z, q);
        emb = Tensor<float>(e.shape, std::vector<float>(e.data.begin(), e.data.end()));
    }
    auto rep = recall_at_k(emb, ds, ks, normalize);
    rep.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

inline RetrievalReport evaluate(const Checkpoint& ck, const FeatureDataset& ds, const std::vector<std::size_t>& ks,
                                bool normalize = false) {
    auto model = model_from_checkpoint<float>(ck);
    return evaluate(model, ds, ks, normalize);
}

}  // namespace composeae
