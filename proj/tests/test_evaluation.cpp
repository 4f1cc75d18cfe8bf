#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include <composeae/composeae.hpp>

#include "test_util.hpp"

using namespace composeae;
using testutil::normal_vec;
using V = std::vector<double>;

namespace {

// Sorts (−similarity, index) pairs; written independently of rank_gallery.
std::vector<std::size_t> naive_rank(const V& q, const V& gallery) {
    const std::size_t d = q.size(), g = gallery.size() / d;
    std::vector<std::pair<double, std::size_t>> keyed;
    for (std::size_t j = 0; j < g; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < d; ++t) s += q[t] * gallery[j * d + t];
        keyed.push_back({-s, j});
    }
    std::sort(keyed.begin(), keyed.end());
    std::vector<std::size_t> out;
    for (auto& [s, j] : keyed) out.push_back(j);
    return out;
}

// n queries, each with its own single-entry target group.
FeatureDataset single_target(std::size_t n, std::size_t g, std::size_t d, Rng& rng) {
    FeatureDataset ds;
    ds.n = n;
    ds.g = g;
    ds.d = d;
    ds.h = 1;
    ds.query = Tensor<float>({n, d}, testutil::normal_vec_f(n * d, rng));
    ds.text = Tensor<float>({n, 1}, std::vector<float>(n, 0.0f));
    ds.target = Tensor<float>({g, d}, testutil::normal_vec_f(g * d, rng));
    for (std::size_t i = 0; i < n; ++i) {
        ds.target_index.push_back(i % g);
        ds.target_group.push_back(static_cast<std::int64_t>(i % g));
    }
    ds.finalize();
    return ds;
}

}  // namespace

TEST(Similarity, DotProduct) {
    EXPECT_EQ(similarity<double>(V{1, 0}, V{0, 1}), 0.0);
    EXPECT_EQ(similarity<double>(V{1, 2}, V{3, -1}), 1.0);
    EXPECT_THROW(similarity<double>(V{1, 2}, V{1}), ContractError);
}

TEST(Ranking, SelfMatchFirst) {
    const V gallery{0.1, 0.2, 3.0, 4.0, -1.0, 0.5};
    EXPECT_EQ(rank_gallery<double>(V{3.0, 4.0}, gallery)[0], 1u);
}

TEST(Ranking, TiesGoToLowerIndex) {
    const V gallery{1, 1, 0, 0, 1, 1, 1, 1};
    EXPECT_EQ(rank_gallery<double>(V{1, 1}, gallery), (std::vector<std::size_t>{0, 2, 3, 1}));
}

TEST(Ranking, MatchesNaiveSort) {
    Rng rng(1);
    const V gallery = normal_vec(200 * 6, rng);
    for (int i = 0; i < 50; ++i) {
        const V q = normal_vec(6, rng);
        EXPECT_EQ(rank_gallery<double>(q, gallery), naive_rank(q, gallery));
    }
    // Coarse values force many ties.
    V coarse(200 * 3);
    for (auto& x : coarse) x = static_cast<double>(rng.below(3));
    for (int i = 0; i < 20; ++i) {
        const V q{static_cast<double>(rng.below(2)), 1.0, static_cast<double>(rng.below(2))};
        EXPECT_EQ(rank_gallery<double>(q, coarse), naive_rank(q, coarse));
    }
}

TEST(Ranking, InvariantToPositiveGalleryScale) {
    Rng rng(2);
    for (int i = 0; i < 50; ++i) {
        const V q = normal_vec(5, rng);
        V gallery = normal_vec(40 * 5, rng);
        const auto before = rank_gallery<double>(q, gallery);
        const double c = std::exp(rng.normal());
        for (auto& x : gallery) x *= c;
        EXPECT_EQ(rank_gallery<double>(q, gallery), before);
    }
}

TEST(Ranking, EmptyGalleryRejected) {
    EXPECT_THROW(rank_gallery<double>(V{1.0}, V{}), ContractError);
}

TEST(Recall, KAtLeastGalleryIsOneAndClamped) {
    Rng rng(3);
    const auto ds = single_target(12, 6, 4, rng);
    const auto rep = recall_at_k(ds.query, ds, {1, 6, 50});
    EXPECT_EQ(rep.recall[1], 1.0);
    EXPECT_EQ(rep.recall[2], 1.0);
    EXPECT_TRUE(rep.k_clamped);
    EXPECT_FALSE(recall_at_k(ds.query, ds, {1, 6}).k_clamped);
}

TEST(Recall, NonDecreasingInK) {
    Rng rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        const auto ds = single_target(20, 15, 3, rng);
        const auto rep = recall_at_k(ds.query, ds, {1, 2, 3, 5, 8, 13, 21});
        for (std::size_t i = 0; i < rep.recall.size(); ++i) {
            EXPECT_GE(rep.recall[i], 0.0);
            EXPECT_LE(rep.recall[i], 1.0);
            if (i) {
                EXPECT_GE(rep.recall[i], rep.recall[i - 1]);
            }
        }
    }
}

TEST(Recall, AnyMemberOfTheGroupCounts) {
    FeatureDataset ds;
    ds.n = 1;
    ds.g = 3;
    ds.d = 2;
    ds.h = 1;
    ds.query = Tensor<float>({1, 2}, {1.0f, 0.0f});
    ds.text = Tensor<float>({1, 1}, {0.0f});
    // Entry 2 shares the query's group and ranks first.
    ds.target = Tensor<float>({3, 2}, {0.0f, 1.0f, 0.5f, 0.0f, 2.0f, 0.0f});
    ds.target_index = {0};
    ds.target_group = {7};
    ds.finalize();
    ds.gallery_group[2] = 7;
    const auto rep = recall_at_k(ds.query, ds, {1});
    EXPECT_EQ(rep.recall[0], 1.0);
    EXPECT_EQ(rep.first_correct_rank[0], 0u);
}

TEST(Recall, RandomEmbeddingsSitAtChance) {
    Rng rng(5);
    const std::size_t n = 100, g = 200, k = 10, trials = 50;
    std::vector<double> r;
    for (std::size_t t = 0; t < trials; ++t) {
        const auto ds = single_target(n, g, 8, rng);
        Tensor<float> emb({n, 8}, testutil::normal_vec_f(n * 8, rng));
        r.push_back(recall_at_k(emb, ds, {k}).recall[0]);
    }
    const double p = double(k) / g, mean = summarize(r).mean;
    const double se = std::sqrt(p * (1 - p) / (double(n) * trials));
    EXPECT_NEAR(mean, p, 3 * se);
}

TEST(Recall, InvalidKs) {
    Rng rng(6);
    const auto ds = single_target(4, 4, 2, rng);
    EXPECT_THROW(recall_at_k(ds.query, ds, {}), ContractError);
    EXPECT_THROW(recall_at_k(ds.query, ds, {5, 1}), ContractError);
    EXPECT_THROW(recall_at_k(ds.query, ds, {0}), ContractError);
}

TEST(Recall, NormalizationFlag) {
    Rng rng(7);
    auto ds = single_target(10, 10, 4, rng);
    const auto plain = recall_at_k(ds.query, ds, {1}, false);
    const auto norm = recall_at_k(ds.query, ds, {1}, true);
    EXPECT_FALSE(plain.normalized);
    EXPECT_TRUE(norm.normalized);
    // Under normalization each query's own direction is its best match.
    for (std::size_t i = 0; i < ds.n; ++i)
        for (std::size_t j = 0; j < ds.d; ++j) ds.target.data[i * ds.d + j] = ds.query.data[i * ds.d + j] * (1.0f + i);
    EXPECT_EQ(recall_at_k(ds.query, ds, {1}, true).recall[0], 1.0);
}

TEST(Evaluate, UntrainedModelIsNearChance) {
    auto syn = testutil::small_synth(8, 400);
    syn.g = 400;
    const auto ds = gen_synthetic(syn);
    std::vector<double> r;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Model<float> m(testutil::small_model(), seed);
        r.push_back(evaluate(m, ds, {10}).recall[0]);
    }
    const double p = 10.0 / ds.g;
    const double se = std::sqrt(p * (1 - p) / (double(ds.n) * r.size()));
    // Seeds share one dataset, so allow for correlation between them.
    EXPECT_NEAR(summarize(r).mean, p, 3 * se * std::sqrt(double(r.size())));
}

TEST(Evaluate, DeterministicAndDimChecked) {
    const auto ds = gen_synthetic(testutil::small_synth(9));
    Model<float> m(testutil::small_model(), 1);
    Checkpoint ck;
    ck.model = m.config();
    ck.params = export_params(m);
    const auto a = evaluate(ck, ds, {1, 5}), b = evaluate(ck, ds, {1, 5});
    EXPECT_EQ(a.recall, b.recall);
    EXPECT_EQ(a.first_correct_rank, b.first_correct_rank);
    auto other = testutil::small_synth(9);
    other.h = 7;
    EXPECT_THROW(evaluate(ck, gen_synthetic(other), {1}), ConfigError);
}

TEST(Evaluate, PlantedTruthRetrievesPerfectly) {
    // Default widths: at very small d a longer distractor can outscore the target.
    SynthConfig s;
    s.n = 200;
    s.noise_sigma = 0.0;
    s.seed = 10;
    const auto syn = gen_synthetic_split(s);
    const auto& ds = syn.train;
    Tensor<float> emb({ds.n, ds.d});
    for (std::size_t i = 0; i < ds.n; ++i) {
        const auto y = syn.truth.apply(std::span<const float>(ds.query.data).subspan(i * ds.d, ds.d), syn.truth.concept_of[i]);
        for (std::size_t j = 0; j < ds.d; ++j) emb.data[i * ds.d + j] = static_cast<float>(y[j]);
    }
    EXPECT_EQ(recall_at_k(emb, ds, {1}).recall[0], 1.0);
}

TEST(Report, JsonShape) {
    Rng rng(11);
    const auto ds = single_target(5, 5, 2, rng);
    const auto j = to_json(recall_at_k(ds.query, ds, {1, 10}));
    EXPECT_TRUE(j.contains("recall"));
    EXPECT_TRUE(j["k_clamped"].get<bool>());
    EXPECT_EQ(j["gallery_size"].get<std::size_t>(), 5u);
}
