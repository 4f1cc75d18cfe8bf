#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <functional>
#include <map>
#include <set>

#include <unistd.h>

#include <composeae/composeae.hpp>

#include "test_util.hpp"

using namespace composeae;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("composeae_data_" + std::to_string(::getpid())) / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

FeatureDataset random_dataset(Rng& rng) {
    FeatureDataset ds;
    ds.n = 1 + rng.below(12);
    ds.g = ds.n + rng.below(5);
    ds.d = 1 + rng.below(6);
    ds.h = 1 + rng.below(4);
    ds.query = Tensor<float>({ds.n, ds.d}, testutil::normal_vec_f(ds.n * ds.d, rng));
    ds.text = Tensor<float>({ds.n, ds.h}, testutil::normal_vec_f(ds.n * ds.h, rng));
    ds.target = Tensor<float>({ds.g, ds.d}, testutil::normal_vec_f(ds.g * ds.d, rng));
    const std::size_t per_group = 1 + rng.below(3);
    for (std::size_t i = 0; i < ds.n; ++i) {
        ds.target_index.push_back(i);
        ds.target_group.push_back(static_cast<std::int64_t>(i / per_group));
    }
    const auto r = rng.below(3);
    if (r == 1) ds.base_loss = BaseLoss::SMAX;
    if (r == 2) ds.base_loss = BaseLoss::ST;
    ds.finalize();
    return ds;
}

std::string error_of(const fs::path& manifest) {
    try {
        load_dataset(manifest);
    } catch (const FormatError& e) {
        return e.what();
    }
    return "";
}

void rewrite_manifest(const fs::path& p, const std::function<void(nlohmann::json&)>& edit) {
    nlohmann::json m;
    {
        std::ifstream in(p);
        in >> m;
    }
    edit(m);
    std::ofstream(p) << m.dump();
}

}  // namespace

TEST(Crf1, RoundTripIsIdentity) {
    Rng rng(1);
    const auto dir = scratch("roundtrip");
    for (int i = 0; i < 100; ++i) {
        const auto ds = random_dataset(rng);
        const auto path = dir / ("ds" + std::to_string(i) + ".json");
        save_dataset(ds, path);
        const auto back = load_dataset(path);
        EXPECT_TRUE(back == ds) << "dataset " << i;
        EXPECT_EQ(back.gallery_group, ds.gallery_group);
    }
}

TEST(Crf1, BlobsAreHeaderlessLittleEndianFloat32) {
    const auto dir = scratch("layout");
    FeatureDataset ds;
    ds.n = ds.g = ds.d = ds.h = 1;
    ds.query = Tensor<float>({1, 1}, {1.0f});
    ds.text = Tensor<float>({1, 1}, {-2.0f});
    ds.target = Tensor<float>({1, 1}, {0.5f});
    ds.target_index = {0};
    ds.target_group = {0};
    ds.finalize();
    save_dataset(ds, dir / "one.json");
    std::ifstream in(dir / "one.query.f32", std::ios::binary);
    std::vector<unsigned char> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    EXPECT_EQ(b, (std::vector<unsigned char>{0x00, 0x00, 0x80, 0x3f}));
}

TEST(Crf1, TruncatedBlobNamesTheBlob) {
    Rng rng(2);
    const auto dir = scratch("truncated");
    auto ds = random_dataset(rng);
    save_dataset(ds, dir / "t.json");
    const auto blob = dir / "t.target.f32";
    fs::resize_file(blob, fs::file_size(blob) - 4);
    const auto msg = error_of(dir / "t.json");
    EXPECT_NE(msg.find("'target'"), std::string::npos) << msg;
}

TEST(Crf1, DimensionMismatchReportsBothNumbers) {
    Rng rng(3);
    const auto dir = scratch("dims");
    FeatureDataset ds;
    ds.n = ds.g = 2;
    ds.d = 511;
    ds.h = 3;
    ds.query = Tensor<float>({2, 511}, testutil::normal_vec_f(2 * 511, rng));
    ds.text = Tensor<float>({2, 3}, testutil::normal_vec_f(6, rng));
    ds.target = Tensor<float>({2, 511}, testutil::normal_vec_f(2 * 511, rng));
    ds.target_index = {0, 1};
    ds.target_group = {0, 1};
    ds.finalize();
    save_dataset(ds, dir / "m.json");
    rewrite_manifest(dir / "m.json", [](nlohmann::json& m) { m["d"] = 512; });
    const auto msg = error_of(dir / "m.json");
    EXPECT_NE(msg.find("512"), std::string::npos) << msg;
    EXPECT_NE(msg.find("511"), std::string::npos) << msg;
}

TEST(Crf1, NonFiniteValuesRejected) {
    Rng rng(4);
    const auto dir = scratch("nan");
    auto ds = random_dataset(rng);
    save_dataset(ds, dir / "x.json");
    {
        std::fstream f(dir / "x.text.f32", std::ios::binary | std::ios::in | std::ios::out);
        const float nan = std::numeric_limits<float>::quiet_NaN();
        f.write(reinterpret_cast<const char*>(&nan), 4);
    }
    EXPECT_NE(error_of(dir / "x.json").find("non-finite"), std::string::npos);
}

TEST(Crf1, IndexOutOfRangeRejected) {
    Rng rng(5);
    const auto dir = scratch("range");
    auto ds = random_dataset(rng);
    save_dataset(ds, dir / "r.json");
    rewrite_manifest(dir / "r.json", [&](nlohmann::json& m) { m["target_index"][0] = ds.g; });
    EXPECT_NE(error_of(dir / "r.json").find("out of range"), std::string::npos);
}

TEST(Crf1, VersionChecked) {
    Rng rng(6);
    const auto dir = scratch("version");
    save_dataset(random_dataset(rng), dir / "v.json");
    rewrite_manifest(dir / "v.json", [](nlohmann::json& m) { m["version"] = "CRF2"; });
    EXPECT_THROW(load_dataset(dir / "v.json"), UnsupportedVersionError);
    EXPECT_THROW(load_dataset(dir / "missing.json"), FormatError);
}

TEST(Crf1, ConflictingGroupsRejected) {
    Rng rng(7);
    auto ds = random_dataset(rng);
    ds.n = 2;
    ds.query = Tensor<float>({2, ds.d}, testutil::normal_vec_f(2 * ds.d, rng));
    ds.text = Tensor<float>({2, ds.h}, testutil::normal_vec_f(2 * ds.h, rng));
    ds.target_index = {0, 0};
    ds.target_group = {0, 1};
    EXPECT_THROW(ds.finalize(), FormatError);
}

TEST(Synthetic, SameSeedIsBitIdentical) {
    auto cfg = testutil::small_synth(9);
    cfg.n_test = 20;
    const auto a = gen_synthetic_split(cfg), b = gen_synthetic_split(cfg);
    EXPECT_TRUE(a.train == b.train);
    EXPECT_TRUE(a.test == b.test);
    cfg.seed = 10;
    EXPECT_FALSE(gen_synthetic(cfg) == a.train);
}

TEST(Synthetic, IdentityRotationReturnsTheQuery) {
    SynthConfig s;
    s.n = 50;
    s.d = 8;
    s.h = 4;
    s.k_true = 4;  // 2k = d, so E is square and orthogonal
    s.noise_sigma = 0.0;
    s.num_text_concepts = 1;
    s.max_angle = 0.0;
    s.seed = 3;
    const auto ds = gen_synthetic(s);
    for (std::size_t i = 0; i < ds.n; ++i)
        for (std::size_t j = 0; j < s.d; ++j)
            EXPECT_NEAR(ds.target.data[ds.target_index[i] * s.d + j], ds.query.data[i * s.d + j], 1e-6);
}

TEST(Synthetic, PlantedOracleRetrievesPerfectly) {
    SynthConfig s;
    s.n = 300;
    s.n_test = 100;
    s.g_test = 400;
    s.noise_sigma = 0.0;
    s.seed = 5;
    const auto syn = gen_synthetic_split(s);
    const auto& test = syn.test;
    Tensor<float> emb({test.n, test.d});
    for (std::size_t i = 0; i < test.n; ++i) {
        auto y = syn.truth.apply(std::span<const float>(test.query.data).subspan(i * s.d, s.d), syn.test_concept_of[i]);
        for (std::size_t j = 0; j < s.d; ++j) emb.data[i * s.d + j] = static_cast<float>(y[j]);
    }
    EXPECT_EQ(recall_at_k(emb, test, {1}).recall[0], 1.0);
    EXPECT_EQ(test.g, 400u);
}

TEST(Synthetic, InvalidConfig) {
    SynthConfig s;
    s.num_text_concepts = 40;  // more than h
    EXPECT_THROW(s.validate(), ConfigError);
    s = SynthConfig{};
    s.noise_sigma = -1.0;
    EXPECT_THROW(s.validate(), ConfigError);
    s = SynthConfig{};
    s.g = 10;
    EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Batches, NegativesNeverShareTheGroup) {
    auto ds = gen_synthetic(testutil::small_synth(1, 10));
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const auto b = sample_batch(ds, 4, 3, rng);
        for (std::size_t i = 0; i < b.sample_indices.size(); ++i) {
            const auto s = b.sample_indices[i];
            ASSERT_EQ(b.negative_indices[i].size(), 3u);
            std::set<std::size_t> uniq(b.negative_indices[i].begin(), b.negative_indices[i].end());
            EXPECT_EQ(uniq.size(), 3u);
            for (auto j : b.negative_indices[i]) EXPECT_FALSE(ds.is_correct(s, j));
        }
    }
}

TEST(Batches, GroupEquivalentEntriesExcluded) {
    Rng rng(3);
    FeatureDataset ds;
    ds.n = 6;
    ds.g = 8;
    ds.d = 2;
    ds.h = 1;
    ds.query = Tensor<float>({6, 2}, testutil::normal_vec_f(12, rng));
    ds.text = Tensor<float>({6, 1}, testutil::normal_vec_f(6, rng));
    ds.target = Tensor<float>({8, 2}, testutil::normal_vec_f(16, rng));
    ds.target_index = {0, 1, 2, 3, 4, 5};
    ds.target_group = {0, 0, 0, 1, 1, 2};
    ds.finalize();
    for (int trial = 0; trial < 500; ++trial)
        for (auto j : sample_negatives(ds, 0, 4, rng)) EXPECT_GT(j, 2u);
    EXPECT_THROW(sample_negatives(ds, 0, 6, rng), ConfigError);
}

TEST(Batches, NegativeSamplingIsUniform) {
    Rng rng(4);
    FeatureDataset ds;
    ds.n = ds.g = 5;
    ds.d = ds.h = 1;
    ds.query = Tensor<float>({5, 1}, testutil::normal_vec_f(5, rng));
    ds.text = Tensor<float>({5, 1}, testutil::normal_vec_f(5, rng));
    ds.target = Tensor<float>({5, 1}, testutil::normal_vec_f(5, rng));
    ds.target_index = {0, 1, 2, 3, 4};
    ds.target_group = {0, 1, 2, 3, 4};
    ds.finalize();
    std::map<std::size_t, int> count;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) ++count[sample_negatives(ds, 2, 1, rng)[0]];
    EXPECT_EQ(count.count(2), 0u);
    for (std::size_t j : {0u, 1u, 3u, 4u}) EXPECT_NEAR(count[j] / double(draws), 0.25, 0.02) << j;
}

TEST(Batches, FixedSeedIsReproducible) {
    auto ds = gen_synthetic(testutil::small_synth(1, 30));
    Rng a(7), b(7);
    for (int i = 0; i < 20; ++i) EXPECT_TRUE(sample_batch(ds, 8, 3, a) == sample_batch(ds, 8, 3, b));
}

TEST(Batches, InvalidBatchSize) {
    auto ds = gen_synthetic(testutil::small_synth(1, 10));
    Rng rng(1);
    EXPECT_THROW(sample_batch(ds, 11, 1, rng), ConfigError);
    EXPECT_THROW(sample_batch(ds, 0, 1, rng), ConfigError);
}
