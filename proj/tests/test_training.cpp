#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include <unistd.h>

#include <composeae/composeae.hpp>

#include "test_util.hpp"

using namespace composeae;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("composeae_training_" + std::to_string(::getpid())) / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

TrainConfig small_train(std::uint64_t seed = 0, Variant v = Variant::ComposeAE) {
    TrainConfig c;
    c.model = testutil::small_model(v);
    c.batch_size = 8;
    c.epochs = 4;
    c.seed = seed;
    c.repeats = 1;
    return c;
}

bool same_state(const Checkpoint& a, const Checkpoint& b) {
    return a.params == b.params && a.velocity == b.velocity && a.step == b.step && a.epoch == b.epoch &&
           a.rng_state == b.rng_state;
}

double step_loss(Model<double>& m, const FeatureDataset& ds, const Batch& b, const LossWeights& w) {
    Tape<double> t;
    return t.item(build_step_loss(t, m, ds, b, {}, w).total);
}

}  // namespace

TEST(Training, SameSeedGivesIdenticalParameters) {
    const auto ds = gen_synthetic(testutil::small_synth(1));
    const auto a = train(small_train(3), ds), b = train(small_train(3), ds);
    EXPECT_TRUE(a.checkpoint == b.checkpoint);
    EXPECT_FALSE(a.checkpoint.params == train(small_train(4), ds).checkpoint.params);
}

TEST(Training, ResumeReproducesUninterruptedRun) {
    const auto ds = gen_synthetic(testutil::small_synth(2));
    auto full = small_train(5);
    full.epochs = 10;
    const auto straight = train(full, ds);

    auto half = full;
    half.epochs = 5;
    const auto first = train(half, ds);
    const auto path = scratch("resume") / "mid.ckp";
    save_checkpoint(first.checkpoint, path);
    const auto rest = resume(full, load_checkpoint(path), ds);
    EXPECT_TRUE(same_state(rest.checkpoint, straight.checkpoint));
    ASSERT_EQ(rest.history.epochs.size(), 5u);
    EXPECT_EQ(rest.history.epochs.back().total, straight.history.epochs.back().total);
}

TEST(Training, ZeroWeightConcatMatchesBaseOnlyRun) {
    const auto ds = gen_synthetic(testutil::small_synth(3));
    auto a = small_train(1, Variant::Concat);
    auto b = a;
    b.weights.lambda_sym = b.weights.lambda_ri = b.weights.lambda_rt = 0.0;
    EXPECT_TRUE(same_state(train(a, ds).checkpoint, train(b, ds).checkpoint));
}

TEST(Training, SmallStepDescends) {
    int decreased = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto ds = gen_synthetic(testutil::small_synth(seed, 32));
        Model<double> model(testutil::small_model(), seed);
        Rng rng(seed);
        const auto batch = sample_batch(ds, 16, 0, rng);
        const LossWeights w;
        const double before = step_loss(model, ds, batch, w);
        {
            Tape<double> t;
            t.backward(build_step_loss(t, model, ds, batch, {}, w).total);
        }
        OptimState<double> opt(1e-4, 0.9);
        sgd_momentum_step<double>(model.all(), opt);
        if (step_loss(model, ds, batch, w) < before) ++decreased;
    }
    EXPECT_GE(decreased, 19);
}

TEST(Training, ZeroAuxWeightsLeaveDecodersWithoutGradient) {
    const auto ds = gen_synthetic(testutil::small_synth(4, 32));
    Model<double> model(testutil::small_model(), 4);
    Rng rng(4);
    const auto batch = sample_batch(ds, 8, 0, rng);
    LossWeights w;
    w.lambda_sym = w.lambda_ri = w.lambda_rt = 0.0;
    Tape<double> t;
    t.backward(build_step_loss(t, model, ds, batch, {}, w).total);
    std::map<std::string, double> mass;
    for (auto* p : model.all()) {
        const auto group = p->name.substr(0, p->name.find('.'));
        for (double g : p->grad) mass[group] += std::abs(g);
    }
    EXPECT_EQ(mass["dec_img"], 0.0);
    EXPECT_EQ(mass["dec_txt"], 0.0);
    for (const char* g : {"gamma", "eta", "rho", "rho_conv", "a", "b"}) {
        ASSERT_TRUE(mass.count(g)) << g;
        EXPECT_GT(mass[g], 0.0) << g;
    }
}

TEST(Training, TotalMatchesWeightedComponentsEveryEpoch) {
    const auto ds = gen_synthetic(testutil::small_synth(5));
    for (auto base : {BaseLoss::SMAX, BaseLoss::ST}) {
        auto cfg = small_train(2);
        cfg.base_loss = base;
        cfg.epochs = 6;
        cfg.eval_every = 2;
        const auto r = train(cfg, ds);
        ASSERT_EQ(r.history.epochs.size(), 6u);
        for (const auto& e : r.history.epochs) {
            EXPECT_NEAR(e.total, e.weighted_sum(r.weights), 1e-5);
            EXPECT_TRUE(e.sym && e.ri && e.rt);
            EXPECT_EQ(e.recall.has_value(), e.epoch % 2 == 0);
        }
    }
}

TEST(Training, NonFiniteInputAbortsWithStepIndex) {
    auto ds = gen_synthetic(testutil::small_synth(6));
    for (std::size_t i = 0; i < ds.n; ++i) ds.query.data[i * ds.d] = std::numeric_limits<float>::quiet_NaN();
    try {
        train(small_train(), ds);
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_EQ(std::string(e.what()).rfind("step 0:", 0), 0u) << e.what();
    }
}

TEST(Training, DimensionMismatchIsConfigError) {
    auto syn = testutil::small_synth(7);
    syn.d = 10;
    const auto ds = gen_synthetic(syn);
    EXPECT_THROW(train(small_train(), ds), ConfigError);
    auto cfg = small_train();
    cfg.batch_size = 1000;
    EXPECT_THROW(train(cfg, gen_synthetic(testutil::small_synth(7))), ConfigError);
}

TEST(Training, ResolvedWeights) {
    auto ds = gen_synthetic(testutil::small_synth(8, 16));
    auto cfg = small_train(0, Variant::Tirg);
    auto w = resolve_weights(cfg, ds);
    EXPECT_EQ(w.lambda_sym, 0.0);
    EXPECT_EQ(w.lambda_ri, 0.0);
    EXPECT_EQ(w.base, BaseLoss::SMAX);
    ds.base_loss = BaseLoss::ST;
    EXPECT_EQ(resolve_weights(cfg, ds).base, BaseLoss::ST);
    cfg.base_loss = BaseLoss::SMAX;
    EXPECT_EQ(resolve_weights(cfg, ds).base, BaseLoss::SMAX);
    cfg.model.variant = Variant::ComposeAENoSym;
    w = resolve_weights(cfg, ds);
    EXPECT_EQ(w.lambda_sym, 0.0);
    EXPECT_EQ(w.lambda_ri, 0.01);
}

TEST(Training, RepeatsAndSummary) {
    const auto ds = gen_synthetic(testutil::small_synth(9));
    auto cfg = small_train(10);
    cfg.repeats = 3;
    cfg.epochs = 2;
    const auto runs = train_repeats(cfg, ds);
    ASSERT_EQ(runs.size(), 3u);
    auto single = cfg;
    single.seed = 11;
    EXPECT_TRUE(runs[1].checkpoint == train(single, ds).checkpoint);
    const auto s = summarize_runs(runs, cfg.ks);
    for (const char* k : {"R@1", "R@5", "R@10"}) {
        ASSERT_TRUE(s["recall"].contains(k));
        EXPECT_TRUE(s["recall"][k].contains("mean"));
        EXPECT_TRUE(s["recall"][k].contains("std"));
    }
    const auto stats = summarize({1.0, 2.0, 3.0});
    EXPECT_DOUBLE_EQ(stats.mean, 2.0);
    EXPECT_DOUBLE_EQ(stats.stddev, 1.0);
    EXPECT_EQ(summarize({4.0}).stddev, 0.0);
}

TEST(Checkpoint, RoundTripIsExact) {
    const auto dir = scratch("ckpt");
    Model<float> fresh(testutil::small_model(), 1);
    Checkpoint ck;
    ck.model = fresh.config();
    ck.params = export_params(fresh);
    save_checkpoint(ck, dir / "fresh.ckp");
    EXPECT_TRUE(load_checkpoint(dir / "fresh.ckp") == ck);

    const auto trained = train(small_train(1), gen_synthetic(testutil::small_synth(1))).checkpoint;
    save_checkpoint(trained, dir / "trained.ckp");
    EXPECT_TRUE(load_checkpoint(dir / "trained.ckp") == trained);
    auto back = model_from_checkpoint<float>(trained);
    EXPECT_TRUE(export_params(back) == trained.params);
}

TEST(Checkpoint, VersionAndShapeChecked) {
    const auto dir = scratch("ckpt_bad");
    Model<float> m(testutil::small_model(), 1);
    Checkpoint ck;
    ck.model = m.config();
    ck.params = export_params(m);
    save_checkpoint(ck, dir / "ok.ckp");

    std::ifstream in(dir / "ok.ckp", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto replaced = bytes;
    replaced.replace(replaced.find("CKP1"), 4, "CRX9");
    std::ofstream(dir / "v.ckp", std::ios::binary) << replaced;
    EXPECT_THROW(load_checkpoint(dir / "v.ckp"), UnsupportedVersionError);

    auto wrong = ck;
    wrong.model.eta_hidden = 9;  // embedded config no longer matches the arrays
    save_checkpoint(wrong, dir / "shape.ckp");
    EXPECT_THROW(load_checkpoint(dir / "shape.ckp"), FormatError);
    EXPECT_THROW(load_checkpoint(dir / "missing.ckp"), FormatError);
}

// Full-size planted data: recall@10 should climb over the first evaluations.
TEST(Training, PlantedRecallImprovesEarly) {
    SynthConfig s;
    s.n = 2000;
    s.n_test = 2000;  // g = 2000 validation gallery
    s.d = 64;
    s.h = 32;
    s.k_true = 32;
    s.num_text_concepts = 8;
    s.noise_sigma = 0.05;
    s.seed = 0;
    const auto syn = gen_synthetic_split(s);
    TrainConfig cfg;
    cfg.model.d = 64;
    cfg.model.h = 32;
    cfg.model.k = 32;
    cfg.model.gamma_hidden = cfg.model.eta_hidden = cfg.model.rho_hidden = cfg.model.dec_hidden = 128;
    cfg.model.rho_conv_hidden = 256;
    cfg.model.rho_conv_length = 4;
    cfg.model.baseline_hidden = 128;
    cfg.learning_rate = 0.02;
    cfg.epochs = 5;
    cfg.eval_every = 1;
    cfg.ks = {10};
    int monotone = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        cfg.seed = seed;
        const auto r = train(cfg, syn.train, &syn.test);
        bool ok = true;
        for (std::size_t e = 1; e < r.history.epochs.size(); ++e)
            ok = ok && (*r.history.epochs[e].recall)[0] >= (*r.history.epochs[e - 1].recall)[0];
        monotone += ok;
    }
    EXPECT_GE(monotone, 4);
}
