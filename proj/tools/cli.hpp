#pragma once

// Command parsing and execution for the composeae tool.
//
// Config document (every key optional in a file; unknown keys rejected):
//   <TrainConfig fields>,
//   "data":       {"train": path, "eval": path}
//   "synth":      {<SynthConfig fields>}
//   "checkpoint": path                     (eval input)
//   "variants":   [variant, ...]           (train: one run set per variant)

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <composeae/composeae.hpp>

namespace composeae::cli {

namespace fs = std::filesystem;

inline const std::vector<std::string>& verbs() {
    static const std::vector<std::string> v{"synth", "train", "eval", "gradcheck", "selftest"};
    return v;
}

struct Command {
    std::string verb;
    std::string config_path;
    std::vector<std::pair<std::string, std::string>> overrides;
    std::string output_dir = "out";

    friend bool operator==(const Command&, const Command&) = default;
};

inline json default_document() {
    json doc = to_json(TrainConfig{});
    doc["data"] = {{"train", ""}, {"eval", ""}};
    doc["synth"] = to_json(SynthConfig{});
    doc["checkpoint"] = "";
    doc["variants"] = json::array();
    return doc;
}

inline std::string usage() {
    std::string v;
    for (const auto& s : verbs()) v += (v.empty() ? "" : ", ") + s;
    return "usage: composeae <verb> [--config FILE] [--set KEY=VALUE]... [--out DIR]; verbs: {" + v + "}";
}

inline Command parse_command(const std::vector<std::string>& args) {
    if (args.empty()) throw UsageError("missing verb; " + usage());
    Command cmd;
    cmd.verb = args[0];
    if (std::find(verbs().begin(), verbs().end(), cmd.verb) == verbs().end())
        throw UsageError("unknown verb '" + cmd.verb + "'; " + usage());
    for (std::size_t i = 1; i < args.size(); ++i) {
        const std::string& a = args[i];
        auto value = [&]() -> const std::string& {
            if (i + 1 >= args.size()) throw UsageError(a + " needs a value");
            return args[++i];
        };
        if (a == "--config") {
            cmd.config_path = value();
        } else if (a == "--out") {
            cmd.output_dir = value();
        } else if (a == "--set") {
            const std::string& kv = value();
            const auto eq = kv.find('=');
            if (eq == std::string::npos || eq == 0) throw UsageError("--set expects KEY=VALUE, got '" + kv + "'");
            cmd.overrides.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
        } else {
            throw UsageError("unknown argument '" + a + "'; " + usage());
        }
    }
    json probe = default_document();
    for (const auto& [k, v] : cmd.overrides) apply_override(probe, k, v);
    return cmd;
}

/// Defaults, then the config file, then the overrides.
inline json resolve_document(const Command& cmd) {
    json doc = default_document();
    if (!cmd.config_path.empty()) {
        std::ifstream in(cmd.config_path);
        if (!in) throw ConfigError("cannot read config file '" + cmd.config_path + "'");
        json file = json::parse(in, nullptr, false);
        if (file.is_discarded()) throw ConfigError("config file '" + cmd.config_path + "' is not valid JSON");
        merge_strict(doc, file);
    }
    for (const auto& [k, v] : cmd.overrides) apply_override(doc, k, v);
    return doc;
}

inline TrainConfig train_config_of(const json& doc) {
    json j = doc;
    for (const char* k : {"data", "synth", "checkpoint", "variants"}) j.erase(k);
    return train_config_from_resolved(j);
}

inline void write_json(const fs::path& p, const json& j) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw FormatError("cannot open '" + p.string() + "' for writing");
    out << j.dump(2) << '\n';
}

// ---- gradcheck ---------------------------------------------------------------

struct GradcheckResult {
    std::string name;
    double error;
};

inline ModelConfig tiny_model_config(Variant v) {
    ModelConfig m;
    m.d = 4;
    m.h = 3;
    m.k = 2;
    m.gamma_hidden = m.eta_hidden = m.rho_hidden = m.dec_hidden = 3;
    m.rho_conv_hidden = 4;
    m.rho_conv_length = 4;
    m.rho_conv_channels = 2;
    m.rho_conv_kernel = 3;
    m.baseline_hidden = 3;
    m.variant = v;
    return m;
}

inline FeatureDataset tiny_dataset(std::uint64_t seed) {
    SynthConfig s;
    s.n = 8;
    s.d = 4;
    s.h = 3;
    s.k_true = 2;
    s.num_text_concepts = 3;
    s.seed = seed;
    return gen_synthetic(s);
}

/// Adds uniform(-scale, scale) noise to every parameter. Zero biases at tiny
/// widths can leave whole ReLU layers dead, which puts later units exactly on
/// their kink.
inline void jitter(Model<double>& model, std::uint64_t seed, double scale = 0.1) {
    Rng rng(seed);
    for (auto* p : model.all())
        for (auto& v : p->value.data) v += rng.uniform(-scale, scale);
}

/// Full-graph check of L_T for every variant under both base losses, in
/// double precision.
inline std::vector<GradcheckResult> run_gradcheck(std::uint64_t seed = 0) {
    std::vector<GradcheckResult> out;
    const FeatureDataset ds = tiny_dataset(seed);
    for (const auto& [variant, token] : variant_tokens()) {
        for (BaseLoss base : {BaseLoss::SMAX, BaseLoss::ST}) {
            Model<double> model(tiny_model_config(variant), derive_seed(seed, 2));
            jitter(model, derive_seed(seed, 4));
            TrainConfig cfg;
            cfg.model = model.config();
            cfg.base_loss = base;
            cfg.weights.M = 2;
            const LossWeights w = resolve_weights(cfg, ds);
            Rng rng(derive_seed(seed, 3));
            const Batch batch = sample_batch(ds, 4, base == BaseLoss::ST ? w.M : 0, rng);
            std::vector<std::vector<std::size_t>> sym_neg;
            if (base == BaseLoss::ST) sym_neg = sample_batch_negatives(ds, batch, w.M, rng);
            auto build = [&](Tape<double>& tape) { return build_step_loss(tape, model, ds, batch, sym_neg, w).total; };
            out.push_back({token + "/" + to_string(base), grad_check_params<double>(build, model.all(), 1e-6)});
        }
    }
    return out;
}

// ---- selftest ----------------------------------------------------------------

struct SelftestCase {
    std::string name;
    std::function<bool()> run;
};

inline bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

inline std::vector<SelftestCase> selftest_cases() {
    std::vector<SelftestCase> c;
    c.push_back({"soft_triplet equal similarities = log 2", [] {
                     std::vector<double> p{0.5}, n{0.5};
                     return near(soft_triplet_loss<double>(p, n), std::log(2.0), 1e-12);
                 }});
    c.push_back({"soft_triplet pos=2 neg=0 = log(1+e^-2)", [] {
                     std::vector<double> p{2.0}, n{0.0};
                     return near(soft_triplet_loss<double>(p, n), std::log1p(std::exp(-2.0)), 1e-12);
                 }});
    c.push_back({"batch_softmax uniform 4x4 = log 4", [] {
                     std::vector<double> s(16, 0.3);
                     return near(batch_softmax_loss<double>(s, 4, 4), std::log(4.0), 1e-12);
                 }});
    c.push_back({"batch_softmax N=1 = 0", [] {
                     std::vector<double> s{5.0};
                     return near(batch_softmax_loss<double>(s, 1, 1), 0.0, 1e-12);
                 }});
    c.push_back({"batch_softmax [[2,0],[0,2]] = log(1+e^-2)", [] {
                     std::vector<double> s{2, 0, 0, 2};
                     return near(batch_softmax_loss<double>(s, 2, 2), std::log1p(std::exp(-2.0)), 1e-12);
                 }});
    c.push_back({"total loss 1 + 0.5*2 + 0.1*3 + 0.1*4 = 2.7", [] {
                     LossWeights w;
                     w.lambda_sym = 0.5;
                     w.lambda_ri = w.lambda_rt = 0.1;
                     return near(total_loss({1.0, 2.0, 3.0, 4.0}, w), 2.7, 1e-12);
                 }});
    c.push_back({"reconstruction ([1,2] vs [0,0]) = 5", [] {
                     std::vector<double> a{1, 2}, b{0, 0};
                     return near(reconstruction_loss<double>(a, b, 1), 5.0, 1e-12);
                 }});
    c.push_back({"total loss 1 + 0.1*2 + 0.01*(10+10) = 1.4", [] {
                     return near(total_loss({1.0, 2.0, 10.0, 10.0}, LossWeights{}), 1.4, 1e-12);
                 }});
    c.push_back({"sgd momentum two steps: -0.1, -0.29", [] {
                     std::vector<double> p{0.0}, g{1.0};
                     OptimState<double> st(0.1, 0.9);
                     sgd_momentum_step<double>({&p}, {&g}, st);
                     const bool first = near(p[0], -0.1, 1e-12);
                     sgd_momentum_step<double>({&p}, {&g}, st);
                     return first && near(p[0], -0.29, 1e-12);
                 }});
    c.push_back({"rotation by pi/2 maps 1 to j", [] {
                     std::vector<double> th{std::numbers::pi / 2};
                     auto r = rotate(rotation_from_angles<double>(th), ComplexVec<double>{{1.0, 0.0}});
                     return near(r[0].real(), 0.0, 1e-12) && near(r[0].imag(), 1.0, 1e-12);
                 }});
    c.push_back({"conjugate rotation inverts", [] {
                     std::vector<double> th{0.3, -2.0};
                     auto d = rotation_from_angles<double>(th);
                     ComplexVec<double> v{{0.5, -1.0}, {2.0, 0.25}};
                     auto back = rotate(conjugate(d), rotate(d, v));
                     return std::abs(back[0] - v[0]) < 1e-12 && std::abs(back[1] - v[1]) < 1e-12;
                 }});
    c.push_back({"rank_gallery ties go to the lower index", [] {
                     std::vector<float> q{1.0f}, gal{0.5f, 1.0f, 1.0f, 0.0f};
                     return rank_gallery<float>(q, gal) == std::vector<std::size_t>{1, 2, 0, 3};
                 }});
    c.push_back({"planted oracle reaches R@1 = 1", [] {
                     SynthConfig s;
                     s.n = 200;
                     s.noise_sigma = 0.0;
                     s.seed = 3;
                     auto syn = gen_synthetic_split(s);
                     Tensor<float> emb({syn.train.n, syn.train.d});
                     for (std::size_t i = 0; i < syn.train.n; ++i) {
                         std::span<const float> z(syn.train.query.data.data() + i * s.d, s.d);
                         auto y = syn.truth.apply(z, syn.truth.concept_of[i]);
                         for (std::size_t j = 0; j < s.d; ++j) emb.data[i * s.d + j] = static_cast<float>(y[j]);
                     }
                     return recall_at_k(emb, syn.train, {1}).recall[0] == 1.0;
                 }});
    c.push_back({"full-graph gradcheck <= 5e-3", [] {
                     for (const auto& r : run_gradcheck())
                         if (!(r.error <= 5e-3)) return false;
                     return true;
                 }});
    return c;
}

// ---- verbs -------------------------------------------------------------------

struct LoadedData {
    FeatureDataset train;
    std::optional<FeatureDataset> eval;
};

/// Datasets named under "data", or the synth section generated in memory
/// when data.train is empty.
inline LoadedData load_data(const json& doc) {
    LoadedData d;
    const auto train_path = doc["data"]["train"].get<std::string>();
    const auto eval_path = doc["data"]["eval"].get<std::string>();
    if (train_path.empty()) {
        auto syn = gen_synthetic_split(synth_config_from_json(doc["synth"]));
        d.train = std::move(syn.train);
        if (syn.test.n) d.eval = std::move(syn.test);
    } else {
        d.train = load_dataset(train_path);
    }
    if (!eval_path.empty()) d.eval = load_dataset(eval_path);
    return d;
}

inline int run_synth(const json& doc, const fs::path& out, std::ostream& log) {
    const SynthConfig s = synth_config_from_json(doc["synth"]);
    auto syn = gen_synthetic_split(s);
    save_dataset(syn.train, out / "train.json");
    log << "wrote " << (out / "train.json").string() << " (n = " << syn.train.n << ", g = " << syn.train.g << ")\n";
    if (syn.test.n) {
        save_dataset(syn.test, out / "test.json");
        log << "wrote " << (out / "test.json").string() << " (n = " << syn.test.n << ", g = " << syn.test.g << ")\n";
    }
    return 0;
}

/// Trains cfg.repeats runs into `dir` and returns the summary.
inline json train_into(const TrainConfig& cfg, const LoadedData& data, const fs::path& dir, std::ostream& log) {
    const FeatureDataset* eval = data.eval ? &*data.eval : nullptr;
    auto runs = train_repeats(cfg, data.train, eval, [&](std::size_t r, const EpochRecord& rec) {
        log << to_string(cfg.model.variant) << " run " << r << " " << to_json(rec, cfg.ks).dump() << "\n";
    });
    for (std::size_t r = 0; r < runs.size(); ++r) {
        const fs::path rd = dir / ("run" + std::to_string(r));
        fs::create_directories(rd);
        save_checkpoint(runs[r].checkpoint, rd / "checkpoint.ckp");
        std::ofstream m(rd / "metrics.jsonl");
        for (const auto& e : runs[r].history.epochs) m << to_json(e, cfg.ks).dump() << '\n';
    }
    json summary = summarize_runs(runs, cfg.ks);
    summary["variant"] = to_string(cfg.model.variant);
    summary["evaluated_on"] = eval ? "eval" : "train";
    write_json(dir / "summary.json", summary);
    return summary;
}

inline int run_train(const json& doc, const fs::path& out, std::ostream& log) {
    const TrainConfig cfg = train_config_of(doc);
    const auto variants = doc["variants"].get<std::vector<std::string>>();
    std::vector<Variant> parsed;
    for (const auto& v : variants) parsed.push_back(parse_variant(v));
    const LoadedData data = load_data(doc);
    if (parsed.empty()) {
        train_into(cfg, data, out, log);
        return 0;
    }
    json ablation;
    ablation["repeats"] = cfg.repeats;
    ablation["variants"] = json::array();
    for (std::size_t i = 0; i < parsed.size(); ++i) {
        TrainConfig c = cfg;
        c.model.variant = parsed[i];
        json s = train_into(c, data, out / variants[i], log);
        json row{{"variant", variants[i]}, {"recall", s["recall"]}};
        ablation["variants"].push_back(row);
    }
    write_json(out / "ablation.json", ablation);
    return 0;
}

inline int run_eval(const json& doc, const fs::path& out, std::ostream& log) {
    const auto ck_path = doc["checkpoint"].get<std::string>();
    if (ck_path.empty()) throw ConfigError("eval needs a checkpoint (set checkpoint=PATH)");
    const TrainConfig cfg = train_config_of(doc);
    const Checkpoint ck = load_checkpoint(ck_path);
    LoadedData data = load_data(doc);
    const FeatureDataset& ds = data.eval ? *data.eval : data.train;
    auto rep = evaluate(ck, ds, cfg.ks, cfg.normalize);
    json j = to_json(rep);
    write_json(out / "report.json", j);
    log << j["recall"].dump() << "\n";
    return 0;
}

inline int run_gradcheck_verb(std::ostream& log) {
    double worst = 0.0;
    for (const auto& r : run_gradcheck()) {
        log << r.name << " " << r.error << "\n";
        worst = std::max(worst, r.error);
    }
    log << "max relative error " << worst << "\n";
    if (!(worst <= 5e-3)) throw NumericError("gradient check failed: max relative error " + std::to_string(worst));
    return 0;
}

inline int run_selftest(std::ostream& log) {
    int failed = 0;
    for (const auto& c : selftest_cases()) {
        const bool ok = c.run();
        failed += !ok;
        log << (ok ? "PASS " : "FAIL ") << c.name << "\n";
    }
    if (failed) throw ContractError(std::to_string(failed) + " selftest case(s) failed");
    return 0;
}

inline int run(const Command& cmd, std::ostream& log) {
    const json doc = resolve_document(cmd);
    const fs::path out = cmd.output_dir;
    fs::create_directories(out);
    write_json(out / "resolved-config.json", doc);
    if (cmd.verb == "synth") return run_synth(doc, out, log);
    if (cmd.verb == "train") return run_train(doc, out, log);
    if (cmd.verb == "eval") return run_eval(doc, out, log);
    if (cmd.verb == "gradcheck") return run_gradcheck_verb(log);
    return run_selftest(log);
}

inline std::string error_line(const char* kind, const std::string& message) {
    return json{{"error", kind}, {"message", message}}.dump();
}

/// Parses and runs; any error becomes one JSON line on `err` and a nonzero
/// status (2 for usage errors).
inline int main(const std::vector<std::string>& args, std::ostream& log, std::ostream& err) {
    try {
        return run(parse_command(args), log);
    } catch (const UsageError& e) {
        err << error_line(e.kind(), e.what()) << '\n';
        return 2;
    } catch (const Error& e) {
        err << error_line(e.kind(), e.what()) << '\n';
        return 1;
    } catch (const json::exception& e) {
        err << error_line("config", e.what()) << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << error_line("internal", e.what()) << '\n';
        return 1;
    }
}

}  // namespace composeae::cli
