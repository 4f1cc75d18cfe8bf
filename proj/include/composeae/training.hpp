#pragma once

// Mini-batch training: per step compose the batch, add the conjugate path
// and decoders when their weights are non-zero, assemble the weighted total,
// backpropagate, and take one SGD-with-momentum step.

#include <array>
#include <cmath>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "autodiff.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "evaluation.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "random.hpp"

namespace composeae {

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double base = 0.0;
    std::optional<double> sym, ri, rt;  // absent when the term was not computed
    double total = 0.0;
    std::optional<std::vector<double>> recall;  // one per k, on evaluation epochs

    /// base + lambda-weighted terms, recomputed from the components.
    double weighted_sum(const LossWeights& w) const {
        return total_loss({base, sym.value_or(0.0), ri.value_or(0.0), rt.value_or(0.0)}, w);
    }
};

inline nlohmann::json to_json(const EpochRecord& r, const std::vector<std::size_t>& ks) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    nlohmann::json j = {{"epoch", r.epoch}, {"L_BASE", r.base}, {"L_SYM", opt(r.sym)}, {"L_RI", opt(r.ri)},
                        {"L_RT", opt(r.rt)}, {"L_T", r.total}};
    if (r.recall) {
        nlohmann::json rec = nlohmann::json::object();
        for (std::size_t i = 0; i < ks.size(); ++i) rec["R@" + std::to_string(ks[i])] = (*r.recall)[i];
        j["recall"] = rec;
    } else {
        j["recall"] = nullptr;
    }
    return j;
}

struct MetricsHistory {
    std::vector<EpochRecord> epochs;
};

struct TrainResult {
    Checkpoint checkpoint;
    MetricsHistory history;
    LossWeights weights;  // as resolved for the run (base loss, variant overrides)
};

/// Loss weights actually used for a variant and dataset.
inline LossWeights resolve_weights(const TrainConfig& cfg, const FeatureDataset& ds) {
    LossWeights w = cfg.weights;
    w.base = cfg.base_loss.value_or(ds.base_loss.value_or(BaseLoss::SMAX));
    const Variant v = cfg.model.variant;
    if (!supports_symmetry(v)) w.lambda_sym = 0.0;
    if (!has_decoders(v)) w.lambda_ri = w.lambda_rt = 0.0;
    return w;
}

/// Batch rows for the soft-triplet symmetry term: for each batch position, M
/// other positions whose target group differs.
inline std::vector<std::vector<std::size_t>> sample_batch_negatives(const FeatureDataset& ds, const Batch& b,
                                                                    std::size_t M, Rng& rng) {
    const std::size_t N = b.sample_indices.size();
    std::vector<std::vector<std::size_t>> out(N);
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < N; ++i) {
        pool.clear();
        for (std::size_t j = 0; j < N; ++j)
            if (ds.target_group[b.sample_indices[j]] != ds.target_group[b.sample_indices[i]]) pool.push_back(j);
        if (pool.size() < M)
            throw ConfigError("batch position " + std::to_string(i) + " has only " + std::to_string(pool.size()) +
                              " in-batch negatives for the symmetry term but M = " + std::to_string(M));
        for (std::size_t m = 0; m < M; ++m) {
            std::swap(pool[m], pool[m + rng.below(pool.size() - m)]);
            out[i].push_back(pool[m]);
        }
    }
    return out;
}

template <class T>
struct StepGraph {
    Var total;
    LossComponents<std::optional<Var>> parts;
};

namespace detail {
template <class T>
Var gather_rows(Tape<T>& tape, const Tensor<float>& m, const std::vector<std::size_t>& rows) {
    const std::size_t w = m.cols();
    std::vector<T> out(rows.size() * w);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = static_cast<T>(m.data[rows[i] * w + j]);
    return tape.constant({rows.size(), w}, std::move(out));
}
}  // namespace detail

/// Builds L_T for one batch on `tape`. `sym_negatives` is only read for the
/// soft-triplet symmetry term.
template <class T>
StepGraph<T> build_step_loss(Tape<T>& tape, Model<T>& model, const FeatureDataset& ds, const Batch& batch,
                             const std::vector<std::vector<std::size_t>>& sym_negatives, const LossWeights& w) {
    const auto& idx = batch.sample_indices;
    std::vector<std::size_t> tgt(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) tgt[i] = ds.target_index[idx[i]];
    Var z = detail::gather_rows<T>(tape, ds.query, idx);
    Var q = detail::gather_rows<T>(tape, ds.text, idx);
    Var y = detail::gather_rows<T>(tape, ds.target, tgt);

    StepGraph<T> g;
    Var theta = model.compose(tape, z, q);
    if (w.base == BaseLoss::SMAX) {
        g.parts.base = batch_softmax_loss(tape, tape.matmul(theta, tape.transpose(y)));
    } else {
        std::vector<std::size_t> rep, neg;
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j : batch.negative_indices.at(i)) {
                rep.push_back(i);
                neg.push_back(j);
            }
        Var anchors = tape.take_rows(theta, rep);
        Var pos = row_dot(tape, anchors, tape.take_rows(y, rep));
        Var negs = row_dot(tape, anchors, detail::gather_rows<T>(tape, ds.target, neg));
        g.parts.base = soft_triplet_loss(tape, pos, negs);
    }
    if (w.lambda_sym > 0.0 && supports_symmetry(model.config().variant)) {
        Var conj = model.compose_conjugate(tape, y, q);
        g.parts.sym = rotational_symmetry_loss(tape, conj, z, w.base, sym_negatives);
    }
    if ((w.lambda_ri > 0.0 || w.lambda_rt > 0.0) && has_decoders(model.config().variant)) {
        auto dec = model.decode(tape, theta);
        if (w.lambda_ri > 0.0) g.parts.ri = reconstruction_loss(tape, z, dec.image);
        if (w.lambda_rt > 0.0) g.parts.rt = reconstruction_loss(tape, q, dec.text);
    }
    g.total = total_loss(tape, g.parts, w);
    return g;
}

/// Owns one training run. Construct fresh or from a checkpoint; `run()`
/// continues until cfg.epochs.
class Trainer {
public:
    Trainer(const TrainConfig& cfg, const FeatureDataset& train, const FeatureDataset* eval = nullptr)
        : cfg_(cfg), train_(train), eval_(eval), model_(cfg.model, derive_seed(cfg.seed, 0)),
          rng_(derive_seed(cfg.seed, 1)), optim_(cfg.learning_rate, cfg.momentum) {
        cfg_.validate();
        check_dims();
        weights_ = resolve_weights(cfg_, train_);
    }

    Trainer(const TrainConfig& cfg, const Checkpoint& ck, const FeatureDataset& train,
            const FeatureDataset* eval = nullptr)
        : cfg_(cfg), train_(train), eval_(eval), model_(model_from_checkpoint<float>(ck)),
          optim_(cfg.learning_rate, cfg.momentum) {
        cfg_.validate();
        if (!(ck.model == cfg_.model)) throw ConfigError("checkpoint model config differs from the training config");
        check_dims();
        weights_ = resolve_weights(cfg_, train_);
        if (!rng_.set_state(ck.rng_state)) throw FormatError("checkpoint rng state is malformed");
        for (const auto& v : ck.velocity) optim_.velocity.push_back(std::vector<float>(v.data.begin(), v.data.end()));
        step_ = ck.step;
        epoch_ = ck.epoch;
    }

    std::size_t epoch() const { return epoch_; }
    std::uint64_t step() const { return step_; }
    Model<float>& model() { return model_; }
    const LossWeights& weights() const { return weights_; }
    const MetricsHistory& history() const { return history_; }

    /// One pass over floor(n / batch_size) shuffled batches.
    EpochRecord run_epoch() {
        const std::size_t n = train_.n, N = cfg_.batch_size;
        std::vector<std::size_t> perm(n);
        for (std::size_t i = 0; i < n; ++i) perm[i] = i;
        for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng_.below(i)]);
        const std::size_t steps = n / N;
        const std::size_t M_base = weights_.base == BaseLoss::ST ? weights_.M : 0;
        const bool sym_st = weights_.base == BaseLoss::ST && weights_.lambda_sym > 0.0;

        double acc[5] = {0, 0, 0, 0, 0};
        const auto params = model_.all();
        for (std::size_t s = 0; s < steps; ++s) {
            Batch batch = make_batch(train_, std::vector<std::size_t>(perm.begin() + s * N, perm.begin() + (s + 1) * N),
                                     M_base, rng_);
            std::vector<std::vector<std::size_t>> sym_neg;
            if (sym_st) sym_neg = sample_batch_negatives(train_, batch, weights_.M, rng_);

            Tape<float> tape;
            StepGraph<float> g;
            try {
                g = build_step_loss(tape, model_, train_, batch, sym_neg, weights_);
                tape.backward(g.total);
            } catch (const NumericError& e) {
                throw NumericError("step " + std::to_string(step_) + ": " + e.what());
            }
            sgd_momentum_step<float>(params, optim_);
            ++step_;

            acc[0] += tape.item(*g.parts.base);
            if (g.parts.sym) acc[1] += tape.item(*g.parts.sym);
            if (g.parts.ri) acc[2] += tape.item(*g.parts.ri);
            if (g.parts.rt) acc[3] += tape.item(*g.parts.rt);
            acc[4] += tape.item(g.total);
            parts_seen_ = {g.parts.sym.has_value(), g.parts.ri.has_value(), g.parts.rt.has_value()};
        }
        ++epoch_;
        EpochRecord rec;
        rec.epoch = epoch_;
        const double denom = steps ? static_cast<double>(steps) : 1.0;
        rec.base = acc[0] / denom;
        if (parts_seen_[0]) rec.sym = acc[1] / denom;
        if (parts_seen_[1]) rec.ri = acc[2] / denom;
        if (parts_seen_[2]) rec.rt = acc[3] / denom;
        rec.total = acc[4] / denom;
        if (epoch_ % cfg_.eval_every == 0 || epoch_ == cfg_.epochs) {
            const FeatureDataset& ds = eval_ ? *eval_ : train_;
            rec.recall = evaluate(model_, ds, cfg_.ks, cfg_.normalize).recall;
        }
        history_.epochs.push_back(rec);
        return rec;
    }

    void run(const std::function<void(const EpochRecord&)>& on_epoch = {}) {
        while (epoch_ < cfg_.epochs) {
            auto rec = run_epoch();
            if (on_epoch) on_epoch(rec);
        }
    }

    Checkpoint checkpoint() const {
        Checkpoint ck;
        ck.model = model_.config();
        ck.train = to_json(cfg_);
        ck.params = export_params(model_);
        const auto names = model_.all();
        for (std::size_t i = 0; i < optim_.velocity.size(); ++i)
            ck.velocity.push_back({names[i]->name, names[i]->value.shape, optim_.velocity[i]});
        ck.step = step_;
        ck.epoch = epoch_;
        ck.rng_state = rng_.state();
        return ck;
    }

private:
    TrainConfig cfg_;
    const FeatureDataset& train_;
    const FeatureDataset* eval_;
    Model<float> model_;
    Rng rng_;
    OptimState<float> optim_;
    LossWeights weights_;
    MetricsHistory history_;
    std::uint64_t step_ = 0;
    std::size_t epoch_ = 0;
    std::array<bool, 3> parts_seen_{false, false, false};

    void check_dims() const {
        const auto& m = cfg_.model;
        if (m.d != train_.d || m.h != train_.h)
            throw ConfigError("model dims (d = " + std::to_string(m.d) + ", h = " + std::to_string(m.h) +
                              ") do not match dataset dims (d = " + std::to_string(train_.d) +
                              ", h = " + std::to_string(train_.h) + ")");
        if (eval_ && (eval_->d != m.d || eval_->h != m.h))
            throw ConfigError("evaluation dataset dims do not match the model");
        if (cfg_.batch_size > train_.n)
            throw ConfigError("batch_size " + std::to_string(cfg_.batch_size) + " exceeds dataset size " +
                              std::to_string(train_.n));
    }
};

inline TrainResult train(const TrainConfig& cfg, const FeatureDataset& train_ds, const FeatureDataset* eval_ds = nullptr,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    Trainer t(cfg, train_ds, eval_ds);
    t.run(on_epoch);
    return {t.checkpoint(), t.history(), t.weights()};
}

/// Continues a run from `ck` up to cfg.epochs.
inline TrainResult resume(const TrainConfig& cfg, const Checkpoint& ck, const FeatureDataset& train_ds,
                          const FeatureDataset* eval_ds = nullptr,
                          const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    Trainer t(cfg, ck, train_ds, eval_ds);
    t.run(on_epoch);
    return {t.checkpoint(), t.history(), t.weights()};
}

struct Summary {
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation; 0 for one value
};

inline Summary summarize(const std::vector<double>& v) {
    Summary s;
    if (v.empty()) return s;
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - s.mean) * (x - s.mean);
        s.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return s;
}

/// Runs cfg.repeats independent runs with seeds cfg.seed + r, up to
/// cfg.threads at a time. Each run owns its model, optimizer, and rng.
inline std::vector<TrainResult> train_repeats(const TrainConfig& cfg, const FeatureDataset& train_ds,
                                              const FeatureDataset* eval_ds = nullptr,
                                              const std::function<void(std::size_t, const EpochRecord&)>& on_epoch = {}) {
    cfg.validate();
    std::vector<std::optional<TrainResult>> results(cfg.repeats);
    std::vector<std::exception_ptr> errors(cfg.repeats);
    std::mutex report;
    auto job = [&](std::size_t r) {
        try {
            TrainConfig c = cfg;
            c.seed = cfg.seed + r;
            results[r] = train(c, train_ds, eval_ds, [&](const EpochRecord& rec) {
                if (!on_epoch) return;
                std::lock_guard lock(report);
                on_epoch(r, rec);
            });
        } catch (...) {
            errors[r] = std::current_exception();
        }
    };
    for (std::size_t start = 0; start < cfg.repeats; start += cfg.threads) {
        const std::size_t end = std::min(cfg.repeats, start + cfg.threads);
        if (end - start == 1) {
            job(start);
        } else {
            std::vector<std::thread> pool;
            for (std::size_t r = start; r < end; ++r) pool.emplace_back(job, r);
            for (auto& t : pool) t.join();
        }
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    std::vector<TrainResult> out;
    for (auto& r : results) out.push_back(std::move(*r));
    return out;
}

/// Mean and standard deviation across runs of the final epoch's metrics.
inline nlohmann::json summarize_runs(const std::vector<TrainResult>& runs, const std::vector<std::size_t>& ks) {
    auto collect = [&](auto get) {
        std::vector<double> v;
        for (const auto& r : runs)
            if (auto x = get(r.history.epochs.back())) v.push_back(*x);
        return v;
    };
    auto entry = [](const std::vector<double>& v) {
        if (v.empty()) return nlohmann::json(nullptr);
        const auto s = summarize(v);
        return nlohmann::json{{"mean", s.mean}, {"std", s.stddev}, {"values", v}};
    };
    nlohmann::json out;
    out["repeats"] = runs.size();
    out["L_BASE"] = entry(collect([](const EpochRecord& e) { return std::optional<double>(e.base); }));
    out["L_SYM"] = entry(collect([](const EpochRecord& e) { return e.sym; }));
    out["L_RI"] = entry(collect([](const EpochRecord& e) { return e.ri; }));
    out["L_RT"] = entry(collect([](const EpochRecord& e) { return e.rt; }));
    out["L_T"] = entry(collect([](const EpochRecord& e) { return std::optional<double>(e.total); }));
    nlohmann::json rec = nlohmann::json::object();
    for (std::size_t i = 0; i < ks.size(); ++i)
        rec["R@" + std::to_string(ks[i])] = entry(collect([i](const EpochRecord& e) {
            return e.recall ? std::optional<double>((*e.recall)[i]) : std::nullopt;
        }));
    out["recall"] = rec;
    return out;
}

}  // namespace composeae
