#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"

namespace composeae {

enum class BaseLoss { SMAX, ST };

inline std::string to_string(BaseLoss b) { return b == BaseLoss::SMAX ? "SMAX" : "ST"; }

inline BaseLoss parse_base_loss(const std::string& s) {
    if (s == "SMAX") return BaseLoss::SMAX;
    if (s == "ST") return BaseLoss::ST;
    throw ConfigError("unknown base loss '" + s + "' (expected SMAX or ST)");
}

struct LossWeights {
    double lambda_sym = 0.1;
    double lambda_ri = 0.01;
    double lambda_rt = 0.01;
    BaseLoss base = BaseLoss::SMAX;
    std::size_t M = 3;  // negatives per sample for the soft-triplet form

    void validate() const {
        auto check = [](double v, const char* name) {
            if (!std::isfinite(v) || v < 0.0)
                throw ConfigError(std::string("weights.") + name + " must be finite and non-negative");
        };
        check(lambda_sym, "lambda_sym");
        check(lambda_ri, "lambda_ri");
        check(lambda_rt, "lambda_rt");
        if (M < 1) throw ConfigError("weights.M must be at least 1");
    }

    friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

/// Loss terms of one step. Terms a run does not compute stay at 0.
template <class V>
struct LossComponents {
    V base{};
    V sym{};
    V ri{};
    V rt{};
};

// ---- graph versions --------------------------------------------------------

/// mean over entries of log(1 + exp(neg - pos)).
template <class T>
Var soft_triplet_loss(Tape<T>& tape, Var pos, Var neg) {
    require(tape.value(pos).size() == tape.value(neg).size(),
            "soft_triplet_loss: " + std::to_string(tape.value(pos).size()) + " positive vs " +
                std::to_string(tape.value(neg).size()) + " negative similarities");
    require(!tape.value(pos).empty(), "soft_triplet_loss: empty input");
    return tape.mean(tape.softplus(tape.sub(neg, pos)));
}

/// Classification over the batch: row i of `sim` holds kappa(theta_i, y_j),
/// the diagonal is the positive, and the denominator includes it.
template <class T>
Var batch_softmax_loss(Tape<T>& tape, Var sim) {
    const auto& s = tape.shape(sim);
    require(s.size() == 2 && s[0] == s[1], "batch_softmax_loss: similarity matrix must be square, got " + to_string(s));
    const std::size_t n = s[0];
    std::vector<std::size_t> diag(n);
    for (std::size_t i = 0; i < n; ++i) diag[i] = i * n + i;
    return tape.neg(tape.mean(tape.gather(tape.log_softmax_rows(sim), std::move(diag))));
}

/// Batch mean of the squared Euclidean norm of (original - reconstructed).
template <class T>
Var reconstruction_loss(Tape<T>& tape, Var original, Var reconstructed) {
    const auto& s = tape.shape(original);
    require(s == tape.shape(reconstructed), "reconstruction_loss: shapes differ " + to_string(s) + " vs " +
                                                to_string(tape.shape(reconstructed)));
    const std::size_t rows = s.size() == 2 ? s[0] : 1;
    Var diff = tape.sub(original, reconstructed);
    return tape.scale(tape.sum(tape.mul(diff, diff)), T{1} / static_cast<T>(rows));
}

/// Similarity of row i of `a` with row i of `b`.
template <class T>
Var row_dot(Tape<T>& tape, Var a, Var b) {
    return tape.row_sum(tape.mul(a, b));
}

/// Soft-triplet loss of each row of `anchors` against the same-index row of
/// `candidates` (positive) and the rows listed in negatives[i] (negatives).
template <class T>
Var soft_triplet_rows(Tape<T>& tape, Var anchors, Var candidates, const std::vector<std::vector<std::size_t>>& negatives) {
    const std::size_t n = tape.shape(anchors).at(0);
    require(negatives.size() == n, "soft_triplet: one negative list per anchor required");
    std::vector<std::size_t> rep, pos_rows, neg_rows;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j : negatives[i]) {
            rep.push_back(i);
            pos_rows.push_back(i);
            neg_rows.push_back(j);
        }
    Var a = tape.take_rows(anchors, rep);
    Var pos = row_dot(tape, a, tape.take_rows(candidates, std::move(pos_rows)));
    Var neg = row_dot(tape, a, tape.take_rows(candidates, std::move(neg_rows)));
    return soft_triplet_loss(tape, pos, neg);
}

/// Rotational symmetry term: conjugate compositions (N x d) against query
/// image features (N x d). SMAX uses the full (N x N) similarity matrix; ST
/// uses `negatives` as row indices into `query_feats`.
template <class T>
Var rotational_symmetry_loss(Tape<T>& tape, Var conj_composed, Var query_feats, BaseLoss base,
                             const std::vector<std::vector<std::size_t>>& negatives = {}) {
    require(tape.shape(conj_composed) == tape.shape(query_feats),
            "rotational_symmetry_loss: shapes differ " + to_string(tape.shape(conj_composed)) + " vs " +
                to_string(tape.shape(query_feats)));
    if (base == BaseLoss::SMAX)
        return batch_softmax_loss(tape, tape.matmul(conj_composed, tape.transpose(query_feats)));
    return soft_triplet_rows(tape, conj_composed, query_feats, negatives);
}

/// L_T = base + lambda_sym * sym + lambda_ri * ri + lambda_rt * rt. Absent
/// components are skipped.
template <class T>
Var total_loss(Tape<T>& tape, const LossComponents<std::optional<Var>>& c, const LossWeights& w) {
    require(c.base.has_value(), "total_loss: base loss is required");
    auto check = [&](const std::optional<Var>& v, const char* name) {
        if (v && !std::isfinite(tape.item(*v)))
            throw NumericError(std::string("loss component ") + name + " is not finite");
    };
    check(c.base, "base");
    check(c.sym, "sym");
    check(c.ri, "ri");
    check(c.rt, "rt");
    Var total = *c.base;
    if (c.sym) total = tape.add(total, tape.scale(*c.sym, static_cast<T>(w.lambda_sym)));
    if (c.ri) total = tape.add(total, tape.scale(*c.ri, static_cast<T>(w.lambda_ri)));
    if (c.rt) total = tape.add(total, tape.scale(*c.rt, static_cast<T>(w.lambda_rt)));
    return total;
}

// ---- value versions ----------------------------------------------------------

template <class T>
T soft_triplet_loss(std::span<const T> pos, std::span<const T> neg) {
    require(pos.size() == neg.size(), "soft_triplet_loss: " + std::to_string(pos.size()) + " positive vs " +
                                          std::to_string(neg.size()) + " negative similarities");
    Tape<T> tape;
    return tape.item(soft_triplet_loss(tape, tape.constant({pos.size()}, {pos.begin(), pos.end()}),
                                       tape.constant({neg.size()}, {neg.begin(), neg.end()})));
}

/// `sim` is row-major (n x n).
template <class T>
T batch_softmax_loss(std::span<const T> sim, std::size_t rows, std::size_t cols) {
    require(rows == cols, "batch_softmax_loss: similarity matrix must be square, got (" + std::to_string(rows) +
                              ", " + std::to_string(cols) + ")");
    require(sim.size() == rows * cols, "batch_softmax_loss: data length does not match shape");
    Tape<T> tape;
    return tape.item(batch_softmax_loss(tape, tape.constant({rows, cols}, {sim.begin(), sim.end()})));
}

/// Both arrays are (rows x dim), row-major.
template <class T>
T reconstruction_loss(std::span<const T> original, std::span<const T> reconstructed, std::size_t rows) {
    require(original.size() == reconstructed.size(), "reconstruction_loss: lengths differ (" +
                                                         std::to_string(original.size()) + " vs " +
                                                         std::to_string(reconstructed.size()) + ")");
    require(rows > 0 && original.size() % rows == 0, "reconstruction_loss: length not divisible by row count");
    Tape<T> tape;
    const Shape s{rows, original.size() / rows};
    return tape.item(reconstruction_loss(tape, tape.constant(s, {original.begin(), original.end()}),
                                         tape.constant(s, {reconstructed.begin(), reconstructed.end()})));
}

inline double total_loss(const LossComponents<double>& c, const LossWeights& w) {
    auto check = [](double v, const char* name) {
        if (!std::isfinite(v)) throw NumericError(std::string("loss component ") + name + " is not finite");
    };
    check(c.base, "base");
    check(c.sym, "sym");
    check(c.ri, "ri");
    check(c.rt, "rt");
    return c.base + w.lambda_sym * c.sym + w.lambda_ri * c.ri + w.lambda_rt * c.rt;
}

}  // namespace composeae
