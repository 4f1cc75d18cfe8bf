#pragma once

// Query composition networks: the complex-rotation encoder with its conjugate
// path and decoders, plus the gated-residual and real-space concatenation
// baselines. Graph builders operate on row batches (one sample per row);
// the value-level helpers at the bottom wrap them for single vectors.

#include <cmath>
#include <complex>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace composeae {

enum class Variant {
    ComposeAE,
    ComposeAENoSym,
    ComposeAEConcat,
    ComposeAENoRhoConv,
    ComposeAENoRho,
    Tirg,
    Concat,
};

inline const std::vector<std::pair<Variant, std::string>>& variant_tokens() {
    static const std::vector<std::pair<Variant, std::string>> tokens = {
        {Variant::ComposeAE, "composeae"},
        {Variant::ComposeAENoSym, "composeae_no_sym"},
        {Variant::ComposeAEConcat, "composeae_concat"},
        {Variant::ComposeAENoRhoConv, "composeae_no_rhoconv"},
        {Variant::ComposeAENoRho, "composeae_no_rho"},
        {Variant::Tirg, "tirg"},
        {Variant::Concat, "concat"},
    };
    return tokens;
}

inline std::string to_string(Variant v) {
    for (const auto& [var, tok] : variant_tokens())
        if (var == v) return tok;
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    for (const auto& [var, tok] : variant_tokens())
        if (tok == s) return var;
    std::string known;
    for (const auto& [var, tok] : variant_tokens()) known += (known.empty() ? "" : ", ") + tok;
    throw ConfigError("unknown variant '" + s + "' (expected one of: " + known + ")");
}

/// Whether the variant composes through the complex rotation.
inline bool uses_rotation(Variant v) {
    return v == Variant::ComposeAE || v == Variant::ComposeAENoSym || v == Variant::ComposeAENoRhoConv ||
           v == Variant::ComposeAENoRho;
}
/// Whether the rotational symmetry term can be trained for this variant.
inline bool supports_symmetry(Variant v) { return uses_rotation(v) && v != Variant::ComposeAENoSym; }
/// Whether the variant trains decoders and reconstruction terms.
inline bool has_decoders(Variant v) { return uses_rotation(v) || v == Variant::ComposeAEConcat; }

struct ModelConfig {
    std::size_t d = 512;  // image feature dim
    std::size_t h = 768;  // text feature dim
    std::size_t k = 512;  // complex dim
    std::size_t gamma_hidden = 512;
    std::size_t eta_hidden = 512;
    std::size_t rho_hidden = 512;
    std::size_t dec_hidden = 512;
    std::size_t rho_conv_hidden = 1024;
    std::size_t rho_conv_length = 16;
    std::size_t rho_conv_channels = 64;
    std::size_t rho_conv_kernel = 3;
    std::size_t baseline_hidden = 512;  // tirg and concat MLPs
    Variant variant = Variant::ComposeAE;

    void validate() const {
        auto positive = [](std::size_t v, const char* name) {
            if (v == 0) throw ConfigError(std::string("model.") + name + " must be positive");
        };
        positive(d, "d");
        positive(h, "h");
        positive(k, "k");
        positive(gamma_hidden, "gamma_hidden");
        positive(eta_hidden, "eta_hidden");
        positive(rho_hidden, "rho_hidden");
        positive(dec_hidden, "dec_hidden");
        positive(rho_conv_hidden, "rho_conv_hidden");
        positive(rho_conv_length, "rho_conv_length");
        positive(rho_conv_channels, "rho_conv_channels");
        positive(rho_conv_kernel, "rho_conv_kernel");
        positive(baseline_hidden, "baseline_hidden");
        if (rho_conv_kernel % 2 == 0) throw ConfigError("model.rho_conv_kernel must be odd");
        if (d % rho_conv_channels != 0)
            throw ConfigError("model.d (" + std::to_string(d) + ") must be divisible by model.rho_conv_channels (" +
                              std::to_string(rho_conv_channels) + ")");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
struct Linear {
    Parameter<T> w;  // (in x out)
    Parameter<T> b;  // (out)
};

template <class T>
struct Mlp {
    Linear<T> l1;
    Linear<T> l2;
};

template <class T>
struct RhoConv {
    Linear<T> fc1;
    Linear<T> fc2;
    Parameter<T> conv_w;  // (channels x channels x kernel)
    Parameter<T> conv_b;
};

/// All learnable weights. Only the members used by the configured variant
/// are allocated; `all()` lists those in a fixed order.
template <class T>
struct ComposeAEParams {
    Mlp<T> gamma, eta, rho;
    RhoConv<T> rho_conv;
    Parameter<T> a, b;
    Mlp<T> dec_img, dec_txt;
    Mlp<T> tirg_gate, tirg_res;
    Parameter<T> w_gate, w_res;
    Mlp<T> concat;
};

namespace detail {

template <class T>
void init_uniform(Parameter<T>& p, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& x : p.value.data) x = static_cast<T>(rng.uniform(-bound, bound));
}

template <class T>
Linear<T> make_linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    Linear<T> l{Parameter<T>(name + ".w", {in, out}), Parameter<T>(name + ".b", {out})};
    init_uniform(l.w, in, rng);
    return l;
}

template <class T>
Mlp<T> make_mlp(const std::string& name, std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
    Mlp<T> m;
    m.l1 = make_linear<T>(name + ".l1", in, hidden, rng);
    m.l2 = make_linear<T>(name + ".l2", hidden, out, rng);
    return m;
}

template <class T>
void push(std::vector<Parameter<T>*>& out, Linear<T>& l) {
    out.push_back(&l.w);
    out.push_back(&l.b);
}
template <class T>
void push(std::vector<Parameter<T>*>& out, Mlp<T>& m) {
    push(out, m.l1);
    push(out, m.l2);
}

}  // namespace detail

template <class T>
class Model {
public:
    Model() = default;

    /// Weights uniform in +-1/sqrt(fan_in), biases 0, a = 1, b = 0.1.
    Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        const auto& c = cfg_;
        auto& p = params_;
        using namespace detail;
        if (uses_rotation(c.variant)) {
            p.gamma = make_mlp<T>("gamma", c.h, c.gamma_hidden, c.k, rng);
            p.eta = make_mlp<T>("eta", c.d, c.eta_hidden, 2 * c.k, rng);
            if (c.variant != Variant::ComposeAENoRho) {
                p.rho = make_mlp<T>("rho", 2 * c.k, c.rho_hidden, c.d, rng);
                p.a = Parameter<T>("a", {});
                p.a.value.data[0] = T{1};
            }
            if (c.variant != Variant::ComposeAENoRhoConv) {
                const std::size_t cat = 2 * c.k + c.d + c.h;
                p.rho_conv.fc1 = make_linear<T>("rho_conv.fc1", cat, c.rho_conv_hidden, rng);
                p.rho_conv.fc2 =
                    make_linear<T>("rho_conv.fc2", c.rho_conv_hidden, c.rho_conv_channels * c.rho_conv_length, rng);
                p.rho_conv.conv_w =
                    Parameter<T>("rho_conv.conv_w", {c.rho_conv_channels, c.rho_conv_channels, c.rho_conv_kernel});
                init_uniform(p.rho_conv.conv_w, c.rho_conv_channels * c.rho_conv_kernel, rng);
                p.rho_conv.conv_b = Parameter<T>("rho_conv.conv_b", {c.rho_conv_channels});
                p.b = Parameter<T>("b", {});
                p.b.value.data[0] = static_cast<T>(0.1);
            }
        } else if (c.variant == Variant::Tirg) {
            p.tirg_gate = make_mlp<T>("tirg.gate", c.d + c.h, c.baseline_hidden, c.d, rng);
            p.tirg_res = make_mlp<T>("tirg.res", c.d + c.h, c.baseline_hidden, c.d, rng);
            p.w_gate = Parameter<T>("tirg.w_gate", {});
            p.w_gate.value.data[0] = T{1};
            p.w_res = Parameter<T>("tirg.w_res", {});
            p.w_res.value.data[0] = T{1};
        } else {
            p.concat = make_mlp<T>("concat", c.d + c.h, c.baseline_hidden, c.d, rng);
        }
        if (has_decoders(c.variant)) {
            p.dec_img = make_mlp<T>("dec_img", c.d, c.dec_hidden, c.d, rng);
            p.dec_txt = make_mlp<T>("dec_txt", c.d, c.dec_hidden, c.h, rng);
        }
    }

    // Parameters hold no self-references, so copies are independent models.
    Model(const Model&) = default;
    Model& operator=(const Model&) = default;

    const ModelConfig& config() const { return cfg_; }
    ComposeAEParams<T>& params() { return params_; }
    const ComposeAEParams<T>& params() const { return params_; }

    /// Active parameters in checkpoint order.
    std::vector<Parameter<T>*> all() {
        using detail::push;
        std::vector<Parameter<T>*> out;
        auto& p = params_;
        const Variant v = cfg_.variant;
        if (uses_rotation(v)) {
            push(out, p.gamma);
            push(out, p.eta);
            if (v != Variant::ComposeAENoRho) {
                push(out, p.rho);
                out.push_back(&p.a);
            }
            if (v != Variant::ComposeAENoRhoConv) {
                push(out, p.rho_conv.fc1);
                push(out, p.rho_conv.fc2);
                out.push_back(&p.rho_conv.conv_w);
                out.push_back(&p.rho_conv.conv_b);
                out.push_back(&p.b);
            }
        } else if (v == Variant::Tirg) {
            push(out, p.tirg_gate);
            push(out, p.tirg_res);
            out.push_back(&p.w_gate);
            out.push_back(&p.w_res);
        } else {
            push(out, p.concat);
        }
        if (has_decoders(v)) {
            push(out, p.dec_img);
            push(out, p.dec_txt);
        }
        return out;
    }

    std::vector<const Parameter<T>*> all() const {
        auto ptrs = const_cast<Model*>(this)->all();
        return {ptrs.begin(), ptrs.end()};
    }

    void zero_grad() {
        for (auto* p : all()) p->zero_grad();
    }

    // ---- graph builders ----------------------------------------------------
    //
    // `trainable` = false binds parameters as constants (inference).

    Var mlp(Tape<T>& tape, Mlp<T>& m, Var x, bool trainable = true) {
        Var h = tape.relu(tape.linear(x, tape.param(m.l1.w, trainable), tape.param(m.l1.b, trainable)));
        return tape.linear(h, tape.param(m.l2.w, trainable), tape.param(m.l2.b, trainable));
    }

    struct Rotation {
        Var theta;  // (N x k) angles
        Var delta;  // (N x 2k) interleaved unit-modulus entries
    };

    /// theta = gamma(q); delta = cos(theta) + j sin(theta), or its conjugate.
    Rotation text_to_rotation(Tape<T>& tape, Var q, bool conjugate = false, bool trainable = true) {
        expect_cols(tape, q, cfg_.h, "text_to_rotation: text features");
        require_rotation("text_to_rotation");
        Var theta = mlp(tape, params_.gamma, q, trainable);
        Var s = tape.sin(theta);
        if (conjugate) s = tape.neg(s);
        return {theta, tape.interleave(tape.cos(theta), s)};
    }

    /// phi = delta (.) eta(x), elementwise complex product.
    Var complex_projection(Tape<T>& tape, Var x, Var q, bool conjugate, bool trainable = true) {
        Rotation r = text_to_rotation(tape, q, conjugate, trainable);
        return tape.complex_mul(r.delta, mlp(tape, params_.eta, x, trainable));
    }

    /// rho_conv(phi, x, q): FC+ReLU, FC+ReLU, reshape to (channels x length),
    /// conv1d with same padding, adaptive max pool to d/channels, flatten.
    Var rho_conv(Tape<T>& tape, Var phi, Var x, Var q, bool trainable = true) {
        auto& rc = params_.rho_conv;
        Var cat = tape.concat_cols({phi, x, q});
        Var h1 = tape.relu(tape.linear(cat, tape.param(rc.fc1.w, trainable), tape.param(rc.fc1.b, trainable)));
        Var h2 = tape.relu(tape.linear(h1, tape.param(rc.fc2.w, trainable), tape.param(rc.fc2.b, trainable)));
        Var conv = tape.conv1d(h2, tape.param(rc.conv_w, trainable), tape.param(rc.conv_b, trainable),
                               cfg_.rho_conv_channels, cfg_.rho_conv_length, (cfg_.rho_conv_kernel - 1) / 2);
        return tape.adaptive_max_pool1d(conv, cfg_.rho_conv_channels, cfg_.d / cfg_.rho_conv_channels);
    }

    /// The a * rho(phi) branch alone; used to check text-invariance at zero angle.
    Var rho_branch(Tape<T>& tape, Var x, Var q, bool conjugate = false, bool trainable = true) {
        require(cfg_.variant != Variant::ComposeAENoRho, "rho_branch: variant has no rho branch");
        Var phi = complex_projection(tape, x, q, conjugate, trainable);
        return tape.scale_by(mlp(tape, params_.rho, phi, trainable), tape.param(params_.a, trainable));
    }

    /// a * rho(phi) + b * rho_conv(phi, x, q) with phi built from x and the
    /// (optionally conjugated) rotation of q.
    Var rotation_compose(Tape<T>& tape, Var x, Var q, bool conjugate, bool trainable = true) {
        require_rotation("compose");
        expect_cols(tape, x, cfg_.d, "compose: image features");
        Var phi = complex_projection(tape, x, q, conjugate, trainable);
        std::optional<Var> out;
        if (cfg_.variant != Variant::ComposeAENoRho)
            out = tape.scale_by(mlp(tape, params_.rho, phi, trainable), tape.param(params_.a, trainable));
        if (cfg_.variant != Variant::ComposeAENoRhoConv) {
            Var conv = tape.scale_by(rho_conv(tape, phi, x, q, trainable), tape.param(params_.b, trainable));
            out = out ? tape.add(*out, conv) : conv;
        }
        return *out;
    }

    /// w_g * (z (.) sigmoid(f_gate([z; q]))) + w_r * f_res([z; q])
    Var tirg_compose(Tape<T>& tape, Var z, Var q, bool trainable = true) {
        require(cfg_.variant == Variant::Tirg, "tirg_compose: model variant is " + to_string(cfg_.variant));
        expect_cols(tape, z, cfg_.d, "tirg_compose: image features");
        expect_cols(tape, q, cfg_.h, "tirg_compose: text features");
        Var cat = tape.concat_cols({z, q});
        Var gate = tape.mul(z, tape.sigmoid(mlp(tape, params_.tirg_gate, cat, trainable)));
        Var res = mlp(tape, params_.tirg_res, cat, trainable);
        return tape.add(tape.scale_by(gate, tape.param(params_.w_gate, trainable)),
                        tape.scale_by(res, tape.param(params_.w_res, trainable)));
    }

    /// Two-layer MLP over [z; q].
    Var concat_compose(Tape<T>& tape, Var z, Var q, bool trainable = true) {
        require(cfg_.variant == Variant::Concat || cfg_.variant == Variant::ComposeAEConcat,
                "concat_compose: model variant is " + to_string(cfg_.variant));
        expect_cols(tape, z, cfg_.d, "concat_compose: image features");
        expect_cols(tape, q, cfg_.h, "concat_compose: text features");
        return mlp(tape, params_.concat, tape.concat_cols({z, q}), trainable);
    }

    /// Composed query embedding for the configured variant.
    Var compose(Tape<T>& tape, Var z, Var q, bool trainable = true) {
        check_finite_input(tape, z, "compose: image features");
        check_finite_input(tape, q, "compose: text features");
        switch (cfg_.variant) {
            case Variant::Tirg: return tirg_compose(tape, z, q, trainable);
            case Variant::Concat:
            case Variant::ComposeAEConcat: return concat_compose(tape, z, q, trainable);
            default: return rotation_compose(tape, z, q, false, trainable);
        }
    }

    /// Same graph as compose with the rotation conjugated and the target
    /// image features in place of the query image.
    Var compose_conjugate(Tape<T>& tape, Var y, Var q, bool trainable = true) {
        check_finite_input(tape, y, "compose_conjugate: image features");
        check_finite_input(tape, q, "compose_conjugate: text features");
        return rotation_compose(tape, y, q, true, trainable);
    }

    struct Decoded {
        Var image;  // (N x d)
        Var text;   // (N x h)
    };

    Decoded decode(Tape<T>& tape, Var theta, bool trainable = true) {
        require(has_decoders(cfg_.variant), "decode: variant " + to_string(cfg_.variant) + " has no decoders");
        expect_cols(tape, theta, cfg_.d, "decode: composed features");
        return {mlp(tape, params_.dec_img, theta, trainable), mlp(tape, params_.dec_txt, theta, trainable)};
    }

private:
    ModelConfig cfg_;
    ComposeAEParams<T> params_;

    void require_rotation(const char* who) const {
        require(uses_rotation(cfg_.variant),
                std::string(who) + ": variant " + to_string(cfg_.variant) + " has no complex rotation");
    }

    static void expect_cols(const Tape<T>& tape, Var v, std::size_t n, const std::string& what) {
        const auto& s = tape.shape(v);
        require(s.size() == 2 && s[1] == n,
                what + " must have " + std::to_string(n) + " columns, got shape " + to_string(s));
    }

    static void check_finite_input(const Tape<T>& tape, Var v, const std::string& what) {
        if (!all_finite<T>(tape.value(v))) throw NumericError(what + " contain non-finite values");
    }
};

// ---- value-level helpers -------------------------------------------------

template <class T>
using ComplexVec = std::vector<std::complex<T>>;

/// out_i = delta_i * v_i
template <class T>
ComplexVec<T> rotate(const ComplexVec<T>& delta, const ComplexVec<T>& v) {
    require(delta.size() == v.size(), "rotate: lengths differ (" + std::to_string(delta.size()) + " vs " +
                                          std::to_string(v.size()) + ")");
    ComplexVec<T> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = delta[i] * v[i];
    return out;
}

template <class T>
ComplexVec<T> conjugate(const ComplexVec<T>& v) {
    ComplexVec<T> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::conj(v[i]);
    return out;
}

/// Unit-modulus rotation e^{j theta} for each angle.
template <class T>
ComplexVec<T> rotation_from_angles(std::span<const T> theta) {
    ComplexVec<T> out(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) out[i] = {std::cos(theta[i]), std::sin(theta[i])};
    return out;
}

template <class T>
ComplexVec<T> from_interleaved(std::span<const T> v) {
    require(v.size() % 2 == 0, "from_interleaved: odd length");
    ComplexVec<T> out(v.size() / 2);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = {v[2 * i], v[2 * i + 1]};
    return out;
}

namespace detail {
template <class T>
Var row(Tape<T>& tape, std::span<const T> v, std::size_t expected, const char* what) {
    require(v.size() == expected, std::string(what) + ": expected length " + std::to_string(expected) + ", got " +
                                      std::to_string(v.size()));
    return tape.constant({1, v.size()}, std::vector<T>(v.begin(), v.end()));
}
}  // namespace detail

template <class T>
std::pair<std::vector<T>, ComplexVec<T>> text_to_rotation(Model<T>& model, std::span<const T> q) {
    Tape<T> tape;
    auto r = model.text_to_rotation(tape, detail::row(tape, q, model.config().h, "text_to_rotation"), false, false);
    auto theta = tape.value(r.theta);
    return {std::vector<T>(theta.begin(), theta.end()), from_interleaved<T>(tape.value(r.delta))};
}

template <class T>
std::vector<T> compose(Model<T>& model, std::span<const T> z, std::span<const T> q) {
    Tape<T> tape;
    const auto& c = model.config();
    Var out = model.compose(tape, detail::row(tape, z, c.d, "compose"), detail::row(tape, q, c.h, "compose"), false);
    auto v = tape.value(out);
    return {v.begin(), v.end()};
}

template <class T>
std::vector<T> compose_conjugate(Model<T>& model, std::span<const T> y, std::span<const T> q) {
    Tape<T> tape;
    const auto& c = model.config();
    Var out = model.compose_conjugate(tape, detail::row(tape, y, c.d, "compose_conjugate"),
                                      detail::row(tape, q, c.h, "compose_conjugate"), false);
    auto v = tape.value(out);
    return {v.begin(), v.end()};
}

template <class T>
std::pair<std::vector<T>, std::vector<T>> decode(Model<T>& model, std::span<const T> theta) {
    Tape<T> tape;
    auto dec = model.decode(tape, detail::row(tape, theta, model.config().d, "decode"), false);
    auto zi = tape.value(dec.image);
    auto qi = tape.value(dec.text);
    return {{zi.begin(), zi.end()}, {qi.begin(), qi.end()}};
}

/// Composes every row of z (n x d) with q (n x h) in chunks, without gradients.
template <class T>
Tensor<T> compose_rows(Model<T>& model, const Tensor<T>& z, const Tensor<T>& q, std::size_t chunk = 256) {
    const auto& c = model.config();
    require(z.shape.size() == 2 && z.shape[1] == c.d, "compose_rows: image features must be (n x d)");
    require(q.shape.size() == 2 && q.shape[1] == c.h, "compose_rows: text features must be (n x h)");
    require(z.shape[0] == q.shape[0], "compose_rows: row counts differ");
    const std::size_t n = z.shape[0];
    Tensor<T> out({n, c.d});
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t len = std::min(chunk, n - start);
        Tape<T> tape;
        Var zv = tape.constant({len, c.d}, std::vector<T>(z.data.begin() + start * c.d,
                                                          z.data.begin() + (start + len) * c.d));
        Var qv = tape.constant({len, c.h}, std::vector<T>(q.data.begin() + start * c.h,
                                                          q.data.begin() + (start + len) * c.h));
        auto v = tape.value(model.compose(tape, zv, qv, false));
        std::copy(v.begin(), v.end(), out.data.begin() + start * c.d);
    }
    return out;
}

}  // namespace composeae
