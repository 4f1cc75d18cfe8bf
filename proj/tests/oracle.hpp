#pragma once

// Straight-line scalar re-implementations of the model's forward pass, for
// one sample at a time. Written against the parameter layout only (linear
// weights are in x out, row-major; conv weights are out x in x kernel).

#include <algorithm>
#include <cmath>
#include <vector>

#include <composeae/model.hpp>

namespace oracle {

using Vec = std::vector<double>;
using composeae::Model;
using composeae::Parameter;

inline Vec affine(const Vec& x, const Parameter<double>& w, const Parameter<double>& b) {
    const std::size_t in = w.value.shape[0], out = w.value.shape[1];
    Vec y(out);
    for (std::size_t j = 0; j < out; ++j) {
        double s = b.value.data[j];
        for (std::size_t i = 0; i < in; ++i) s += x[i] * w.value.data[i * out + j];
        y[j] = s;
    }
    return y;
}

inline Vec relu(Vec v) {
    for (auto& x : v) x = x > 0.0 ? x : 0.0;
    return v;
}

inline Vec mlp(const composeae::Mlp<double>& m, const Vec& x) {
    return affine(relu(affine(x, m.l1.w, m.l1.b)), m.l2.w, m.l2.b);
}

inline Vec cat(std::initializer_list<const Vec*> parts) {
    Vec out;
    for (const Vec* p : parts) out.insert(out.end(), p->begin(), p->end());
    return out;
}

/// delta (.) eta(x), interleaved; delta conjugated on request.
inline Vec projection(Model<double>& model, const Vec& x, const Vec& q, bool conj) {
    const auto& p = model.params();
    const Vec theta = mlp(p.gamma, q);
    const Vec e = mlp(p.eta, x);
    Vec phi(e.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double c = std::cos(theta[i]);
        const double s = conj ? -std::sin(theta[i]) : std::sin(theta[i]);
        const double re = e[2 * i], im = e[2 * i + 1];
        phi[2 * i] = c * re - s * im;
        phi[2 * i + 1] = c * im + s * re;
    }
    return phi;
}

inline Vec rho_conv(Model<double>& model, const Vec& phi, const Vec& x, const Vec& q) {
    const auto& cfg = model.config();
    const auto& rc = model.params().rho_conv;
    const Vec h = relu(affine(relu(affine(cat({&phi, &x, &q}), rc.fc1.w, rc.fc1.b)), rc.fc2.w, rc.fc2.b));
    const std::size_t C = cfg.rho_conv_channels, L = cfg.rho_conv_length, K = cfg.rho_conv_kernel;
    const long pad = static_cast<long>(K / 2);
    Vec conv(C * L);
    for (std::size_t o = 0; o < C; ++o)
        for (std::size_t t = 0; t < L; ++t) {
            double s = rc.conv_b.value.data[o];
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t k = 0; k < K; ++k) {
                    const long pos = static_cast<long>(t + k) - pad;
                    if (pos < 0 || pos >= static_cast<long>(L)) continue;
                    s += rc.conv_w.value.data[(o * C + c) * K + k] * h[c * L + static_cast<std::size_t>(pos)];
                }
            conv[o * L + t] = s;
        }
    const std::size_t P = cfg.d / C;
    Vec out(C * P);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < P; ++i) {
            const std::size_t lo = static_cast<std::size_t>(std::floor(double(i * L) / double(P)));
            const std::size_t hi = static_cast<std::size_t>(std::ceil(double((i + 1) * L) / double(P)));
            double m = conv[c * L + lo];
            for (std::size_t t = lo; t < hi; ++t) m = std::max(m, conv[c * L + t]);
            out[c * P + i] = m;
        }
    return out;
}

inline Vec rotation_compose(Model<double>& model, const Vec& x, const Vec& q, bool conj) {
    using composeae::Variant;
    const auto& p = model.params();
    const Variant v = model.config().variant;
    const Vec phi = projection(model, x, q, conj);
    Vec out(model.config().d, 0.0);
    if (v != Variant::ComposeAENoRho) {
        const Vec r = mlp(p.rho, phi);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += p.a.value.data[0] * r[i];
    }
    if (v != Variant::ComposeAENoRhoConv) {
        const Vec r = rho_conv(model, phi, x, q);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += p.b.value.data[0] * r[i];
    }
    return out;
}

inline Vec tirg(Model<double>& model, const Vec& z, const Vec& q) {
    const auto& p = model.params();
    const Vec zq = cat({&z, &q});
    const Vec g = mlp(p.tirg_gate, zq);
    const Vec r = mlp(p.tirg_res, zq);
    Vec out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i)
        out[i] = p.w_gate.value.data[0] * z[i] / (1.0 + std::exp(-g[i])) + p.w_res.value.data[0] * r[i];
    return out;
}

inline Vec concat(Model<double>& model, const Vec& z, const Vec& q) {
    return mlp(model.params().concat, cat({&z, &q}));
}

inline Vec compose(Model<double>& model, const Vec& z, const Vec& q) {
    using composeae::Variant;
    switch (model.config().variant) {
        case Variant::Tirg: return tirg(model, z, q);
        case Variant::Concat:
        case Variant::ComposeAEConcat: return concat(model, z, q);
        default: return rotation_compose(model, z, q, false);
    }
}

inline Vec compose_conjugate(Model<double>& model, const Vec& y, const Vec& q) {
    return rotation_compose(model, y, q, true);
}

inline std::pair<Vec, Vec> decode(Model<double>& model, const Vec& theta) {
    return {mlp(model.params().dec_img, theta), mlp(model.params().dec_txt, theta)};
}

}  // namespace oracle
