#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"

namespace composeae {

/// |a - n| / max(1e-8, |a| + |n|)
inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Builds a scalar on a fresh tape from an input leaf holding `x`.
template <class T>
using ScalarFn = std::function<Var(Tape<T>&, Var)>;

/// Max relative error between the tape gradient of `f` at `point` and central
/// differences with step `eps`.
template <class T>
double grad_check(const ScalarFn<T>& f, const std::vector<T>& point, T eps, Shape shape = {}) {
    require(eps > T{0}, "grad_check: eps must be positive");
    if (shape.empty()) shape = {point.size()};

    auto eval = [&](const std::vector<T>& x) {
        Tape<T> tape;
        Var in = tape.constant(shape, x);
        const T v = tape.item(f(tape, in));
        if (!std::isfinite(v)) throw NumericError("grad_check: function returned a non-finite value");
        return v;
    };

    Tape<T> tape;
    Var in = tape.input(shape, point);
    Var out = f(tape, in);
    if (!std::isfinite(tape.item(out))) throw NumericError("grad_check: function returned a non-finite value");
    tape.backward(out);
    std::vector<T> analytic(point.size(), T{});
    if (!tape.grad(in).empty()) std::copy(tape.grad(in).begin(), tape.grad(in).end(), analytic.begin());

    double worst = 0.0;
    std::vector<T> x = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        x[i] = point[i] + eps;
        const T fp = eval(x);
        x[i] = point[i] - eps;
        const T fm = eval(x);
        x[i] = point[i];
        const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * eps);
        worst = std::max(worst, relative_error(analytic[i], numeric));
    }
    return worst;
}

/// Same check over model parameters. `build` must bind every parameter it
/// uses via tape.param(). `stride` > 1 checks every stride-th coordinate of
/// each parameter, which keeps large graphs affordable.
template <class T>
double grad_check_params(const std::function<Var(Tape<T>&)>& build, const std::vector<Parameter<T>*>& params,
                         T eps, std::size_t stride = 1) {
    require(eps > T{0}, "grad_check_params: eps must be positive");
    require(stride >= 1, "grad_check_params: stride must be >= 1");
    auto eval = [&] {
        Tape<T> tape;
        const T v = tape.item(build(tape));
        if (!std::isfinite(v)) throw NumericError("grad_check: function returned a non-finite value");
        return v;
    };
    for (auto* p : params) p->zero_grad();
    {
        Tape<T> tape;
        Var out = build(tape);
        tape.backward(out);
    }
    double worst = 0.0;
    for (auto* p : params) {
        const std::vector<T> analytic = p->grad;
        for (std::size_t i = 0; i < p->value.size(); i += stride) {
            const T orig = p->value.data[i];
            p->value.data[i] = orig + eps;
            const T fp = eval();
            p->value.data[i] = orig - eps;
            const T fm = eval();
            p->value.data[i] = orig;
            const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * eps);
            worst = std::max(worst, relative_error(analytic[i], numeric));
        }
    }
    return worst;
}

}  // namespace composeae
