#pragma once

#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace composeae {

/// Velocity buffers for SGD with momentum, one per parameter.
template <class T>
struct OptimState {
    std::vector<std::vector<T>> velocity;
    double learning_rate = 1e-2;
    double momentum = 0.9;

    OptimState() = default;
    OptimState(double lr, double mom) : learning_rate(lr), momentum(mom) {
        if (!(lr > 0.0)) throw ConfigError("learning_rate must be positive");
        if (!(mom >= 0.0 && mom < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    }
};

/// v <- momentum * v + g;  p <- p - lr * v.
///
/// Velocity buffers are created (zeroed) on first use. `params` and `grads`
/// are parallel arrays.
template <class T>
void sgd_momentum_step(std::vector<std::vector<T>*> params, const std::vector<const std::vector<T>*>& grads,
                       OptimState<T>& state) {
    require(params.size() == grads.size(), "sgd_momentum_step: " + std::to_string(params.size()) +
                                               " parameters but " + std::to_string(grads.size()) + " gradients");
    if (state.velocity.empty())
        for (auto* p : params) state.velocity.emplace_back(p->size(), T{});
    require(state.velocity.size() == params.size(), "sgd_momentum_step: velocity count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i)
        require(params[i]->size() == grads[i]->size() && params[i]->size() == state.velocity[i].size(),
                "sgd_momentum_step: shape mismatch at parameter " + std::to_string(i));

    const T mom = static_cast<T>(state.momentum);
    const T lr = static_cast<T>(state.learning_rate);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i];
        const auto& g = *grads[i];
        auto& v = state.velocity[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            v[j] = mom * v[j] + g[j];
            p[j] -= lr * v[j];
        }
    }
}

/// Convenience overload stepping a list of Parameters with their own grads.
template <class T>
void sgd_momentum_step(const std::vector<Parameter<T>*>& params, OptimState<T>& state) {
    std::vector<std::vector<T>*> values;
    std::vector<const std::vector<T>*> grads;
    for (auto* p : params) {
        values.push_back(&p->value.data);
        grads.push_back(&p->grad);
    }
    sgd_momentum_step<T>(values, grads, state);
}

}  // namespace composeae
