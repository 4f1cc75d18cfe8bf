#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"

namespace composeae {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

/// Dense row-major array. The empty shape denotes a scalar.
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T{}) : shape(std::move(s)), data(numel(shape), fill) {}
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        require(numel(shape) == data.size(),
                "tensor data length " + std::to_string(data.size()) + " does not match shape " +
                    to_string(shape));
    }

    std::size_t size() const { return data.size(); }
    std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : data.size() / shape[0]; }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

template <class T>
bool all_finite(std::span<const T> v) {
    for (T x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

/// A named learnable array plus its gradient buffer.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    std::vector<T> grad;

    Parameter() = default;
    Parameter(std::string n, Shape s) : name(std::move(n)), value(std::move(s)), grad(value.size()) {
        value.requires_grad = true;
    }

    void zero_grad() { std::fill(grad.begin(), grad.end(), T{}); }
};

}  // namespace composeae
