#pragma once

// Eager reverse-mode differentiation over dense row-major arrays.
//
// Every operation computes its value immediately and appends a node to the
// tape. `backward` walks the tape from the loss node down to index 0, which is
// a reverse topological order because inputs always precede their consumers.
// Gradient buffers are only allocated for nodes that depend on a leaf with
// requires_grad set.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace composeae {

enum class Op {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Neg,
    Scale,
    ScaleBy,
    AddRow,
    Relu,
    Exp,
    Log,
    Sin,
    Cos,
    Sigmoid,
    Softplus,
    Sum,
    Mean,
    RowSum,
    LogSoftmaxRows,
    ConcatCols,
    Interleave,
    ComplexMul,
    Gather,
    TakeRows,
    Conv1d,
    AdaptiveMaxPool1d,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Neg: return "neg";
        case Op::Scale: return "scale";
        case Op::ScaleBy: return "scale_by";
        case Op::AddRow: return "add_row";
        case Op::Relu: return "relu";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Sin: return "sin";
        case Op::Cos: return "cos";
        case Op::Sigmoid: return "sigmoid";
        case Op::Softplus: return "softplus";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
        case Op::RowSum: return "row_sum";
        case Op::LogSoftmaxRows: return "log_softmax_rows";
        case Op::ConcatCols: return "concat_cols";
        case Op::Interleave: return "interleave";
        case Op::ComplexMul: return "complex_mul";
        case Op::Gather: return "gather";
        case Op::TakeRows: return "take_rows";
        case Op::Conv1d: return "conv1d";
        case Op::AdaptiveMaxPool1d: return "adaptive_max_pool1d";
    }
    return "?";
}

/// Handle to a node on a tape.
struct Var {
    std::size_t id = 0;
};

template <class T>
class Tape {
public:
    struct Node {
        Op op = Op::Leaf;
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad;
        bool requires_grad = false;
        std::vector<std::size_t> inputs;
        std::vector<std::size_t> index;  // gather positions, argmax, column widths
        std::size_t dim[4] = {0, 0, 0, 0};
        T scalar = T{};
        Parameter<T>* param = nullptr;
    };

    // ---- leaves --------------------------------------------------------

    Var constant(Shape shape, std::vector<T> data) {
        require(numel(shape) == data.size(), "constant: data length does not match shape");
        return push_leaf(std::move(shape), std::move(data), false);
    }
    Var constant(const Tensor<T>& t) { return constant(t.shape, t.data); }
    Var scalar(T v) { return constant({}, {v}); }

    /// Leaf that receives a gradient; read it back with grad().
    Var input(Shape shape, std::vector<T> data) {
        require(numel(shape) == data.size(), "input: data length does not match shape");
        return push_leaf(std::move(shape), std::move(data), true);
    }

    /// Leaf bound to a parameter. Binding the same parameter twice returns
    /// the same node, so shared weights accumulate a single gradient.
    Var param(Parameter<T>& p, bool trainable = true) {
        if (auto it = bound_.find(&p); it != bound_.end()) return Var{it->second};
        Var v = push_leaf(p.value.shape, p.value.data, trainable);
        nodes_[v.id].param = &p;
        bound_.emplace(&p, v.id);
        return v;
    }

    // ---- accessors -----------------------------------------------------

    std::size_t size() const { return nodes_.size(); }
    const Node& node(Var v) const { return nodes_.at(v.id); }
    const Shape& shape(Var v) const { return nodes_.at(v.id).shape; }
    std::span<const T> value(Var v) const { return nodes_.at(v.id).value; }
    T item(Var v) const {
        require(nodes_.at(v.id).value.size() == 1, "item: node is not scalar");
        return nodes_[v.id].value[0];
    }
    Tensor<T> tensor(Var v) const { return Tensor<T>(shape(v), nodes_.at(v.id).value); }
    /// Empty when the node never received a gradient.
    std::span<const T> grad(Var v) const { return nodes_.at(v.id).grad; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

    // ---- linear algebra ------------------------------------------------

    /// (m x k) . (k x n) -> (m x n)
    Var matmul(Var a, Var b) {
        const auto [m, k] = mat_dims(a, "matmul");
        const auto [k2, n] = mat_dims(b, "matmul");
        require(k == k2, "matmul: inner dimensions differ (" + std::to_string(k) + " vs " +
                             std::to_string(k2) + ")");
        std::vector<T> out(m * n, T{});
        const T* A = val(a);
        const T* B = val(b);
        for (std::size_t i = 0; i < m; ++i) {
            T* o = out.data() + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const T s = A[i * k + p];
                const T* br = B + p * n;
                for (std::size_t j = 0; j < n; ++j) o[j] += s * br[j];
            }
        }
        return push(Op::MatMul, {m, n}, std::move(out), {a.id, b.id});
    }

    Var transpose(Var a) {
        const auto [m, n] = mat_dims(a, "transpose");
        std::vector<T> out(m * n);
        const T* A = val(a);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
        return push(Op::Transpose, {n, m}, std::move(out), {a.id});
    }

    /// x . W + b for x (m x in), W (in x out), b (out).
    Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

    // ---- elementwise ---------------------------------------------------

    Var add(Var a, Var b) { return binary(Op::Add, a, b, [](T x, T y) { return x + y; }); }
    Var sub(Var a, Var b) { return binary(Op::Sub, a, b, [](T x, T y) { return x - y; }); }
    Var mul(Var a, Var b) { return binary(Op::Mul, a, b, [](T x, T y) { return x * y; }); }
    Var neg(Var a) { return unary(Op::Neg, a, [](T x) { return -x; }); }

    /// Multiply by a fixed constant.
    Var scale(Var a, T c) {
        Var v = unary(Op::Scale, a, [c](T x) { return c * x; });
        nodes_[v.id].scalar = c;
        return v;
    }

    /// Multiply every entry of `a` by the single entry of `s`.
    Var scale_by(Var a, Var s) {
        require(nodes_[s.id].value.size() == 1, "scale_by: scale factor must have one element");
        const T c = nodes_[s.id].value[0];
        std::vector<T> out(nodes_[a.id].value);
        for (T& x : out) x *= c;
        return push(Op::ScaleBy, nodes_[a.id].shape, std::move(out), {a.id, s.id});
    }

    /// Adds a length-n vector to every row of an (m x n) matrix.
    Var add_row(Var a, Var b) {
        const auto [m, n] = mat_dims(a, "add_row");
        require(nodes_[b.id].value.size() == n, "add_row: bias length " +
                                                    std::to_string(nodes_[b.id].value.size()) +
                                                    " does not match " + std::to_string(n) + " columns");
        std::vector<T> out(nodes_[a.id].value);
        const T* B = val(b);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += B[j];
        return push(Op::AddRow, nodes_[a.id].shape, std::move(out), {a.id, b.id});
    }

    /// Subgradient at 0 is 0.
    Var relu(Var a) { return unary(Op::Relu, a, [](T x) { return x > T{0} ? x : T{0}; }); }
    Var exp(Var a) { return unary(Op::Exp, a, [](T x) { return std::exp(x); }); }
    Var log(Var a) { return unary(Op::Log, a, [](T x) { return std::log(x); }); }
    Var sin(Var a) { return unary(Op::Sin, a, [](T x) { return std::sin(x); }); }
    Var cos(Var a) { return unary(Op::Cos, a, [](T x) { return std::cos(x); }); }
    Var sigmoid(Var a) { return unary(Op::Sigmoid, a, [](T x) { return sigmoid_value(x); }); }
    /// log(1 + e^x), evaluated without overflow.
    Var softplus(Var a) { return unary(Op::Softplus, a, [](T x) { return softplus_value(x); }); }

    // ---- reductions ----------------------------------------------------

    Var sum(Var a) {
        T s{};
        for (T x : nodes_[a.id].value) s += x;
        return push(Op::Sum, {}, {s}, {a.id});
    }

    Var mean(Var a) {
        const auto n = nodes_[a.id].value.size();
        require(n > 0, "mean: empty input");
        T s{};
        for (T x : nodes_[a.id].value) s += x;
        return push(Op::Mean, {}, {s / static_cast<T>(n)}, {a.id});
    }

    /// (m x n) -> (m)
    Var row_sum(Var a) {
        const auto [m, n] = mat_dims(a, "row_sum");
        std::vector<T> out(m, T{});
        const T* A = val(a);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[i] += A[i * n + j];
        return push(Op::RowSum, {m}, std::move(out), {a.id});
    }

    /// Row-wise log-softmax with max subtraction.
    Var log_softmax_rows(Var a) {
        const auto [m, n] = mat_dims(a, "log_softmax_rows");
        require(n > 0, "log_softmax_rows: empty rows");
        std::vector<T> out(m * n);
        const T* A = val(a);
        for (std::size_t i = 0; i < m; ++i) {
            const T* r = A + i * n;
            const T mx = *std::max_element(r, r + n);
            T s{};
            for (std::size_t j = 0; j < n; ++j) s += std::exp(r[j] - mx);
            const T lse = mx + std::log(s);
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] = r[j] - lse;
        }
        return push(Op::LogSoftmaxRows, {m, n}, std::move(out), {a.id});
    }

    // ---- structural ----------------------------------------------------

    /// Horizontal concatenation of matrices with equal row counts.
    Var concat_cols(const std::vector<Var>& parts) {
        require(!parts.empty(), "concat_cols: no inputs");
        const std::size_t m = mat_dims(parts[0], "concat_cols").first;
        std::vector<std::size_t> widths;
        std::vector<std::size_t> ids;
        std::size_t total = 0;
        for (Var p : parts) {
            const auto [pm, pn] = mat_dims(p, "concat_cols");
            require(pm == m, "concat_cols: row counts differ");
            widths.push_back(pn);
            ids.push_back(p.id);
            total += pn;
        }
        std::vector<T> out(m * total);
        for (std::size_t i = 0; i < m; ++i) {
            std::size_t off = 0;
            for (std::size_t q = 0; q < parts.size(); ++q) {
                const T* src = val(parts[q]) + i * widths[q];
                std::copy(src, src + widths[q], out.data() + i * total + off);
                off += widths[q];
            }
        }
        Var v = push(Op::ConcatCols, {m, total}, std::move(out), std::move(ids));
        nodes_[v.id].index = std::move(widths);
        return v;
    }

    /// (m x k), (m x k) -> (m x 2k) as [re0, im0, re1, im1, ...].
    Var interleave(Var re, Var im) {
        const auto [m, k] = mat_dims(re, "interleave");
        require(nodes_[im.id].shape == nodes_[re.id].shape, "interleave: shapes differ");
        std::vector<T> out(2 * m * k);
        const T* R = val(re);
        const T* I = val(im);
        for (std::size_t i = 0; i < m * k; ++i) {
            out[2 * i] = R[i];
            out[2 * i + 1] = I[i];
        }
        return push(Op::Interleave, {m, 2 * k}, std::move(out), {re.id, im.id});
    }

    /// Elementwise complex product of interleaved (m x 2k) operands.
    Var complex_mul(Var x, Var y) {
        const auto [m, w] = mat_dims(x, "complex_mul");
        require(w % 2 == 0, "complex_mul: odd column count " + std::to_string(w));
        require(nodes_[y.id].shape == nodes_[x.id].shape, "complex_mul: shapes differ");
        std::vector<T> out(m * w);
        const T* X = val(x);
        const T* Y = val(y);
        for (std::size_t i = 0; i < m * w; i += 2) {
            out[i] = X[i] * Y[i] - X[i + 1] * Y[i + 1];
            out[i + 1] = X[i] * Y[i + 1] + X[i + 1] * Y[i];
        }
        return push(Op::ComplexMul, {m, w}, std::move(out), {x.id, y.id});
    }

    /// Picks entries by flat position; result is 1-D.
    Var gather(Var a, std::vector<std::size_t> positions) {
        const auto& src = nodes_[a.id].value;
        std::vector<T> out(positions.size());
        for (std::size_t i = 0; i < positions.size(); ++i) {
            require(positions[i] < src.size(), "gather: position out of range");
            out[i] = src[positions[i]];
        }
        Var v = push(Op::Gather, {positions.size()}, std::move(out), {a.id});
        nodes_[v.id].index = std::move(positions);
        return v;
    }

    /// Row selection (with repetition) from an (m x n) matrix.
    Var take_rows(Var a, std::vector<std::size_t> rows) {
        const auto [m, n] = mat_dims(a, "take_rows");
        std::vector<T> out(rows.size() * n);
        const T* A = val(a);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            require(rows[i] < m, "take_rows: row out of range");
            std::copy(A + rows[i] * n, A + rows[i] * n + n, out.data() + i * n);
        }
        Var v = push(Op::TakeRows, {rows.size(), n}, std::move(out), {a.id});
        nodes_[v.id].index = std::move(rows);
        return v;
    }

    /// Batched 1-D convolution. `x` is (batch x in_ch*length), channel-major
    /// per row; `w` is (out_ch x in_ch x kernel); `b` is (out_ch). Stride 1.
    Var conv1d(Var x, Var w, Var b, std::size_t in_ch, std::size_t length, std::size_t pad) {
        const auto [batch, width] = mat_dims(x, "conv1d");
        require(width == in_ch * length, "conv1d: row width " + std::to_string(width) +
                                             " != in_ch*length " + std::to_string(in_ch * length));
        const auto& ws = nodes_[w.id].shape;
        require(ws.size() == 3 && ws[1] == in_ch, "conv1d: weight must be (out, in, kernel)");
        const std::size_t out_ch = ws[0], kernel = ws[2];
        require(nodes_[b.id].value.size() == out_ch, "conv1d: bias length mismatch");
        require(length + 2 * pad >= kernel, "conv1d: kernel longer than padded input");
        const std::size_t out_len = length + 2 * pad - kernel + 1;
        std::vector<T> out(batch * out_ch * out_len);
        const T* X = val(x);
        const T* W = val(w);
        const T* B = val(b);
        for (std::size_t n = 0; n < batch; ++n) {
            for (std::size_t o = 0; o < out_ch; ++o) {
                T* dst = out.data() + (n * out_ch + o) * out_len;
                std::fill(dst, dst + out_len, B[o]);
                for (std::size_t c = 0; c < in_ch; ++c) {
                    const T* src = X + (n * in_ch + c) * length;
                    const T* wk = W + (o * in_ch + c) * kernel;
                    for (std::size_t t = 0; t < out_len; ++t) {
                        T acc{};
                        for (std::size_t q = 0; q < kernel; ++q) {
                            const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t + q) -
                                                       static_cast<std::ptrdiff_t>(pad);
                            if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(length))
                                acc += wk[q] * src[pos];
                        }
                        dst[t] += acc;
                    }
                }
            }
        }
        Var v = push(Op::Conv1d, {batch, out_ch * out_len}, std::move(out), {x.id, w.id, b.id});
        auto& nd = nodes_[v.id];
        nd.dim[0] = in_ch;
        nd.dim[1] = length;
        nd.dim[2] = pad;
        nd.dim[3] = out_len;
        return v;
    }

    /// Adaptive max pooling of each channel from `length` to `out_len`.
    /// Window i spans [floor(i*L/P), ceil((i+1)*L/P)).
    Var adaptive_max_pool1d(Var x, std::size_t channels, std::size_t out_len) {
        const auto [batch, width] = mat_dims(x, "adaptive_max_pool1d");
        require(channels > 0 && width % channels == 0, "adaptive_max_pool1d: width not divisible by channels");
        require(out_len > 0, "adaptive_max_pool1d: output length must be positive");
        const std::size_t length = width / channels;
        std::vector<T> out(batch * channels * out_len);
        std::vector<std::size_t> arg(out.size());
        const T* X = val(x);
        for (std::size_t r = 0; r < batch * channels; ++r) {
            const T* src = X + r * length;
            for (std::size_t i = 0; i < out_len; ++i) {
                const std::size_t lo = (i * length) / out_len;
                const std::size_t hi = ((i + 1) * length + out_len - 1) / out_len;
                std::size_t best = lo;
                for (std::size_t t = lo + 1; t < hi; ++t)
                    if (src[t] > src[best]) best = t;
                out[r * out_len + i] = src[best];
                arg[r * out_len + i] = r * length + best;
            }
        }
        Var v = push(Op::AdaptiveMaxPool1d, {batch, channels * out_len}, std::move(out), {x.id});
        nodes_[v.id].index = std::move(arg);
        return v;
    }

    // ---- backward ------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient and
    /// copies leaf gradients into the bound parameters' grad buffers
    /// (parameters the loss does not reach get zero). Forward values are left
    /// untouched. Throws NumericError naming the first node whose gradient
    /// is not finite.
    void backward(Var loss) {
        require(loss.id < nodes_.size(), "backward: unknown node");
        require(nodes_[loss.id].value.size() == 1,
                "backward: loss must be scalar, got shape " + to_string(nodes_[loss.id].shape));
        for (auto& nd : nodes_) nd.grad.clear();
        if (nodes_[loss.id].requires_grad) {
            nodes_[loss.id].grad.assign(1, T{1});
            for (std::size_t id = loss.id + 1; id-- > 0;) {
                Node& nd = nodes_[id];
                if (nd.grad.empty()) continue;
                if (!all_finite<T>(nd.grad))
                    throw NumericError("non-finite gradient at node " + std::to_string(id) + " (" +
                                       op_name(nd.op) + ")");
                propagate(id);
            }
        }
        for (auto& [p, id] : bound_) {
            const Node& nd = nodes_[id];
            p->grad.assign(p->value.size(), T{});
            if (!nd.grad.empty()) std::copy(nd.grad.begin(), nd.grad.end(), p->grad.begin());
        }
    }

    static T sigmoid_value(T x) {
        if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
        const T e = std::exp(x);
        return e / (T{1} + e);
    }

    static T softplus_value(T x) {
        return std::max(x, T{0}) + std::log1p(std::exp(-std::abs(x)));
    }

private:
    std::vector<Node> nodes_;
    std::unordered_map<Parameter<T>*, std::size_t> bound_;

    const T* val(Var v) const { return nodes_[v.id].value.data(); }

    std::pair<std::size_t, std::size_t> mat_dims(Var v, const char* who) const {
        require(v.id < nodes_.size(), std::string(who) + ": unknown node");
        const auto& s = nodes_[v.id].shape;
        require(s.size() == 2, std::string(who) + ": expected a matrix, got shape " + to_string(s));
        return {s[0], s[1]};
    }

    Var push_leaf(Shape shape, std::vector<T> data, bool requires_grad) {
        Node nd;
        nd.shape = std::move(shape);
        nd.value = std::move(data);
        nd.requires_grad = requires_grad;
        nodes_.push_back(std::move(nd));
        return Var{nodes_.size() - 1};
    }

    Var push(Op op, Shape shape, std::vector<T> value, std::vector<std::size_t> inputs) {
        Node nd;
        nd.op = op;
        nd.shape = std::move(shape);
        nd.value = std::move(value);
        for (auto i : inputs) nd.requires_grad = nd.requires_grad || nodes_[i].requires_grad;
        nd.inputs = std::move(inputs);
        nodes_.push_back(std::move(nd));
        return Var{nodes_.size() - 1};
    }

    template <class F>
    Var unary(Op op, Var a, F f) {
        std::vector<T> out(nodes_[a.id].value.size());
        std::transform(nodes_[a.id].value.begin(), nodes_[a.id].value.end(), out.begin(), f);
        return push(op, nodes_[a.id].shape, std::move(out), {a.id});
    }

    template <class F>
    Var binary(Op op, Var a, Var b, F f) {
        require(nodes_[a.id].shape == nodes_[b.id].shape,
                std::string(op_name(op)) + ": shapes differ " + to_string(nodes_[a.id].shape) +
                    " vs " + to_string(nodes_[b.id].shape));
        const auto& x = nodes_[a.id].value;
        const auto& y = nodes_[b.id].value;
        std::vector<T> out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[i]);
        return push(op, nodes_[a.id].shape, std::move(out), {a.id, b.id});
    }

    /// Gradient buffer of input `id`, or nullptr if it does not need one.
    T* sink(std::size_t id) {
        Node& nd = nodes_[id];
        if (!nd.requires_grad) return nullptr;
        if (nd.grad.empty()) nd.grad.assign(nd.value.size(), T{});
        return nd.grad.data();
    }

    void propagate(std::size_t id) {
        const Node& nd = nodes_[id];
        const Op op = nd.op;
        if (op == Op::Leaf) return;
        const std::vector<std::size_t> in = nd.inputs;
        const T* g = nd.grad.data();
        const T* out = nd.value.data();
        const std::size_t len = nd.value.size();

        switch (op) {
            case Op::Leaf: break;
            case Op::MatMul: {
                const auto [m, k] = mat_dims(Var{in[0]}, "matmul");
                const std::size_t n = nd.shape[1];
                const T* A = val(Var{in[0]});
                const T* B = val(Var{in[1]});
                if (T* dA = sink(in[0])) {
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                            T acc{};
                            const T* gr = g + i * n;
                            const T* br = B + p * n;
                            for (std::size_t j = 0; j < n; ++j) acc += gr[j] * br[j];
                            dA[i * k + p] += acc;
                        }
                }
                if (T* dB = sink(in[1])) {
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                            const T s = A[i * k + p];
                            const T* gr = g + i * n;
                            T* dbr = dB + p * n;
                            for (std::size_t j = 0; j < n; ++j) dbr[j] += s * gr[j];
                        }
                }
                break;
            }
            case Op::Transpose: {
                if (T* dA = sink(in[0])) {
                    const std::size_t n = nd.shape[0], m = nd.shape[1];
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) dA[i * n + j] += g[j * m + i];
                }
                break;
            }
            case Op::Add:
            case Op::Sub: {
                if (T* da = sink(in[0]))
                    for (std::size_t i = 0; i < len; ++i) da[i] += g[i];
                if (T* db = sink(in[1])) {
                    const T sgn = op == Op::Add ? T{1} : T{-1};
                    for (std::size_t i = 0; i < len; ++i) db[i] += sgn * g[i];
                }
                break;
            }
            case Op::Mul: {
                const T* x = val(Var{in[0]});
                const T* y = val(Var{in[1]});
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < len; ++i) dx[i] += g[i] * y[i];
                if (T* dy = sink(in[1]))
                    for (std::size_t i = 0; i < len; ++i) dy[i] += g[i] * x[i];
                break;
            }
            case Op::Neg:
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < len; ++i) dx[i] -= g[i];
                break;
            case Op::Scale: {
                const T c = nd.scalar;
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < len; ++i) dx[i] += c * g[i];
                break;
            }
            case Op::ScaleBy: {
                const T* x = val(Var{in[0]});
                const T c = val(Var{in[1]})[0];
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < len; ++i) dx[i] += c * g[i];
                if (T* ds = sink(in[1])) {
                    T acc{};
                    for (std::size_t i = 0; i < len; ++i) acc += g[i] * x[i];
                    ds[0] += acc;
                }
                break;
            }
            case Op::AddRow: {
                const std::size_t n = nd.shape[1], m = nd.shape[0];
                if (T* da = sink(in[0]))
                    for (std::size_t i = 0; i < len; ++i) da[i] += g[i];
                if (T* db = sink(in[1]))
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) db[j] += g[i * n + j];
                break;
            }
            case Op::Relu: {
                const T* x = val(Var{in[0]});
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < len; ++i)
                        if (x[i] > T{0}) dx[i] += g[i];
                break;
            }
            case Op::Exp:
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < len; ++i) dx[i] += g[i] * out[i];
                break;
            case Op::Log: {
                const T* x = val(Var{in[0]});
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < len; ++i) dx[i] += g[i] / x[i];
                break;
            }
            case Op::Sin: {
                const T* x = val(Var{in[0]});
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < len; ++i) dx[i] += g[i] * std::cos(x[i]);
                break;
            }
            case Op::Cos: {
                const T* x = val(Var{in[0]});
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < len; ++i) dx[i] -= g[i] * std::sin(x[i]);
                break;
            }
            case Op::Sigmoid:
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < len; ++i) dx[i] += g[i] * out[i] * (T{1} - out[i]);
                break;
            case Op::Softplus: {
                const T* x = val(Var{in[0]});
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < len; ++i) dx[i] += g[i] * sigmoid_value(x[i]);
                break;
            }
            case Op::Sum:
            case Op::Mean: {
                const std::size_t n = nodes_[in[0]].value.size();
                const T s = op == Op::Sum ? g[0] : g[0] / static_cast<T>(n);
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < n; ++i) dx[i] += s;
                break;
            }
            case Op::RowSum: {
                const auto [m, n] = mat_dims(Var{in[0]}, "row_sum");
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += g[i];
                break;
            }
            case Op::LogSoftmaxRows: {
                const std::size_t m = nd.shape[0], n = nd.shape[1];
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < m; ++i) {
                        T gs{};
                        for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
                        for (std::size_t j = 0; j < n; ++j)
                            dx[i * n + j] += g[i * n + j] - std::exp(out[i * n + j]) * gs;
                    }
                break;
            }
            case Op::ConcatCols: {
                const std::vector<std::size_t> widths = nd.index;
                const std::size_t m = nd.shape[0], total = nd.shape[1];
                std::size_t off = 0;
                for (std::size_t q = 0; q < in.size(); ++q) {
                    if (T* dp = sink(in[q]))
                        for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < widths[q]; ++j)
                                dp[i * widths[q] + j] += g[i * total + off + j];
                    off += widths[q];
                }
                break;
            }
            case Op::Interleave: {
                if (T* dr = sink(in[0]))
                    for (std::size_t i = 0; i < len / 2; ++i) dr[i] += g[2 * i];
                if (T* di = sink(in[1]))
                    for (std::size_t i = 0; i < len / 2; ++i) di[i] += g[2 * i + 1];
                break;
            }
            case Op::ComplexMul: {
                const T* X = val(Var{in[0]});
                const T* Y = val(Var{in[1]});
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < len; i += 2) {
                        dx[i] += g[i] * Y[i] + g[i + 1] * Y[i + 1];
                        dx[i + 1] += -g[i] * Y[i + 1] + g[i + 1] * Y[i];
                    }
                if (T* dy = sink(in[1]))
                    for (std::size_t i = 0; i < len; i += 2) {
                        dy[i] += g[i] * X[i] + g[i + 1] * X[i + 1];
                        dy[i + 1] += -g[i] * X[i + 1] + g[i + 1] * X[i];
                    }
                break;
            }
            case Op::Gather: {
                const std::vector<std::size_t> pos = nd.index;
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < pos.size(); ++i) dx[pos[i]] += g[i];
                break;
            }
            case Op::TakeRows: {
                const std::vector<std::size_t> rows = nd.index;
                const std::size_t n = nd.shape[1];
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < rows.size(); ++i)
                        for (std::size_t j = 0; j < n; ++j) dx[rows[i] * n + j] += g[i * n + j];
                break;
            }
            case Op::Conv1d: {
                const std::size_t in_ch = nd.dim[0], length = nd.dim[1], pad = nd.dim[2],
                                  out_len = nd.dim[3];
                const std::size_t batch = nd.shape[0];
                const auto& ws = nodes_[in[1]].shape;
                const std::size_t out_ch = ws[0], kernel = ws[2];
                const T* X = val(Var{in[0]});
                const T* W = val(Var{in[1]});
                T* dX = sink(in[0]);
                T* dW = sink(in[1]);
                T* dB = sink(in[2]);
                for (std::size_t n = 0; n < batch; ++n)
                    for (std::size_t o = 0; o < out_ch; ++o) {
                        const T* go = g + (n * out_ch + o) * out_len;
                        if (dB)
                            for (std::size_t t = 0; t < out_len; ++t) dB[o] += go[t];
                        for (std::size_t c = 0; c < in_ch; ++c) {
                            const T* src = X + (n * in_ch + c) * length;
                            const T* wk = W + (o * in_ch + c) * kernel;
                            for (std::size_t t = 0; t < out_len; ++t)
                                for (std::size_t q = 0; q < kernel; ++q) {
                                    const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t + q) -
                                                               static_cast<std::ptrdiff_t>(pad);
                                    if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(length)) continue;
                                    if (dW) dW[(o * in_ch + c) * kernel + q] += go[t] * src[pos];
                                    if (dX) dX[(n * in_ch + c) * length + pos] += go[t] * wk[q];
                                }
                        }
                    }
                break;
            }
            case Op::AdaptiveMaxPool1d: {
                const std::vector<std::size_t> arg = nd.index;
                if (T* dx = sink(in[0]))
                    for (std::size_t i = 0; i < arg.size(); ++i) dx[arg[i]] += g[i];
                break;
            }
        }
    }
};

}  // namespace composeae
