#pragma once

// Tape-style reverse-mode differentiation over BasicTensor. A Graph owns an
// append-only node list; every op appends one node whose inputs already exist,
// so reverse append order is a valid reverse topological order.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "advlm/tensor.hpp"

namespace advlm {

enum class OpKind {
    Leaf,
    MatMul,
    Linear,
    Add,
    Relu,
    Attention,
    CrossEntropy,
    Embedding,
    ConcatRows,
    SliceRows,
    Scale,
    Sum,
    Patchify,
    LogitMargin,
};

template <class T>
class Graph;

/// Handle to a node inside a Graph.
template <class T>
struct BasicVar {
    Graph<T>* graph = nullptr;
    std::uint32_t id = 0;

    const BasicTensor<T>& value() const { return graph->value(*this); }
    const Shape& shape() const { return value().shape(); }
};

using Var = BasicVar<float>;

template <class T>
class GradientMap {
public:
    GradientMap() = default;
    explicit GradientMap(std::vector<std::optional<BasicTensor<T>>> grads) : grads_(std::move(grads)) {}

    bool contains(BasicVar<T> v) const { return v.id < grads_.size() && grads_[v.id].has_value(); }

    const BasicTensor<T>& at(BasicVar<T> v) const {
        if (!contains(v)) throw ContractViolation("no gradient recorded for node " + std::to_string(v.id));
        return *grads_[v.id];
    }

    std::size_t size() const noexcept { return grads_.size(); }

private:
    std::vector<std::optional<BasicTensor<T>>> grads_;
};

template <class T>
class Graph {
public:
    struct Node;
    using BackwardFn = std::function<void(const Graph&, const Node&, const BasicTensor<T>& grad_out,
                                          std::span<BasicTensor<T>* const> input_grads)>;

    struct Node {
        OpKind kind = OpKind::Leaf;
        std::vector<std::uint32_t> inputs;
        BasicTensor<T> owned;
        const BasicTensor<T>* external = nullptr;
        bool requires_grad = false;
        BackwardFn backward;

        const BasicTensor<T>& value() const { return external ? *external : owned; }
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Leaf holding its own copy of `value`.
    BasicVar<T> input(BasicTensor<T> value, bool requires_grad = false) {
        Node n;
        n.owned = std::move(value);
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    /// Leaf borrowing `value`; the tensor must outlive the graph.
    BasicVar<T> parameter(const BasicTensor<T>& value, bool requires_grad) {
        Node n;
        n.external = &value;
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    BasicVar<T> record(OpKind kind, std::vector<std::uint32_t> inputs, BasicTensor<T> out, BackwardFn fn) {
        Node n;
        n.kind = kind;
        for (std::uint32_t in : inputs) {
            if (in >= nodes_.size()) throw ContractViolation("node input does not precede it");
            n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
        }
        n.inputs = std::move(inputs);
        n.owned = std::move(out);
        if (n.requires_grad) n.backward = std::move(fn);
        return push(std::move(n));
    }

    const Node& node(std::uint32_t id) const { return nodes_.at(id); }
    std::size_t size() const noexcept { return nodes_.size(); }
    const BasicTensor<T>& value(BasicVar<T> v) const { return nodes_.at(v.id).value(); }

    /// Reverse sweep from a scalar loss. Each node is visited once, in reverse append order.
    GradientMap<T> backward(BasicVar<T> loss) const {
        if (loss.graph != this) throw ContractViolation("loss node belongs to a different graph");
        const auto& loss_value = value(loss);
        if (loss_value.numel() != 1) {
            throw ContractViolation("backward needs a scalar loss, got shape " + shape_string(loss_value.shape()));
        }
        std::vector<std::optional<BasicTensor<T>>> grads(nodes_.size());
        grads[loss.id] = BasicTensor<T>::unchecked(loss_value.shape(), {T{1}});
        std::vector<BasicTensor<T>*> input_grads;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            const Node& n = nodes_[i];
            if (!grads[i] || !n.backward) continue;
            input_grads.assign(n.inputs.size(), nullptr);
            for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                const std::uint32_t in = n.inputs[k];
                if (!nodes_[in].requires_grad) continue;
                if (!grads[in]) {
                    const auto& shape = nodes_[in].value().shape();
                    grads[in] = BasicTensor<T>::unchecked(shape, std::vector<T>(shape_numel(shape), T{0}));
                }
                input_grads[k] = &*grads[in];
            }
            n.backward(*this, n, *grads[i], input_grads);
        }
        return GradientMap<T>(std::move(grads));
    }

    /// Sign pattern (> 0) of every ReLU input in the graph, in append order.
    std::vector<bool> relu_pattern() const {
        std::vector<bool> out;
        for (const Node& n : nodes_) {
            if (n.kind != OpKind::Relu) continue;
            for (T v : nodes_[n.inputs[0]].value().data()) out.push_back(v > T{0});
        }
        return out;
    }

    /// Smallest |x| over every ReLU input; +inf when the graph has no ReLU.
    T min_relu_margin() const {
        T best = std::numeric_limits<T>::infinity();
        for (const Node& n : nodes_) {
            if (n.kind != OpKind::Relu) continue;
            for (T v : nodes_[n.inputs[0]].value().data()) best = std::min(best, std::abs(v));
        }
        return best;
    }

private:
    BasicVar<T> push(Node n) {
        nodes_.push_back(std::move(n));
        return BasicVar<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    std::vector<Node> nodes_;
};

template <class T>
GradientMap<T> backward(const Graph<T>& graph, BasicVar<T> loss) {
    return graph.backward(loss);
}

namespace kernels {

// C[m x n] (+)= A[m x k] * B[k x n]
template <class T>
void gemm(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
          std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c.data() + i * n;
        const T* arow = a.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T{0}) continue;
            const T* brow = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] (+)= A[k x m]^T * B[k x n]
template <class T>
void gemm_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const T* arow = a.data() + p * m;
        const T* brow = b.data() + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T av = arow[i];
            if (av == T{0}) continue;
            T* crow = c.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
template <class T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b.data() + j * k;
            T acc{0};
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * n + j] += acc;
        }
    }
}

template <class T>
void add_into(BasicTensor<T>& dst, std::span<const T> src) {
    auto d = dst.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
}

template <class T>
void softmax_rows(std::span<T> x, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = x.data() + r * cols;
        T mx = row[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        T total{0};
        for (std::size_t j = 0; j < cols; ++j) {
            row[j] = std::exp(row[j] - mx);
            total += row[j];
        }
        for (std::size_t j = 0; j < cols; ++j) row[j] /= total;
    }
}

}  // namespace kernels

namespace ops {

namespace detail {

template <class T>
Graph<T>& same_graph(BasicVar<T> a, BasicVar<T> b) {
    if (a.graph == nullptr || a.graph != b.graph) throw ContractViolation("operands belong to different graphs");
    return *a.graph;
}

template <class T>
void require_matrix(const BasicTensor<T>& t, const char* what) {
    if (t.rank() != 2) {
        throw ContractViolation(std::string(what) + " must be a matrix, got " + shape_string(t.shape()));
    }
}

template <class T>
BasicTensor<T> zeros(Shape shape) {
    const std::size_t n = shape_numel(shape);
    return BasicTensor<T>::unchecked(std::move(shape), std::vector<T>(n, T{0}));
}

}  // namespace detail

template <class T>
BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b) {
    auto& g = detail::same_graph(a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    detail::require_matrix(av, "matmul lhs");
    detail::require_matrix(bv, "matmul rhs");
    if (av.cols() != bv.rows()) {
        throw ContractViolation("matmul shape mismatch " + shape_string(av.shape()) + " x " +
                                shape_string(bv.shape()));
    }
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    auto out = detail::zeros<T>({m, n});
    kernels::gemm<T>(av.data(), bv.data(), out.data(), m, k, n);
    return g.record(OpKind::MatMul, {a.id, b.id}, std::move(out),
                    [m, k, n](const Graph<T>& gr, const typename Graph<T>::Node& node, const BasicTensor<T>& dout,
                              std::span<BasicTensor<T>* const> din) {
                        const auto& A = gr.node(node.inputs[0]).value();
                        const auto& B = gr.node(node.inputs[1]).value();
                        if (din[0]) kernels::gemm_nt<T>(dout.data(), B.data(), din[0]->data(), m, n, k);
                        if (din[1]) kernels::gemm_tn<T>(A.data(), dout.data(), din[1]->data(), k, m, n);
                    });
}

/// output[i,j] = sum_k input[i,k] * weight[k,j] + bias[j]
template <class T>
BasicVar<T> linear(BasicVar<T> input, BasicVar<T> weight, BasicVar<T> bias) {
    auto& g = detail::same_graph(input, weight);
    detail::same_graph(input, bias);
    const auto& x = input.value();
    const auto& w = weight.value();
    const auto& b = bias.value();
    detail::require_matrix(x, "linear input");
    detail::require_matrix(w, "linear weight");
    if (x.cols() != w.rows() || b.rank() != 1 || b.numel() != w.cols()) {
        throw ContractViolation("linear shape mismatch: input " + shape_string(x.shape()) + ", weight " +
                                shape_string(w.shape()) + ", bias " + shape_string(b.shape()));
    }
    const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
    auto out = detail::zeros<T>({m, n});
    auto o = out.data();
    for (std::size_t i = 0; i < m; ++i) std::copy(b.data().begin(), b.data().end(), o.begin() + i * n);
    kernels::gemm<T>(x.data(), w.data(), o, m, k, n);
    return g.record(OpKind::Linear, {input.id, weight.id, bias.id}, std::move(out),
                    [m, k, n](const Graph<T>& gr, const typename Graph<T>::Node& node, const BasicTensor<T>& dout,
                              std::span<BasicTensor<T>* const> din) {
                        const auto& X = gr.node(node.inputs[0]).value();
                        const auto& W = gr.node(node.inputs[1]).value();
                        if (din[0]) kernels::gemm_nt<T>(dout.data(), W.data(), din[0]->data(), m, n, k);
                        if (din[1]) kernels::gemm_tn<T>(X.data(), dout.data(), din[1]->data(), k, m, n);
                        if (din[2]) {
                            auto db = din[2]->data();
                            for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < n; ++j) db[j] += dout[i * n + j];
                        }
                    });
}

template <class T>
BasicVar<T> add(BasicVar<T> a, BasicVar<T> b) {
    auto& g = detail::same_graph(a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.shape() != bv.shape()) {
        throw ContractViolation("add shape mismatch " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
    }
    std::vector<T> out(av.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return g.record(OpKind::Add, {a.id, b.id}, BasicTensor<T>::unchecked(av.shape(), std::move(out)),
                    [](const Graph<T>&, const typename Graph<T>::Node&, const BasicTensor<T>& dout,
                       std::span<BasicTensor<T>* const> din) {
                        for (auto* d : din)
                            if (d) kernels::add_into(*d, dout.data());
                    });
}

/// max(0, v); the subgradient at exactly 0 is 0.
template <class T>
BasicVar<T> relu(BasicVar<T> x) {
    auto& g = *x.graph;
    const auto& xv = x.value();
    std::vector<T> out(xv.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T{0} ? xv[i] : T{0};
    return g.record(OpKind::Relu, {x.id}, BasicTensor<T>::unchecked(xv.shape(), std::move(out)),
                    [](const Graph<T>& gr, const typename Graph<T>::Node& node, const BasicTensor<T>& dout,
                       std::span<BasicTensor<T>* const> din) {
                        const auto& X = gr.node(node.inputs[0]).value();
                        auto d = din[0]->data();
                        for (std::size_t i = 0; i < d.size(); ++i)
                            if (X[i] > T{0}) d[i] += dout[i];
                    });
}

/// softmax(query * key^T / sqrt(d)) * value, softmax over the key axis.
template <class T>
BasicVar<T> attention(BasicVar<T> query, BasicVar<T> key, BasicVar<T> value) {
    auto& g = detail::same_graph(query, key);
    detail::same_graph(query, value);
    const auto& q = query.value();
    const auto& k = key.value();
    const auto& v = value.value();
    detail::require_matrix(q, "attention query");
    detail::require_matrix(k, "attention key");
    detail::require_matrix(v, "attention value");
    if (q.cols() != k.cols() || k.rows() != v.rows()) {
        throw ContractViolation("attention shape mismatch: query " + shape_string(q.shape()) + ", key " +
                                shape_string(k.shape()) + ", value " + shape_string(v.shape()));
    }
    const std::size_t nq = q.rows(), nk = k.rows(), d = q.cols(), dv = v.cols();
    const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(d));

    std::vector<T> weights(nq * nk, T{0});
    kernels::gemm_nt<T>(q.data(), k.data(), weights, nq, d, nk);
    for (T& s : weights) s *= inv_sqrt_d;
    kernels::softmax_rows<T>(weights, nq, nk);

    auto out = detail::zeros<T>({nq, dv});
    kernels::gemm<T>(weights, v.data(), out.data(), nq, nk, dv);
    return g.record(
        OpKind::Attention, {query.id, key.id, value.id}, std::move(out),
        [weights = std::move(weights), nq, nk, d, dv, inv_sqrt_d](
            const Graph<T>& gr, const typename Graph<T>::Node& node, const BasicTensor<T>& dout,
            std::span<BasicTensor<T>* const> din) {
            const auto& Q = gr.node(node.inputs[0]).value();
            const auto& K = gr.node(node.inputs[1]).value();
            const auto& V = gr.node(node.inputs[2]).value();
            if (din[2]) kernels::gemm_tn<T>(std::span<const T>(weights), dout.data(), din[2]->data(), nk, nq, dv);
            if (!din[0] && !din[1]) return;
            std::vector<T> dw(nq * nk, T{0});
            kernels::gemm_nt<T>(dout.data(), V.data(), dw, nq, dv, nk);
            // dS = P * (dP - rowsum(dP * P)), folded with the 1/sqrt(d) scale
            for (std::size_t i = 0; i < nq; ++i) {
                T dot{0};
                for (std::size_t j = 0; j < nk; ++j) dot += dw[i * nk + j] * weights[i * nk + j];
                for (std::size_t j = 0; j < nk; ++j)
                    dw[i * nk + j] = weights[i * nk + j] * (dw[i * nk + j] - dot) * inv_sqrt_d;
            }
            if (din[0]) kernels::gemm<T>(std::span<const T>(dw), K.data(), din[0]->data(), nq, nk, d);
            if (din[1]) kernels::gemm_tn<T>(std::span<const T>(dw), Q.data(), din[1]->data(), nk, nq, d);
        });
}

/// Mean over rows of -log softmax(logits[i])[targets[i]], log-sum-exp stabilised.
template <class T>
BasicVar<T> cross_entropy(BasicVar<T> logits, std::span<const std::size_t> targets) {
    auto& g = *logits.graph;
    const auto& z = logits.value();
    detail::require_matrix(z, "cross_entropy logits");
    const std::size_t n = z.rows(), vocab = z.cols();
    if (targets.size() != n) {
        throw ContractViolation("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                                shape_string(z.shape()));
    }
    for (std::size_t t : targets) {
        if (t >= vocab) {
            throw ContractViolation("cross_entropy: target id " + std::to_string(t) + " outside [0, " +
                                    std::to_string(vocab) + ")");
        }
    }
    std::vector<T> probs(z.data().begin(), z.data().end());
    kernels::softmax_rows<T>(probs, n, vocab);
    T total{0};
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = z.data().data() + i * vocab;
        T mx = row[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        T sum{0};
        for (std::size_t j = 0; j < vocab; ++j) sum += std::exp(row[j] - mx);
        total += (mx + std::log(sum)) - row[targets[i]];
    }
    const T loss = total / static_cast<T>(n);
    return g.record(OpKind::CrossEntropy, {logits.id}, BasicTensor<T>::unchecked({1}, {loss}),
                    [probs = std::move(probs), ids = std::vector<std::size_t>(targets.begin(), targets.end()), n,
                     vocab](const Graph<T>&, const typename Graph<T>::Node&, const BasicTensor<T>& dout,
                            std::span<BasicTensor<T>* const> din) {
                        const T scale = dout[0] / static_cast<T>(n);
                        auto d = din[0]->data();
                        for (std::size_t i = 0; i < n; ++i) {
                            for (std::size_t j = 0; j < vocab; ++j) d[i * vocab + j] += scale * probs[i * vocab + j];
                            d[i * vocab + ids[i]] -= scale;
                        }
                    });
}

/// Rows of `table` selected by `ids`.
template <class T>
BasicVar<T> embedding(BasicVar<T> table, std::span<const std::size_t> ids) {
    auto& g = *table.graph;
    const auto& tv = table.value();
    detail::require_matrix(tv, "embedding table");
    if (ids.empty()) throw ContractViolation("embedding: empty id sequence");
    const std::size_t d = tv.cols();
    std::vector<T> out;
    out.reserve(ids.size() * d);
    for (std::size_t id : ids) {
        if (id >= tv.rows()) {
            throw ContractViolation("embedding: id " + std::to_string(id) + " outside table " +
                                    shape_string(tv.shape()));
        }
        out.insert(out.end(), tv.data().begin() + id * d, tv.data().begin() + (id + 1) * d);
    }
    return g.record(OpKind::Embedding, {table.id}, BasicTensor<T>::unchecked({ids.size(), d}, std::move(out)),
                    [rows = std::vector<std::size_t>(ids.begin(), ids.end()), d](
                        const Graph<T>&, const typename Graph<T>::Node&, const BasicTensor<T>& dout,
                        std::span<BasicTensor<T>* const> din) {
                        auto dt = din[0]->data();
                        for (std::size_t r = 0; r < rows.size(); ++r)
                            for (std::size_t j = 0; j < d; ++j) dt[rows[r] * d + j] += dout[r * d + j];
                    });
}

/// Vertical stack: rows of `top` followed by rows of `bottom`.
template <class T>
BasicVar<T> concat_rows(BasicVar<T> top, BasicVar<T> bottom) {
    auto& g = detail::same_graph(top, bottom);
    const auto& a = top.value();
    const auto& b = bottom.value();
    detail::require_matrix(a, "concat_rows top");
    detail::require_matrix(b, "concat_rows bottom");
    if (a.cols() != b.cols()) {
        throw ContractViolation("concat_rows width mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
    }
    std::vector<T> out(a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    const std::size_t split = a.numel();
    return g.record(OpKind::ConcatRows, {top.id, bottom.id},
                    BasicTensor<T>::unchecked({a.rows() + b.rows(), a.cols()}, std::move(out)),
                    [split](const Graph<T>&, const typename Graph<T>::Node&, const BasicTensor<T>& dout,
                            std::span<BasicTensor<T>* const> din) {
                        if (din[0]) kernels::add_into(*din[0], dout.data().subspan(0, split));
                        if (din[1]) kernels::add_into(*din[1], dout.data().subspan(split));
                    });
}

/// Rows [begin, end) of a matrix.
template <class T>
BasicVar<T> slice_rows(BasicVar<T> x, std::size_t begin, std::size_t end) {
    auto& g = *x.graph;
    const auto& xv = x.value();
    detail::require_matrix(xv, "slice_rows input");
    if (begin >= end || end > xv.rows()) {
        throw ContractViolation("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                                ") invalid for " + shape_string(xv.shape()));
    }
    const std::size_t c = xv.cols();
    std::vector<T> out(xv.data().begin() + begin * c, xv.data().begin() + end * c);
    return g.record(OpKind::SliceRows, {x.id}, BasicTensor<T>::unchecked({end - begin, c}, std::move(out)),
                    [offset = begin * c](const Graph<T>&, const typename Graph<T>::Node&, const BasicTensor<T>& dout,
                                         std::span<BasicTensor<T>* const> din) {
                        auto d = din[0]->data();
                        for (std::size_t i = 0; i < dout.numel(); ++i) d[offset + i] += dout[i];
                    });
}

template <class T>
BasicVar<T> scale(BasicVar<T> x, T factor) {
    auto& g = *x.graph;
    const auto& xv = x.value();
    std::vector<T> out(xv.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
    return g.record(OpKind::Scale, {x.id}, BasicTensor<T>::unchecked(xv.shape(), std::move(out)),
                    [factor](const Graph<T>&, const typename Graph<T>::Node&, const BasicTensor<T>& dout,
                             std::span<BasicTensor<T>* const> din) {
                        auto d = din[0]->data();
                        for (std::size_t i = 0; i < d.size(); ++i) d[i] += dout[i] * factor;
                    });
}

template <class T>
BasicVar<T> sum(BasicVar<T> x) {
    auto& g = *x.graph;
    T total{0};
    for (T v : x.value().data()) total += v;
    return g.record(OpKind::Sum, {x.id}, BasicTensor<T>::unchecked({1}, {total}),
                    [](const Graph<T>&, const typename Graph<T>::Node&, const BasicTensor<T>& dout,
                       std::span<BasicTensor<T>* const> din) {
                        for (T& d : din[0]->data()) d += dout[0];
                    });
}

/// Splits an H x W x C image into non-overlapping p x p patches. Row r of the
/// output is patch (r / (W/p), r % (W/p)), flattened in (y, x, channel) order.
template <class T>
BasicVar<T> patchify(BasicVar<T> image, std::size_t patch) {
    auto& g = *image.graph;
    const auto& im = image.value();
    if (im.rank() != 3 || patch == 0 || im.shape()[0] % patch != 0 || im.shape()[1] % patch != 0) {
        throw ContractViolation("patchify: image " + shape_string(im.shape()) + " not divisible into " +
                                std::to_string(patch) + "-pixel patches");
    }
    const std::size_t h = im.shape()[0], w = im.shape()[1], c = im.shape()[2];
    const std::size_t gw = w / patch, n = (h / patch) * gw, dim = patch * patch * c;
    std::vector<std::size_t> index(n * dim);
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t y0 = (r / gw) * patch, x0 = (r % gw) * patch;
        for (std::size_t py = 0; py < patch; ++py)
            for (std::size_t px = 0; px < patch; ++px)
                for (std::size_t ch = 0; ch < c; ++ch)
                    index[r * dim + (py * patch + px) * c + ch] = ((y0 + py) * w + (x0 + px)) * c + ch;
    }
    std::vector<T> out(n * dim);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = im[index[i]];
    return g.record(OpKind::Patchify, {image.id}, BasicTensor<T>::unchecked({n, dim}, std::move(out)),
                    [index = std::move(index)](const Graph<T>&, const typename Graph<T>::Node&,
                                               const BasicTensor<T>& dout, std::span<BasicTensor<T>* const> din) {
                        auto d = din[0]->data();
                        for (std::size_t i = 0; i < index.size(); ++i) d[index[i]] += dout[i];
                    });
}

/// logits[row, target] - max_{j != target} logits[row, j]. Negative iff another
/// token wins; ties go to the lowest competing id.
template <class T>
BasicVar<T> logit_margin(BasicVar<T> logits, std::size_t row, std::size_t target) {
    auto& g = *logits.graph;
    const auto& z = logits.value();
    detail::require_matrix(z, "logit_margin logits");
    if (row >= z.rows() || target >= z.cols() || z.cols() < 2) {
        throw ContractViolation("logit_margin: row " + std::to_string(row) + ", target " + std::to_string(target) +
                                " invalid for " + shape_string(z.shape()));
    }
    const std::size_t v = z.cols();
    std::size_t rival = target == 0 ? 1 : 0;
    for (std::size_t j = 0; j < v; ++j)
        if (j != target && z.at(row, j) > z.at(row, rival)) rival = j;
    const T margin = z.at(row, target) - z.at(row, rival);
    return g.record(OpKind::LogitMargin, {logits.id}, BasicTensor<T>::unchecked({1}, {margin}),
                    [hit = row * v + target, miss = row * v + rival](
                        const Graph<T>&, const typename Graph<T>::Node&, const BasicTensor<T>& dout,
                        std::span<BasicTensor<T>* const> din) {
                        auto d = din[0]->data();
                        d[hit] += dout[0];
                        d[miss] -= dout[0];
                    });
}

}  // namespace ops

}  // namespace advlm
