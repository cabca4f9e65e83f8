// Dense double-precision tensors with reverse-mode automatic differentiation.
//
// Every operation allocates a fresh node, so the graph doubles as a dynamic
// tape: node ids grow monotonically with creation order, which makes creation
// order a valid topological order. backward() replays the reachable subgraph
// in reverse id order, visiting each node exactly once. Matrix products are
// delegated to BLAS; everything else is plain loops.
#pragma once

#include <cblas.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "tsmix/errors.hpp"
#include "tsmix/random.hpp"

namespace tsmix {

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad; // empty until first accumulation
    bool requires_grad = false;
    std::uint64_t id = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Distributes this node's grad into its parents' grads.
    std::function<void(Node&)> backprop;

    std::size_t size() const { return values.size(); }
    bool is_leaf() const { return !backprop; }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }

    void accumulate(const double* g, std::size_t n) {
        ensure_grad();
        for (std::size_t i = 0; i < n; ++i) grad[i] += g[i];
    }
};

using NodePtr = std::shared_ptr<Node>;

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

inline NodePtr make_node(Shape shape, const char* op) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values.resize(shape_size(n->shape));
    n->id = next_node_id();
    n->op = op;
    return n;
}

} // namespace detail

class Tensor {
public:
    Tensor() : node_(detail::make_node({0}, "leaf")) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 0.0, requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        auto node = detail::make_node(std::move(shape), "leaf");
        std::fill(node->values.begin(), node->values.end(), value);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor from_values(Shape shape, std::vector<double> values,
                              bool requires_grad = false) {
        if (detail::shape_size(shape) != values.size())
            throw ShapeError("tensor literal: " + detail::shape_str(shape) +
                             " does not hold " + std::to_string(values.size()) + " values");
        auto node = detail::make_node(std::move(shape), "leaf");
        node->values = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_values({1}, {v}, requires_grad);
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->values.size(); }
    std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }

    const std::vector<double>& values() const { return node_->values; }
    // Leaf mutation hook for initialization and optimizer updates.
    std::vector<double>& values_mut() { return node_->values; }

    double item() const {
        if (size() != 1)
            throw ContractError("item() on non-scalar tensor " + detail::shape_str(shape()));
        return node_->values[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (!has_grad())
            throw ContractError("gradient not populated; run backward() first");
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->values.size(), 0.0); }

    detail::NodePtr node() const { return node_; }

    explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

private:
    detail::NodePtr node_;
};

namespace detail {

inline NodePtr result_node(Shape shape, const char* op,
                           std::initializer_list<NodePtr> parents) {
    auto node = make_node(std::move(shape), op);
    for (const auto& p : parents) {
        if (p->requires_grad) node->requires_grad = true;
        node->parents.push_back(p);
    }
    return node;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes disagree: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

} // namespace detail

// ===================== elementwise =====================

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("add", a, b);
    auto out = detail::result_node(a.shape(), "add", {a.node(), b.node()});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) out->values[i] = av[i] + bv[i];
    if (out->requires_grad) {
        auto an = a.node(), bn = b.node();
        out->backprop = [an, bn](detail::Node& self) {
            if (an->requires_grad) an->accumulate(self.grad.data(), self.grad.size());
            if (bn->requires_grad) bn->accumulate(self.grad.data(), self.grad.size());
        };
    }
    return Tensor(out);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("sub", a, b);
    auto out = detail::result_node(a.shape(), "sub", {a.node(), b.node()});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) out->values[i] = av[i] - bv[i];
    if (out->requires_grad) {
        auto an = a.node(), bn = b.node();
        out->backprop = [an, bn](detail::Node& self) {
            if (an->requires_grad) an->accumulate(self.grad.data(), self.grad.size());
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
            }
        };
    }
    return Tensor(out);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("mul", a, b);
    auto out = detail::result_node(a.shape(), "mul", {a.node(), b.node()});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) out->values[i] = av[i] * bv[i];
    if (out->requires_grad) {
        auto an = a.node(), bn = b.node();
        out->backprop = [an, bn](detail::Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    an->grad[i] += self.grad[i] * bn->values[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    bn->grad[i] += self.grad[i] * an->values[i];
            }
        };
    }
    return Tensor(out);
}

inline Tensor scale(const Tensor& a, double c) {
    auto out = detail::result_node(a.shape(), "scale", {a.node()});
    const auto& av = a.values();
    for (std::size_t i = 0; i < av.size(); ++i) out->values[i] = av[i] * c;
    if (out->requires_grad) {
        auto an = a.node();
        out->backprop = [an, c](detail::Node& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
        };
    }
    return Tensor(out);
}

inline Tensor relu(const Tensor& a) {
    auto out = detail::result_node(a.shape(), "relu", {a.node()});
    const auto& av = a.values();
    for (std::size_t i = 0; i < av.size(); ++i) out->values[i] = av[i] > 0.0 ? av[i] : 0.0;
    if (out->requires_grad) {
        auto an = a.node();
        out->backprop = [an](detail::Node& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                if (an->values[i] > 0.0) an->grad[i] += self.grad[i];
        };
    }
    return Tensor(out);
}

// x[..., N] + bias[N], broadcast over all leading axes.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    if (x.rank() < 1 || bias.rank() != 1 || x.shape().back() != bias.extent(0))
        throw ShapeError("add_row_bias: " + detail::shape_str(x.shape()) + " vs bias " +
                         detail::shape_str(bias.shape()));
    const std::size_t n = bias.size();
    const std::size_t rows = x.size() / n;
    auto out = detail::result_node(x.shape(), "add_row_bias", {x.node(), bias.node()});
    const auto& xv = x.values();
    const auto& bv = bias.values();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out->values[r * n + j] = xv[r * n + j] + bv[j];
    if (out->requires_grad) {
        auto xn = x.node(), bn = bias.node();
        out->backprop = [xn, bn, rows, n](detail::Node& self) {
            if (xn->requires_grad) xn->accumulate(self.grad.data(), self.grad.size());
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j) bn->grad[j] += self.grad[r * n + j];
            }
        };
    }
    return Tensor(out);
}

// ===================== matrix products =====================

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expects rank-2 operands, got " + detail::shape_str(a.shape()) +
                         " and " + detail::shape_str(b.shape()));
    if (a.extent(1) != b.extent(0))
        throw ShapeError("matmul: inner extents disagree: " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(b.shape()));
    const auto m = static_cast<blasint>(a.extent(0));
    const auto k = static_cast<blasint>(a.extent(1));
    const auto n = static_cast<blasint>(b.extent(1));
    auto out = detail::result_node({a.extent(0), b.extent(1)}, "matmul", {a.node(), b.node()});
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0, a.values().data(), k,
                b.values().data(), n, 0.0, out->values.data(), n);
    if (out->requires_grad) {
        auto an = a.node(), bn = b.node();
        out->backprop = [an, bn, m, k, n](detail::Node& self) {
            if (an->requires_grad) {
                an->ensure_grad(); // dA = dC * B^T
                cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n, 1.0,
                            self.grad.data(), n, bn->values.data(), n, 1.0, an->grad.data(), k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad(); // dB = A^T * dC
                cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0,
                            an->values.data(), k, self.grad.data(), n, 1.0, bn->grad.data(), n);
            }
        };
    }
    return Tensor(out);
}

// Batched matmul on rank-3 tensors: [N,m,k] x [N,k,n] -> [N,m,n].
// With transpose_b the right operand is [N,n,k] and used as B^T per slice.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
    if (a.rank() != 3 || b.rank() != 3 || a.extent(0) != b.extent(0))
        throw ShapeError("bmm: expects rank-3 operands with equal batch extents, got " +
                         detail::shape_str(a.shape()) + " and " + detail::shape_str(b.shape()));
    const std::size_t batch = a.extent(0);
    const std::size_t m = a.extent(1);
    const std::size_t k = a.extent(2);
    const std::size_t n = transpose_b ? b.extent(1) : b.extent(2);
    const std::size_t bk = transpose_b ? b.extent(2) : b.extent(1);
    if (bk != k)
        throw ShapeError("bmm: inner extents disagree: " + detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()) + (transpose_b ? " (transposed)" : ""));
    auto out = detail::result_node({batch, m, n}, "bmm", {a.node(), b.node()});
    const auto bm = static_cast<blasint>(m), bn_ = static_cast<blasint>(n),
               bkk = static_cast<blasint>(k);
    for (std::size_t i = 0; i < batch; ++i) {
        const double* ai = a.values().data() + i * m * k;
        const double* bi = b.values().data() + i * k * n;
        double* ci = out->values.data() + i * m * n;
        cblas_dgemm(CblasRowMajor, CblasNoTrans, transpose_b ? CblasTrans : CblasNoTrans, bm, bn_,
                    bkk, 1.0, ai, bkk, bi, transpose_b ? bkk : bn_, 0.0, ci, bn_);
    }
    if (out->requires_grad) {
        auto an = a.node(), bn = b.node();
        out->backprop = [an, bn, batch, m, k, n, transpose_b](detail::Node& self) {
            const auto bm = static_cast<blasint>(m), bn_ = static_cast<blasint>(n),
                       bkk = static_cast<blasint>(k);
            for (std::size_t i = 0; i < batch; ++i) {
                const double* gi = self.grad.data() + i * m * n;
                const double* ai = an->values.data() + i * m * k;
                const double* bi = bn->values.data() + i * k * n;
                if (an->requires_grad) {
                    an->ensure_grad();
                    double* gai = an->grad.data() + i * m * k;
                    // dA = dC * B  (transposed case)  or  dC * B^T
                    cblas_dgemm(CblasRowMajor, CblasNoTrans,
                                transpose_b ? CblasNoTrans : CblasTrans, bm, bkk, bn_, 1.0, gi,
                                bn_, bi, transpose_b ? bkk : bn_, 1.0, gai, bkk);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    double* gbi = bn->grad.data() + i * k * n;
                    if (transpose_b) {
                        // B stored [n,k]; dB = dC^T * A
                        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, bn_, bkk, bm, 1.0,
                                    gi, bn_, ai, bkk, 1.0, gbi, bkk);
                    } else {
                        // dB = A^T * dC
                        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, bkk, bn_, bm, 1.0,
                                    ai, bkk, gi, bn_, 1.0, gbi, bn_);
                    }
                }
            }
        };
    }
    return Tensor(out);
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2)
        throw ShapeError("transpose: expects rank-2, got " + detail::shape_str(a.shape()));
    const std::size_t m = a.extent(0), n = a.extent(1);
    auto out = detail::result_node({n, m}, "transpose", {a.node()});
    const auto& av = a.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out->values[j * m + i] = av[i * n + j];
    if (out->requires_grad) {
        auto an = a.node();
        out->backprop = [an, m, n](detail::Node& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += self.grad[j * m + i];
        };
    }
    return Tensor(out);
}

// ===================== layout =====================

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (detail::shape_size(shape) != a.size())
        throw ShapeError("reshape: " + detail::shape_str(a.shape()) + " -> " +
                         detail::shape_str(shape) + " changes element count");
    auto out = detail::result_node(std::move(shape), "reshape", {a.node()});
    out->values = a.values();
    if (out->requires_grad) {
        auto an = a.node();
        out->backprop = [an](detail::Node& self) {
            an->accumulate(self.grad.data(), self.grad.size());
        };
    }
    return Tensor(out);
}

// Rows of `a` (axis 0) picked by index, duplicates allowed.
inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
    if (a.rank() < 1) throw ShapeError("gather_rows: scalar input");
    const std::size_t rows = a.extent(0);
    const std::size_t width = a.size() / std::max<std::size_t>(rows, 1);
    for (std::size_t i : idx)
        if (i >= rows)
            throw ContractError("gather_rows: index " + std::to_string(i) + " out of " +
                                std::to_string(rows));
    Shape out_shape = a.shape();
    out_shape[0] = idx.size();
    auto out = detail::result_node(std::move(out_shape), "gather_rows", {a.node()});
    const auto& av = a.values();
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(av.data() + idx[r] * width, width, out->values.data() + r * width);
    if (out->requires_grad) {
        auto an = a.node();
        out->backprop = [an, idx, width](detail::Node& self) {
            an->ensure_grad();
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < width; ++j)
                    an->grad[idx[r] * width + j] += self.grad[r * width + j];
        };
    }
    return Tensor(out);
}

// [B*T, H*dk] -> [B*H, T, dk]; pure index permutation.
inline Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t seq_len,
                          std::size_t n_heads) {
    if (x.rank() != 2 || x.extent(0) != batch * seq_len || x.extent(1) % n_heads != 0)
        throw ShapeError("split_heads: " + detail::shape_str(x.shape()) + " incompatible with B=" +
                         std::to_string(batch) + " T=" + std::to_string(seq_len) +
                         " H=" + std::to_string(n_heads));
    const std::size_t d = x.extent(1);
    const std::size_t dk = d / n_heads;
    auto out = detail::result_node({batch * n_heads, seq_len, dk}, "split_heads", {x.node()});
    const auto& xv = x.values();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < n_heads; ++h)
            for (std::size_t t = 0; t < seq_len; ++t)
                std::copy_n(xv.data() + (b * seq_len + t) * d + h * dk, dk,
                            out->values.data() + ((b * n_heads + h) * seq_len + t) * dk);
    if (out->requires_grad) {
        auto xn = x.node();
        out->backprop = [xn, batch, seq_len, n_heads, d, dk](detail::Node& self) {
            xn->ensure_grad();
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t h = 0; h < n_heads; ++h)
                    for (std::size_t t = 0; t < seq_len; ++t) {
                        const double* src = self.grad.data() + ((b * n_heads + h) * seq_len + t) * dk;
                        double* dst = xn->grad.data() + (b * seq_len + t) * d + h * dk;
                        for (std::size_t j = 0; j < dk; ++j) dst[j] += src[j];
                    }
        };
    }
    return Tensor(out);
}

// Inverse of split_heads: [B*H, T, dk] -> [B*T, H*dk].
inline Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t n_heads) {
    if (x.rank() != 3 || x.extent(0) != batch * n_heads)
        throw ShapeError("merge_heads: " + detail::shape_str(x.shape()) + " incompatible with B=" +
                         std::to_string(batch) + " H=" + std::to_string(n_heads));
    const std::size_t seq_len = x.extent(1);
    const std::size_t dk = x.extent(2);
    const std::size_t d = n_heads * dk;
    auto out = detail::result_node({batch * seq_len, d}, "merge_heads", {x.node()});
    const auto& xv = x.values();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < n_heads; ++h)
            for (std::size_t t = 0; t < seq_len; ++t)
                std::copy_n(xv.data() + ((b * n_heads + h) * seq_len + t) * dk, dk,
                            out->values.data() + (b * seq_len + t) * d + h * dk);
    if (out->requires_grad) {
        auto xn = x.node();
        out->backprop = [xn, batch, seq_len, n_heads, d, dk](detail::Node& self) {
            xn->ensure_grad();
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t h = 0; h < n_heads; ++h)
                    for (std::size_t t = 0; t < seq_len; ++t) {
                        const double* src = self.grad.data() + (b * seq_len + t) * d + h * dk;
                        double* dst = xn->grad.data() + ((b * n_heads + h) * seq_len + t) * dk;
                        for (std::size_t j = 0; j < dk; ++j) dst[j] += src[j];
                    }
        };
    }
    return Tensor(out);
}

// ===================== normalization & activations =====================

inline Tensor softmax(const Tensor& x, int axis = -1) {
    const int r = static_cast<int>(x.rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
        throw ShapeError("softmax: axis out of range for " + detail::shape_str(x.shape()));
    const std::size_t lanes = x.shape()[static_cast<std::size_t>(axis)];
    std::size_t inner = 1;
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < x.rank(); ++i)
        inner *= x.shape()[i];
    const std::size_t outer = x.size() / (lanes * inner);
    auto out = detail::result_node(x.shape(), "softmax", {x.node()});
    const auto& xv = x.values();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * lanes * inner + i;
            double mx = xv[base];
            for (std::size_t l = 1; l < lanes; ++l) mx = std::max(mx, xv[base + l * inner]);
            double total = 0.0;
            for (std::size_t l = 0; l < lanes; ++l) {
                const double e = std::exp(xv[base + l * inner] - mx);
                out->values[base + l * inner] = e;
                total += e;
            }
            const double inv = 1.0 / total;
            for (std::size_t l = 0; l < lanes; ++l) out->values[base + l * inner] *= inv;
        }
    }
    if (out->requires_grad) {
        auto xn = x.node();
        out->backprop = [xn, outer, lanes, inner](detail::Node& self) {
            xn->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t base = o * lanes * inner + i;
                    double dot = 0.0;
                    for (std::size_t l = 0; l < lanes; ++l)
                        dot += self.grad[base + l * inner] * self.values[base + l * inner];
                    for (std::size_t l = 0; l < lanes; ++l) {
                        const std::size_t at = base + l * inner;
                        xn->grad[at] += self.values[at] * (self.grad[at] - dot);
                    }
                }
            }
        };
    }
    return Tensor(out);
}

// Normalizes the last axis to zero mean / unit variance, then scales by gain
// and shifts by bias. Population variance with eps inside the square root.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    if (x.rank() < 1 || gain.rank() != 1 || bias.rank() != 1)
        throw ShapeError("layer_norm: bad ranks");
    const std::size_t n = x.shape().back();
    if (gain.extent(0) != n || bias.extent(0) != n)
        throw ShapeError("layer_norm: gain/bias " + detail::shape_str(gain.shape()) + "/" +
                         detail::shape_str(bias.shape()) + " do not match last axis of " +
                         detail::shape_str(x.shape()));
    const std::size_t rows = x.size() / n;
    auto out = detail::result_node(x.shape(), "layer_norm", {x.node(), gain.node(), bias.node()});
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_sigma = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[r] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const double xh = (row[j] - mean) * is;
            (*xhat)[r * n + j] = xh;
            out->values[r * n + j] = xh * gv[j] + bv[j];
        }
    }
    if (out->requires_grad) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node();
        out->backprop = [xn, gn, bn, xhat, inv_sigma, rows, n](detail::Node& self) {
            for (std::size_t r = 0; r < rows; ++r) {
                const double* dy = self.grad.data() + r * n;
                const double* xh = xhat->data() + r * n;
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (std::size_t j = 0; j < n; ++j) gn->grad[j] += dy[j] * xh[j];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (std::size_t j = 0; j < n; ++j) bn->grad[j] += dy[j];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    double mean_dyg = 0.0, mean_dyg_xh = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dyg = dy[j] * gn->values[j];
                        mean_dyg += dyg;
                        mean_dyg_xh += dyg * xh[j];
                    }
                    mean_dyg /= static_cast<double>(n);
                    mean_dyg_xh /= static_cast<double>(n);
                    const double is = (*inv_sigma)[r];
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dyg = dy[j] * gn->values[j];
                        xn->grad[r * n + j] += is * (dyg - mean_dyg - xh[j] * mean_dyg_xh);
                    }
                }
            }
        };
    }
    return Tensor(out);
}

// Inverted dropout: survivors are scaled by 1/(1-p) at train time so that
// inference is the identity.
inline Tensor dropout(const Tensor& x, double p, bool training, RandomStream& rng) {
    if (p < 0.0 || p >= 1.0)
        throw ConfigError("dropout: p must lie in [0,1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    auto out = detail::result_node(x.shape(), "dropout", {x.node()});
    const auto& xv = x.values();
    auto mask = std::make_shared<std::vector<double>>(x.size());
    const double keep_scale = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double f = rng.uniform() < p ? 0.0 : keep_scale;
        (*mask)[i] = f;
        out->values[i] = xv[i] * f;
    }
    if (out->requires_grad) {
        auto xn = x.node();
        out->backprop = [xn, mask](detail::Node& self) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                xn->grad[i] += self.grad[i] * (*mask)[i];
        };
    }
    return Tensor(out);
}

// ===================== reductions =====================

inline Tensor sum(const Tensor& x) {
    auto out = detail::result_node({1}, "sum", {x.node()});
    double total = 0.0;
    for (double v : x.values()) total += v;
    out->values[0] = total;
    if (out->requires_grad) {
        auto xn = x.node();
        out->backprop = [xn](detail::Node& self) {
            xn->ensure_grad();
            for (double& g : xn->grad) g += self.grad[0];
        };
    }
    return Tensor(out);
}

inline Tensor mean(const Tensor& x) {
    if (x.size() == 0) throw ShapeError("mean: empty tensor");
    const double inv = 1.0 / static_cast<double>(x.size());
    auto out = detail::result_node({1}, "mean", {x.node()});
    double total = 0.0;
    for (double v : x.values()) total += v;
    out->values[0] = total * inv;
    if (out->requires_grad) {
        auto xn = x.node();
        out->backprop = [xn, inv](detail::Node& self) {
            xn->ensure_grad();
            for (double& g : xn->grad) g += self.grad[0] * inv;
        };
    }
    return Tensor(out);
}

// Mean over each contiguous block of `group` rows: [G*group, N] -> [G, N].
inline Tensor mean_pool_rows(const Tensor& x, std::size_t group) {
    if (x.rank() != 2 || group == 0 || x.extent(0) % group != 0)
        throw ShapeError("mean_pool_rows: " + detail::shape_str(x.shape()) +
                         " not divisible into blocks of " + std::to_string(group));
    const std::size_t groups = x.extent(0) / group;
    const std::size_t n = x.extent(1);
    const double inv = 1.0 / static_cast<double>(group);
    auto out = detail::result_node({groups, n}, "mean_pool_rows", {x.node()});
    const auto& xv = x.values();
    for (std::size_t g = 0; g < groups; ++g) {
        double* dst = out->values.data() + g * n;
        for (std::size_t r = 0; r < group; ++r) {
            const double* src = xv.data() + (g * group + r) * n;
            for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
        }
        for (std::size_t j = 0; j < n; ++j) dst[j] *= inv;
    }
    if (out->requires_grad) {
        auto xn = x.node();
        out->backprop = [xn, groups, group, n, inv](detail::Node& self) {
            xn->ensure_grad();
            for (std::size_t g = 0; g < groups; ++g)
                for (std::size_t r = 0; r < group; ++r)
                    for (std::size_t j = 0; j < n; ++j)
                        xn->grad[(g * group + r) * n + j] += self.grad[g * n + j] * inv;
        };
    }
    return Tensor(out);
}

// ===================== losses =====================

// Mean over the batch of -sum_c targets[c] * log softmax(logits)[c].
// Targets must be simplex rows; they are treated as constants.
inline Tensor cross_entropy_soft(const Tensor& logits, const Tensor& targets) {
    if (logits.rank() != 2 || targets.rank() != 2 || logits.shape() != targets.shape())
        throw ShapeError("cross_entropy_soft: logits " + detail::shape_str(logits.shape()) +
                         " vs targets " + detail::shape_str(targets.shape()));
    const std::size_t batch = logits.extent(0);
    const std::size_t classes = logits.extent(1);
    if (batch == 0) throw ShapeError("cross_entropy_soft: empty batch");
    const auto& tv = targets.values();
    for (std::size_t r = 0; r < batch; ++r) {
        double total = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            const double t = tv[r * classes + c];
            if (t < -1e-6)
                throw ValidationError("cross_entropy_soft: negative target in row " +
                                      std::to_string(r));
            total += t;
        }
        if (std::abs(total - 1.0) > 1e-6)
            throw ValidationError("cross_entropy_soft: target row " + std::to_string(r) +
                                  " sums to " + std::to_string(total));
    }
    auto out = detail::result_node({1}, "cross_entropy_soft", {logits.node()});
    const auto& lv = logits.values();
    auto probs = std::make_shared<std::vector<double>>(logits.size());
    double loss = 0.0;
    for (std::size_t r = 0; r < batch; ++r) {
        const double* row = lv.data() + r * classes;
        double mx = row[0];
        for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t c = 0; c < classes; ++c) {
            (*probs)[r * classes + c] = std::exp(row[c] - lse);
            loss += tv[r * classes + c] * (lse - row[c]);
        }
    }
    out->values[0] = loss / static_cast<double>(batch);
    if (out->requires_grad) {
        auto ln = logits.node();
        auto tn = targets.node(); // kept alive for the target values
        out->backprop = [ln, tn, probs, batch, classes](detail::Node& self) {
            ln->ensure_grad();
            const double g = self.grad[0] / static_cast<double>(batch);
            for (std::size_t i = 0; i < batch * classes; ++i)
                ln->grad[i] += g * ((*probs)[i] - tn->values[i]);
        };
    }
    return Tensor(out);
}

// ===================== attention =====================

// Single-head scaled dot-product attention on rank-2 operands:
// softmax(Q K^T / sqrt(d_k)) V, softmax taken row-wise.
inline Tensor self_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw ShapeError("self_attention: expects rank-2 operands");
    if (q.extent(1) != k.extent(1))
        throw ShapeError("self_attention: Q " + detail::shape_str(q.shape()) + " and K " +
                         detail::shape_str(k.shape()) + " disagree on key width");
    if (k.extent(0) != v.extent(0))
        throw ShapeError("self_attention: K " + detail::shape_str(k.shape()) + " and V " +
                         detail::shape_str(v.shape()) + " disagree on sequence length");
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.extent(1)));
    Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_dk);
    return matmul(softmax(scores, -1), v);
}

// ===================== backward =====================

// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
// calls; transient (non-leaf) gradients are cleared per sweep so repeated
// sweeps over the same graph stay additive.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, got " +
                            detail::shape_str(loss.shape()));
    if (!loss.requires_grad() && loss.node()->is_leaf()) {
        loss.node()->ensure_grad();
        loss.node()->grad[0] += 1.0;
        return;
    }
    // Collect the reachable subgraph; creation ids give a topological order.
    std::vector<detail::Node*> tape;
    std::unordered_set<detail::Node*> seen;
    std::vector<detail::Node*> stack{loss.node().get()};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        detail::Node* n = stack.back();
        stack.pop_back();
        tape.push_back(n);
        for (const auto& p : n->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(tape.begin(), tape.end(),
              [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });
    for (detail::Node* n : tape)
        if (!n->is_leaf()) n->grad.assign(n->values.size(), 0.0);
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (detail::Node* n : tape)
        if (n->backprop) n->backprop(*n);
}

// ===================== gradient oracle =====================

// Central finite differences, (f(x+eps e_i) - f(x-eps e_i)) / (2 eps).
// Deliberately independent of the reverse-mode path it is used to check.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double eps = 1e-5) {
    std::vector<double> base = x.values();
    std::vector<double> g(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> hi = base, lo = base;
        hi[i] += eps;
        lo[i] -= eps;
        const double fhi = f(Tensor::from_values(x.shape(), std::move(hi)));
        const double flo = f(Tensor::from_values(x.shape(), std::move(lo)));
        g[i] = (fhi - flo) / (2.0 * eps);
    }
    return Tensor::from_values(x.shape(), std::move(g));
}

} // namespace tsmix
