#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "selfq/errors.hpp"

namespace selfq {

using Shape = std::vector<int>;

inline size_t numel(const Shape& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("dimension must be positive");
        n *= static_cast<size_t>(d);
    }
    return n;
}

class Tensor;

// One vertex of a reverse-mode computation graph. Interior nodes carry a
// closure that routes the node's gradient into its parents. Parents are held
// by value (shared handles), so a graph stays alive as long as its root does;
// the closure never captures its own node, which keeps ownership acyclic.
struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<Tensor> parents;
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<double> values) {
        return make(std::move(shape), std::move(values), false);
    }
    static Tensor param(Shape shape, std::vector<double> values) {
        return make(std::move(shape), std::move(values), true);
    }
    static Tensor zeros(Shape shape, bool requires_grad = false) {
        size_t n = numel(shape);
        return make(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }
    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        size_t n = numel(shape);
        return make(std::move(shape), std::vector<double>(n, value), requires_grad);
    }
    static Tensor scalar(double value, bool requires_grad = false) {
        return make({1}, {value}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node().shape; }
    size_t size() const { return node().values.size(); }
    int rank() const { return static_cast<int>(node().shape.size()); }
    int dim(int i) const { return node().shape.at(static_cast<size_t>(i)); }

    const std::vector<double>& values() const { return node().values; }
    std::vector<double>& mutable_values() { return node().values; }
    double item() const {
        if (size() != 1) throw ShapeError("item() requires a scalar tensor");
        return node().values[0];
    }

    bool requires_grad() const { return node().requires_grad; }
    bool has_grad() const { return !node().grad.empty(); }
    const std::vector<double>& grad() const {
        if (node().grad.empty()) throw ShapeError("gradient not populated");
        return node().grad;
    }
    std::vector<double> grad_or_zeros() const {
        if (node().grad.empty()) return std::vector<double>(size(), 0.0);
        return node().grad;
    }
    void zero_grad() { node().grad.clear(); }

    TensorNode& node() const {
        if (!node_) throw ShapeError("use of an undefined tensor");
        return *node_;
    }
    TensorNode* ptr() const { return node_.get(); }

    static Tensor adopt(std::shared_ptr<TensorNode> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

private:
    static Tensor make(Shape shape, std::vector<double> values, bool requires_grad) {
        if (numel(shape) != values.size())
            throw ShapeError("value count does not match shape");
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->values = std::move(values);
        n->requires_grad = requires_grad;
        return adopt(std::move(n));
    }

    std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x))
            throw NumericError(std::string(op) + " produced a non-finite value");
    }
}

inline bool any_requires_grad(const std::vector<Tensor>& parents) {
    for (const auto& p : parents)
        if (p.requires_grad()) return true;
    return false;
}

inline Tensor make_op(Shape shape, std::vector<double> values,
                      std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backward_fn,
                      const char* op) {
    check_finite(values, op);
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = any_requires_grad(parents);
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor::adopt(std::move(n));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch");
}

// C[m,n] += A[m,k] * B[k,n], row-major, stride-1 inner loops.
inline void matmul_acc(double* c, const double* a, const double* b,
                       int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// GA[m,k] += G[m,n] * B[k,n]^T  (both operands row-major).
inline void matmul_acc_bt(double* ga, const double* g, const double* b,
                          int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const double* grow = g + static_cast<size_t>(i) * n;
        double* garow = ga + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double* brow = b + static_cast<size_t>(p) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            garow[p] += acc;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return detail::make_op(a.shape(), std::move(out), {a, b},
        [a, b](TensorNode& self) {
            if (a.requires_grad()) {
                a.node().ensure_grad();
                auto& g = a.node().grad;
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (b.requires_grad()) {
                b.node().ensure_grad();
                auto& g = b.node().grad;
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
        },
        "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return detail::make_op(a.shape(), std::move(out), {a, b},
        [a, b](TensorNode& self) {
            if (a.requires_grad()) {
                a.node().ensure_grad();
                auto& g = a.node().grad;
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (b.requires_grad()) {
                b.node().ensure_grad();
                auto& g = b.node().grad;
                for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
            }
        },
        "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return detail::make_op(a.shape(), std::move(out), {a, b},
        [a, b](TensorNode& self) {
            if (a.requires_grad()) {
                a.node().ensure_grad();
                auto& g = a.node().grad;
                const auto& bv2 = b.values();
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv2[i];
            }
            if (b.requires_grad()) {
                b.node().ensure_grad();
                auto& g = b.node().grad;
                const auto& av2 = a.values();
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av2[i];
            }
        },
        "mul");
}

// Multiply by a compile-time-known scalar constant (the only broadcast form).
inline Tensor scale(const Tensor& a, double c) {
    if (!std::isfinite(c)) throw NumericError("scale: constant is not finite");
    std::vector<double> out(a.size());
    const auto& av = a.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    return detail::make_op(a.shape(), std::move(out), {a},
        [a, c](TensorNode& self) {
            if (!a.requires_grad()) return;
            a.node().ensure_grad();
            auto& g = a.node().grad;
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
        },
        "scale");
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    const auto& av = a.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    return detail::make_op(a.shape(), std::move(out), {a},
        [a](TensorNode& self) {
            if (!a.requires_grad()) return;
            a.node().ensure_grad();
            auto& g = a.node().grad;
            const auto& av2 = a.values();
            for (size_t i = 0; i < g.size(); ++i)
                if (av2[i] > 0.0) g[i] += self.grad[i];
        },
        "relu");
}

// tanh-approximation gelu (the usual 0.044715 cubic form).
inline Tensor gelu(const Tensor& a) {
    static constexpr double kSqrt2OverPi = 0.7978845608028654;
    static constexpr double kCubic = 0.044715;
    std::vector<double> out(a.size());
    const auto& av = a.values();
    for (size_t i = 0; i < out.size(); ++i) {
        const double x = av[i];
        const double u = kSqrt2OverPi * (x + kCubic * x * x * x);
        out[i] = 0.5 * x * (1.0 + std::tanh(u));
    }
    return detail::make_op(a.shape(), std::move(out), {a},
        [a](TensorNode& self) {
            if (!a.requires_grad()) return;
            a.node().ensure_grad();
            auto& g = a.node().grad;
            const auto& av2 = a.values();
            for (size_t i = 0; i < g.size(); ++i) {
                const double x = av2[i];
                const double u = kSqrt2OverPi * (x + kCubic * x * x * x);
                const double t = std::tanh(u);
                const double sech2 = 1.0 - t * t;
                const double du = kSqrt2OverPi * (1.0 + 3.0 * kCubic * x * x);
                const double local = 0.5 * (1.0 + t) + 0.5 * x * sech2 * du;
                g[i] += self.grad[i] * local;
            }
        },
        "gelu");
}

enum class EwKind { add, sub, mul, scale_by_constant, relu, gelu };

// Dispatcher over the elementwise family; binary kinds require b, scale
// requires the constant. Used by tests that sweep every op kind.
inline Tensor elementwise(EwKind kind, const Tensor& a,
                          std::optional<Tensor> b = std::nullopt,
                          double constant = 1.0) {
    switch (kind) {
        case EwKind::add:
            if (!b) throw ShapeError("elementwise add requires two operands");
            return add(a, *b);
        case EwKind::sub:
            if (!b) throw ShapeError("elementwise sub requires two operands");
            return sub(a, *b);
        case EwKind::mul:
            if (!b) throw ShapeError("elementwise mul requires two operands");
            return mul(a, *b);
        case EwKind::scale_by_constant:
            return scale(a, constant);
        case EwKind::relu:
            return relu(a);
        case EwKind::gelu:
            return gelu(a);
    }
    throw ShapeError("unknown elementwise kind");
}

// ---------------------------------------------------------------------------
// Linear algebra and structural ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: both operands must be rank-2");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) throw ShapeError("matmul: inner dimensions disagree");
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    detail::matmul_acc(out.data(), a.values().data(), b.values().data(), m, k, n);
    return detail::make_op({m, n}, std::move(out), {a, b},
        [a, b, m, k, n](TensorNode& self) {
            if (a.requires_grad()) {
                a.node().ensure_grad();
                // grad_a += g . b^T
                detail::matmul_acc_bt(a.node().grad.data(), self.grad.data(),
                                      b.values().data(), m, n, k);
            }
            if (b.requires_grad()) {
                b.node().ensure_grad();
                // grad_b += a^T . g : accumulate row p of grad_b for each a[i,p]
                const double* av = a.values().data();
                const double* g = self.grad.data();
                double* gb = b.node().grad.data();
                for (int i = 0; i < m; ++i) {
                    const double* grow = g + static_cast<size_t>(i) * n;
                    for (int p = 0; p < k; ++p) {
                        const double aval = av[static_cast<size_t>(i) * k + p];
                        if (aval == 0.0) continue;
                        double* gbrow = gb + static_cast<size_t>(p) * n;
                        for (int j = 0; j < n; ++j) gbrow[j] += aval * grow[j];
                    }
                }
            }
        },
        "matmul");
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: rank-2 only");
    const int m = a.dim(0), n = a.dim(1);
    std::vector<double> out(a.size());
    const auto& av = a.values();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(j) * m + i] = av[static_cast<size_t>(i) * n + j];
    return detail::make_op({n, m}, std::move(out), {a},
        [a, m, n](TensorNode& self) {
            if (!a.requires_grad()) return;
            a.node().ensure_grad();
            auto& g = a.node().grad;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    g[static_cast<size_t>(i) * n + j] +=
                        self.grad[static_cast<size_t>(j) * m + i];
        },
        "transpose");
}

inline Tensor slice_rows(const Tensor& a, int start, int count) {
    if (a.rank() != 2) throw ShapeError("slice_rows: rank-2 only");
    const int m = a.dim(0), n = a.dim(1);
    if (start < 0 || count <= 0 || start + count > m)
        throw ShapeError("slice_rows: range out of bounds");
    std::vector<double> out(static_cast<size_t>(count) * n);
    std::copy_n(a.values().begin() + static_cast<size_t>(start) * n, out.size(),
                out.begin());
    return detail::make_op({count, n}, std::move(out), {a},
        [a, start, n](TensorNode& self) {
            if (!a.requires_grad()) return;
            a.node().ensure_grad();
            auto& g = a.node().grad;
            const size_t off = static_cast<size_t>(start) * n;
            for (size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
        },
        "slice_rows");
}

inline Tensor slice_cols(const Tensor& a, int start, int count) {
    if (a.rank() != 2) throw ShapeError("slice_cols: rank-2 only");
    const int m = a.dim(0), n = a.dim(1);
    if (start < 0 || count <= 0 || start + count > n)
        throw ShapeError("slice_cols: range out of bounds");
    std::vector<double> out(static_cast<size_t>(m) * count);
    const auto& av = a.values();
    for (int i = 0; i < m; ++i)
        std::copy_n(av.begin() + static_cast<size_t>(i) * n + start, count,
                    out.begin() + static_cast<size_t>(i) * count);
    return detail::make_op({m, count}, std::move(out), {a},
        [a, start, count, n, m](TensorNode& self) {
            if (!a.requires_grad()) return;
            a.node().ensure_grad();
            auto& g = a.node().grad;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < count; ++j)
                    g[static_cast<size_t>(i) * n + start + j] +=
                        self.grad[static_cast<size_t>(i) * count + j];
        },
        "slice_cols");
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const int n = parts[0].dim(1);
    int m = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != n)
            throw ShapeError("concat_rows: column counts disagree");
        m += p.dim(0);
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(m) * n);
    for (const auto& p : parts)
        out.insert(out.end(), p.values().begin(), p.values().end());
    return detail::make_op({m, n}, std::move(out), parts,
        [parts](TensorNode& self) {
            size_t off = 0;
            for (const auto& p : parts) {
                const size_t len = p.size();
                if (p.requires_grad()) {
                    p.node().ensure_grad();
                    auto& g = p.node().grad;
                    for (size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
                }
                off += len;
            }
        },
        "concat_rows");
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const int m = parts[0].dim(0);
    int n = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != m)
            throw ShapeError("concat_cols: row counts disagree");
        n += p.dim(1);
    }
    std::vector<double> out(static_cast<size_t>(m) * n);
    int col = 0;
    for (const auto& p : parts) {
        const int pc = p.dim(1);
        const auto& pv = p.values();
        for (int i = 0; i < m; ++i)
            std::copy_n(pv.begin() + static_cast<size_t>(i) * pc, pc,
                        out.begin() + static_cast<size_t>(i) * n + col);
        col += pc;
    }
    return detail::make_op({m, n}, std::move(out), parts,
        [parts, m, n](TensorNode& self) {
            int col = 0;
            for (const auto& p : parts) {
                const int pc = p.node().shape[1];
                if (p.requires_grad()) {
                    p.node().ensure_grad();
                    auto& g = p.node().grad;
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < pc; ++j)
                            g[static_cast<size_t>(i) * pc + j] +=
                                self.grad[static_cast<size_t>(i) * n + col + j];
                }
                col += pc;
            }
        },
        "concat_cols");
}

// Row lookup (embedding gather). Indices out of range raise IndexError.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& indices) {
    if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank-2");
    const int rows = table.dim(0), cols = table.dim(1);
    if (indices.empty()) throw ShapeError("gather_rows: empty index list");
    for (int idx : indices)
        if (idx < 0 || idx >= rows)
            throw IndexError("gather_rows: index " + std::to_string(idx) +
                             " out of range [0, " + std::to_string(rows) + ")");
    std::vector<double> out(indices.size() * static_cast<size_t>(cols));
    const auto& tv = table.values();
    for (size_t t = 0; t < indices.size(); ++t)
        std::copy_n(tv.begin() + static_cast<size_t>(indices[t]) * cols, cols,
                    out.begin() + t * cols);
    return detail::make_op({static_cast<int>(indices.size()), cols}, std::move(out),
                           {table},
        [table, indices, cols](TensorNode& self) {
            if (!table.requires_grad()) return;
            table.node().ensure_grad();
            auto& g = table.node().grad;
            for (size_t t = 0; t < indices.size(); ++t) {
                double* grow = g.data() + static_cast<size_t>(indices[t]) * cols;
                const double* srow = self.grad.data() + t * cols;
                for (int j = 0; j < cols; ++j) grow[j] += srow[j];
            }
        },
        "gather_rows");
}

// Add a length-c vector to every row of an [r, c] matrix. Broadcasting is
// otherwise banned, so the one pattern the model needs is its own op.
inline Tensor add_bias_rows(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 2 || bias.rank() != 1)
        throw ShapeError("add_bias_rows: expects [r,c] and [c]");
    const int r = x.dim(0), c = x.dim(1);
    if (bias.dim(0) != c) throw ShapeError("add_bias_rows: width mismatch");
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    const auto& bv = bias.values();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<size_t>(i) * c + j] = xv[static_cast<size_t>(i) * c + j] + bv[j];
    return detail::make_op({r, c}, std::move(out), {x, bias},
        [x, bias, r, c](TensorNode& self) {
            if (x.requires_grad()) {
                x.node().ensure_grad();
                auto& g = x.node().grad;
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (bias.requires_grad()) {
                bias.node().ensure_grad();
                auto& g = bias.node().grad;
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        g[j] += self.grad[static_cast<size_t>(i) * c + j];
            }
        },
        "add_bias_rows");
}

// ---------------------------------------------------------------------------
// Normalization, softmax, losses, reductions
// ---------------------------------------------------------------------------

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps) {
    if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
    if (x.rank() < 1) throw ShapeError("layer_norm: rank must be >= 1");
    const int d = x.dim(x.rank() - 1);
    if (d == 0) throw ShapeError("layer_norm: last axis is empty");
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
        throw ShapeError("layer_norm: gain/bias must have shape [d]");
    const size_t rows = x.size() / static_cast<size_t>(d);
    std::vector<double> out(x.size());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    for (size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double diff = row[j] - mean;
            var += diff * diff;
        }
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (int j = 0; j < d; ++j) {
            const double xh = (row[j] - mean) * is;
            (*xhat)[r * d + j] = xh;
            out[r * d + j] = gv[j] * xh + bv[j];
        }
    }
    return detail::make_op(x.shape(), std::move(out), {x, gain, bias},
        [x, gain, bias, xhat, inv_std, d, rows](TensorNode& self) {
            const auto& gv = gain.values();
            for (size_t r = 0; r < rows; ++r) {
                const double* go = self.grad.data() + r * d;
                const double* xh = xhat->data() + r * d;
                if (x.requires_grad()) {
                    x.node().ensure_grad();
                    double* gx = x.node().grad.data() + r * d;
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double dxh = go[j] * gv[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= d;
                    mean_dxhat_xhat /= d;
                    const double is = (*inv_std)[r];
                    for (int j = 0; j < d; ++j) {
                        const double dxh = go[j] * gv[j];
                        gx[j] += (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat) * is;
                    }
                }
                if (gain.requires_grad()) {
                    gain.node().ensure_grad();
                    double* gg = gain.node().grad.data();
                    for (int j = 0; j < d; ++j) gg[j] += go[j] * xh[j];
                }
                if (bias.requires_grad()) {
                    bias.node().ensure_grad();
                    double* gb = bias.node().grad.data();
                    for (int j = 0; j < d; ++j) gb[j] += go[j];
                }
            }
        },
        "layer_norm");
}

// Softmax along the last axis, stabilized by max subtraction.
inline Tensor softmax(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("softmax: rank must be >= 1");
    const int v = x.dim(x.rank() - 1);
    if (v < 1) throw ShapeError("softmax: empty axis");
    const size_t rows = x.size() / static_cast<size_t>(v);
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    for (size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < v; ++j) {
            const double e = std::exp(row[j] - mx);
            out[r * v + j] = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < v; ++j) out[r * v + j] *= inv;
    }
    return detail::make_op(x.shape(), std::move(out), {x},
        [x, v, rows](TensorNode& self) {
            if (!x.requires_grad()) return;
            x.node().ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const double* y = self.values.data() + r * v;
                const double* gy = self.grad.data() + r * v;
                double* gx = x.node().grad.data() + r * v;
                double dot = 0.0;
                for (int j = 0; j < v; ++j) dot += gy[j] * y[j];
                for (int j = 0; j < v; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
        },
        "softmax");
}

// Position-weighted token cross-entropy: sum_t w_t * (-log softmax(l_t)[tgt_t]).
// Zero-weight positions are skipped outright, so they contribute exactly 0
// to both the value and the gradient.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<double>& weights) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [T, V]");
    const int t_len = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != t_len ||
        static_cast<int>(weights.size()) != t_len)
        throw ShapeError("cross_entropy: targets/weights length must equal T");
    for (int t = 0; t < t_len; ++t) {
        if (targets[t] < 0 || targets[t] >= v)
            throw IndexError("cross_entropy: target index " + std::to_string(targets[t]) +
                             " out of range [0, " + std::to_string(v) + ")");
        if (!std::isfinite(weights[t]))
            throw NumericError("cross_entropy: non-finite weight");
    }
    const auto& lv = logits.values();
    double loss = 0.0;
    for (int t = 0; t < t_len; ++t) {
        if (weights[t] == 0.0) continue;
        const double* row = lv.data() + static_cast<size_t>(t) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
        const double log_z = mx + std::log(sum);
        loss += weights[t] * (log_z - row[targets[t]]);
    }
    return detail::make_op({1}, {loss}, {logits},
        [logits, targets, weights, t_len, v](TensorNode& self) {
            if (!logits.requires_grad()) return;
            logits.node().ensure_grad();
            const double gout = self.grad[0];
            const auto& lv2 = logits.values();
            double* gl = logits.node().grad.data();
            for (int t = 0; t < t_len; ++t) {
                if (weights[t] == 0.0) continue;
                const double* row = lv2.data() + static_cast<size_t>(t) * v;
                double mx = row[0];
                for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                double sum = 0.0;
                for (int j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
                const double inv = 1.0 / sum;
                const double w = weights[t] * gout;
                double* grow = gl + static_cast<size_t>(t) * v;
                for (int j = 0; j < v; ++j)
                    grow[j] += w * std::exp(row[j] - mx) * inv;
                grow[targets[t]] -= w;
            }
        },
        "cross_entropy");
}

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.values()) s += x;
    return detail::make_op({1}, {s}, {a},
        [a](TensorNode& self) {
            if (!a.requires_grad()) return;
            a.node().ensure_grad();
            auto& g = a.node().grad;
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
        },
        "sum");
}

// Select one element (flat index) as a scalar. Test utility.
inline Tensor pick(const Tensor& a, size_t flat_index) {
    if (flat_index >= a.size()) throw IndexError("pick: flat index out of range");
    return detail::make_op({1}, {a.values()[flat_index]}, {a},
        [a, flat_index](TensorNode& self) {
            if (!a.requires_grad()) return;
            a.node().ensure_grad();
            a.node().grad[flat_index] += self.grad[0];
        },
        "pick");
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

// Populates grad on every requires_grad node reachable from loss. Repeated
// calls without zero_grad accumulate.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be a scalar");
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(loss.ptr(), 0);
    seen.insert(loss.ptr());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            TensorNode* child = node->parents[next_child].ptr();
            ++next_child;
            if (child->requires_grad && seen.insert(child).second)
                stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node().ensure_grad();
    loss.node().grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

struct GradCheckReport {
    std::string op_name;
    double max_rel_err = 0.0;
    int num_probes = 0;
};

// Central-difference check of f's gradient at x. Probes every coordinate.
// Relative error: |a - n| / max(1e-8, |a| + |n|).
inline GradCheckReport finite_difference_check(
    const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h,
    std::string op_name = "") {
    if (h <= 0.0) throw ConfigError("finite_difference_check: h must be positive");
    Tensor var = Tensor::param(x.shape(), x.values());
    Tensor y = f(var);
    if (y.size() != 1)
        throw ShapeError("finite_difference_check: f must return a scalar");
    backward(y);
    const std::vector<double> analytic = var.grad_or_zeros();

    GradCheckReport report;
    report.op_name = std::move(op_name);
    report.num_probes = static_cast<int>(x.size());
    std::vector<double> work = x.values();
    for (size_t i = 0; i < work.size(); ++i) {
        const double orig = work[i];
        work[i] = orig + h;
        const double f_plus = f(Tensor::constant(x.shape(), work)).item();
        work[i] = orig - h;
        const double f_minus = f(Tensor::constant(x.shape(), work)).item();
        work[i] = orig;
        const double numeric = (f_plus - f_minus) / (2.0 * h);
        const double denom = std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
        const double rel = std::abs(analytic[i] - numeric) / denom;
        report.max_rel_err = std::max(report.max_rel_err, rel);
    }
    if (!std::isfinite(report.max_rel_err))
        throw NumericError("finite_difference_check: non-finite relative error");
    return report;
}

}  // namespace selfq
