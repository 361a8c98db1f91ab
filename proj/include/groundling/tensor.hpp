#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "groundling/common.hpp"

namespace groundling::ad {

// Reverse-mode autodiff over dense row-major double tensors. Each op computes
// its value eagerly and, when recording is enabled and some input requires
// grad, attaches a backward closure. backward() topologically sorts the tape
// from the loss node and visits each node exactly once in reverse order.
//
// Scope is deliberately narrow: rank-1/rank-2 tensors, 64-bit arithmetic, the
// exact primitive set the model and losses need. The only broadcast is the
// leading-axis bias add.

inline thread_local bool g_record_graph = true;

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(g_record_graph) { g_record_graph = false; }
    ~NoGradGuard() { g_record_graph = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

struct TensorNode {
    std::vector<int64_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, same length as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}

    static Tensor from(std::vector<int64_t> shape, std::vector<double> data,
                       bool requires_grad = false) {
        int64_t numel = 1;
        for (int64_t e : shape) {
            if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
            numel *= e;
        }
        if (numel != static_cast<int64_t>(data.size()))
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
        int64_t numel = 1;
        for (int64_t e : shape) numel *= e;
        return from(std::move(shape), std::vector<double>(static_cast<size_t>(numel), 0.0),
                    requires_grad);
    }

    static Tensor full(std::vector<int64_t> shape, double v, bool requires_grad = false) {
        int64_t numel = 1;
        for (int64_t e : shape) numel *= e;
        return from(std::move(shape), std::vector<double>(static_cast<size_t>(numel), v),
                    requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return n_ != nullptr; }
    const std::vector<int64_t>& shape() const { return n_->shape; }
    int64_t numel() const { return static_cast<int64_t>(n_->value.size()); }
    int64_t rank() const { return static_cast<int64_t>(n_->shape.size()); }
    int64_t rows() const { return n_->shape.at(0); }
    int64_t cols() const { return n_->shape.at(1); }
    bool requires_grad() const { return n_->requires_grad; }

    const std::vector<double>& values() const { return n_->value; }
    std::vector<double>& values() { return n_->value; }
    const std::vector<double>& grad() const { return n_->grad; }

    double item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar " + shape_str(n_->shape));
        return n_->value[0];
    }
    double at(int64_t i) const { return n_->value[static_cast<size_t>(i)]; }
    double at(int64_t i, int64_t j) const {
        return n_->value[static_cast<size_t>(i * cols() + j)];
    }

    void zero_grad() { n_->grad.assign(n_->value.size(), 0.0); }

    std::shared_ptr<TensorNode> node() const { return n_; }

private:
    std::shared_ptr<TensorNode> n_;
};

// ----------------------------- graph plumbing -----------------------------

namespace detail {

inline Tensor make_op(std::vector<int64_t> shape, std::vector<double> value,
                      std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backward_fn) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (g_record_graph && needs) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(n));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

inline void check_rank2(const Tensor& a, const char* op) {
    if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2, got " +
                                        shape_str(a.shape()));
}

inline void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace detail

// The recorded tape: operations in topological order. backward() walks it in
// reverse, visiting every reachable node exactly once.
struct Tape {
    std::vector<TensorNode*> order;
};

inline Tape build_tape(const Tensor& root) {
    Tape tape;
    std::unordered_set<TensorNode*> seen;
    // iterative post-order DFS
    std::vector<std::pair<TensorNode*, size_t>> stack;
    if (root.node() && root.node()->requires_grad) stack.push_back({root.node().get(), 0});
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx == 0 && seen.count(node)) {
            stack.pop_back();
            continue;
        }
        if (idx < node->parents.size()) {
            TensorNode* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !seen.count(p)) stack.push_back({p, 0});
        } else {
            seen.insert(node);
            tape.order.push_back(node);
            stack.pop_back();
        }
    }
    return tape;
}

inline void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw ShapeError("backward: root must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;
    Tape tape = build_tape(loss);
    for (TensorNode* n : tape.order) n->ensure_grad();
    loss.node()->grad[0] = 1.0;
    for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

// ----------------------------- primitives -----------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check_rank2(a, "matmul");
    detail::check_rank2(b, "matmul");
    const int64_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2)
        throw ShapeError("matmul: inner extents disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    for (int64_t i = 0; i < m; ++i) {
        double* po = out.data() + i * n;
        const double* par = pa + i * k;
        for (int64_t t = 0; t < k; ++t) {
            const double av = par[t];
            if (av == 0.0) continue;
            const double* pbr = pb + t * n;
            for (int64_t j = 0; j < n; ++j) po[j] += av * pbr[j];
        }
    }
    auto an = a.node(), bn = b.node();
    return detail::make_op(
        {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode& self) {
            const double* g = self.grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                double* da = an->grad.data();
                const double* pb = bn->value.data();
                // dA = G * B^T
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t t = 0; t < k; ++t) {
                        double acc = 0.0;
                        const double* gr = g + i * n;
                        const double* br = pb + t * n;
                        for (int64_t j = 0; j < n; ++j) acc += gr[j] * br[j];
                        da[i * k + t] += acc;
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                double* db = bn->grad.data();
                const double* pa = an->value.data();
                // dB = A^T * G
                for (int64_t t = 0; t < k; ++t)
                    for (int64_t i = 0; i < m; ++i) {
                        const double av = pa[i * k + t];
                        if (av == 0.0) continue;
                        const double* gr = g + i * n;
                        double* dbr = db + t * n;
                        for (int64_t j = 0; j < n; ++j) dbr[j] += av * gr[j];
                    }
            }
        });
}

inline Tensor transpose(const Tensor& a) {
    detail::check_rank2(a, "transpose");
    const int64_t m = a.rows(), n = a.cols();
    std::vector<double> out(static_cast<size_t>(m * n));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(j * m + i)] = a.at(i, j);
    auto an = a.node();
    return detail::make_op({n, m}, std::move(out), {a}, [an, m, n](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int64_t j = 0; j < n; ++j)
            for (int64_t i = 0; i < m; ++i)
                an->grad[static_cast<size_t>(i * n + j)] += self.grad[static_cast<size_t>(j * m + i)];
    });
}

namespace detail {

// elementwise binary op with per-element gradients computed from saved values
template <class FwdFn, class BwdFn>
Tensor ew_binary(const Tensor& a, const Tensor& b, const char* name, FwdFn fwd, BwdFn bwd) {
    check_same_shape(a, b, name);
    const size_t n = static_cast<size_t>(a.numel());
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = fwd(a.values()[i], b.values()[i]);
    auto an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b}, [an, bn, bwd](TensorNode& self) {
        const size_t n = self.value.size();
        const bool ga = an->requires_grad, gb = bn->requires_grad;
        if (ga) an->ensure_grad();
        if (gb) bn->ensure_grad();
        for (size_t i = 0; i < n; ++i) {
            auto [da, db] = bwd(an->value[i], bn->value[i], self.value[i]);
            if (ga) an->grad[i] += self.grad[i] * da;
            if (gb) bn->grad[i] += self.grad[i] * db;
        }
    });
}

template <class FwdFn, class BwdFn>
Tensor ew_unary(const Tensor& a, const char* /*name*/, FwdFn fwd, BwdFn bwd) {
    const size_t n = static_cast<size_t>(a.numel());
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = fwd(a.values()[i]);
    auto an = a.node();
    return make_op(a.shape(), std::move(out), {a}, [an, bwd](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const size_t n = self.value.size();
        for (size_t i = 0; i < n; ++i)
            an->grad[i] += self.grad[i] * bwd(an->value[i], self.value[i]);
    });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(a, b, "add", [](double x, double y) { return x + y; },
                             [](double, double, double) { return std::pair{1.0, 1.0}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(a, b, "sub", [](double x, double y) { return x - y; },
                             [](double, double, double) { return std::pair{1.0, -1.0}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(a, b, "mul", [](double x, double y) { return x * y; },
                             [](double x, double y, double) { return std::pair{y, x}; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(a, b, "div", [](double x, double y) { return x / y; },
                             [](double x, double y, double) {
                                 return std::pair{1.0 / y, -x / (y * y)};
                             });
}

// ties route the gradient to the first argument
inline Tensor minimum(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(a, b, "minimum",
                             [](double x, double y) { return x <= y ? x : y; },
                             [](double x, double y, double) {
                                 return x <= y ? std::pair{1.0, 0.0} : std::pair{0.0, 1.0};
                             });
}

inline Tensor maximum(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(a, b, "maximum",
                             [](double x, double y) { return x >= y ? x : y; },
                             [](double x, double y, double) {
                                 return x >= y ? std::pair{1.0, 0.0} : std::pair{0.0, 1.0};
                             });
}

inline Tensor scale(const Tensor& a, double c) {
    return detail::ew_unary(a, "scale", [c](double x) { return c * x; },
                            [c](double, double) { return c; });
}

inline Tensor add_const(const Tensor& a, double c) {
    return detail::ew_unary(a, "add_const", [c](double x) { return x + c; },
                            [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor sigmoid(const Tensor& a) {
    return detail::ew_unary(a, "sigmoid",
                            [](double x) {
                                return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                              : std::exp(x) / (1.0 + std::exp(x));
                            },
                            [](double, double y) { return y * (1.0 - y); });
}

inline Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.7071067811865476;
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    return detail::ew_unary(a, "gelu",
                            [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
                            [=](double x, double) {
                                double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                                double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                                return cdf + x * pdf;
                            });
}

inline Tensor softplus(const Tensor& a) {
    return detail::ew_unary(a, "softplus",
                            [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
                            [](double x, double) {
                                return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                              : std::exp(x) / (1.0 + std::exp(x));
                            });
}

inline Tensor relu(const Tensor& a) {
    return detail::ew_unary(a, "relu", [](double x) { return x > 0 ? x : 0.0; },
                            [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& a) {
    return detail::ew_unary(a, "exp", [](double x) { return std::exp(x); },
                            [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
    return detail::ew_unary(a, "log", [](double x) { return std::log(x); },
                            [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
    return detail::ew_unary(a, "sqrt", [](double x) { return std::sqrt(x); },
                            [](double, double y) { return 0.5 / y; });
}

inline Tensor square(const Tensor& a) { return mul(a, a); }

// A[m,n] + b[n], broadcast over the leading axis (the only broadcast we allow)
inline Tensor add_bias(const Tensor& a, const Tensor& b) {
    detail::check_rank2(a, "add_bias");
    if (b.rank() != 1 || b.shape()[0] != a.cols())
        throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not match " +
                         shape_str(a.shape()));
    const int64_t m = a.rows(), n = a.cols();
    std::vector<double> out(static_cast<size_t>(m * n));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
            out[static_cast<size_t>(i * n + j)] = a.at(i, j) + b.at(j);
    auto an = a.node(), bn = b.node();
    return detail::make_op({m, n}, std::move(out), {a, b}, [an, bn, m, n](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j)
                    bn->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(i * n + j)];
        }
    });
}

// row-wise softmax with max subtraction
inline Tensor row_softmax(const Tensor& a) {
    detail::check_rank2(a, "row_softmax");
    const int64_t m = a.rows(), n = a.cols();
    std::vector<double> out(static_cast<size_t>(m * n));
    for (int64_t i = 0; i < m; ++i) {
        const double* x = a.values().data() + i * n;
        double mx = x[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        double* y = out.data() + i * n;
        for (int64_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (int64_t j = 0; j < n; ++j) y[j] /= z;
    }
    auto an = a.node();
    return detail::make_op({m, n}, std::move(out), {a}, [an, m, n](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int64_t i = 0; i < m; ++i) {
            const double* y = self.value.data() + i * n;
            const double* g = self.grad.data() + i * n;
            double dot = 0.0;
            for (int64_t j = 0; j < n; ++j) dot += y[j] * g[j];
            double* da = an->grad.data() + i * n;
            for (int64_t j = 0; j < n; ++j) da[j] += y[j] * (g[j] - dot);
        }
    });
}

// per-row log(sum(exp(x))), shape [m,1]; backward is the row softmax
inline Tensor logsumexp_rows(const Tensor& a) {
    detail::check_rank2(a, "logsumexp_rows");
    const int64_t m = a.rows(), n = a.cols();
    std::vector<double> out(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) {
        const double* x = a.values().data() + i * n;
        double mx = x[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (int64_t j = 0; j < n; ++j) z += std::exp(x[j] - mx);
        out[static_cast<size_t>(i)] = mx + std::log(z);
    }
    auto an = a.node();
    return detail::make_op({m, 1}, std::move(out), {a}, [an, m, n](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int64_t i = 0; i < m; ++i) {
            const double lse = self.value[static_cast<size_t>(i)];
            const double g = self.grad[static_cast<size_t>(i)];
            const double* x = an->value.data() + i * n;
            double* da = an->grad.data() + i * n;
            for (int64_t j = 0; j < n; ++j) da[j] += g * std::exp(x[j] - lse);
        }
    });
}

// per-row layer normalization: y = (x - mean) / sqrt(var + eps) * gamma + beta
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    detail::check_rank2(x, "layer_norm");
    const int64_t m = x.rows(), n = x.cols();
    if (gamma.rank() != 1 || gamma.shape()[0] != n || beta.rank() != 1 || beta.shape()[0] != n)
        throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(n) + "]");
    std::vector<double> out(static_cast<size_t>(m * n));
    auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(m * n));
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) {
        const double* xr = x.values().data() + i * n;
        double mean = 0.0;
        for (int64_t j = 0; j < n; ++j) mean += xr[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (int64_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(n);
        const double s = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(i)] = s;
        for (int64_t j = 0; j < n; ++j) {
            const double h = (xr[j] - mean) * s;
            (*xhat)[static_cast<size_t>(i * n + j)] = h;
            out[static_cast<size_t>(i * n + j)] = h * gamma.at(j) + beta.at(j);
        }
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return detail::make_op(
        {m, n}, std::move(out), {x, gamma, beta},
        [xn, gn, bn, xhat, inv_std, m, n](TensorNode& self) {
            for (int64_t i = 0; i < m; ++i) {
                const double* g = self.grad.data() + i * n;
                const double* h = xhat->data() + i * n;
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (int64_t j = 0; j < n; ++j) gn->grad[static_cast<size_t>(j)] += g[j] * h[j];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (int64_t j = 0; j < n; ++j) bn->grad[static_cast<size_t>(j)] += g[j];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    const double s = (*inv_std)[static_cast<size_t>(i)];
                    double sum_dh = 0.0, sum_dh_h = 0.0;
                    for (int64_t j = 0; j < n; ++j) {
                        const double dh = g[j] * gn->value[static_cast<size_t>(j)];
                        sum_dh += dh;
                        sum_dh_h += dh * h[j];
                    }
                    const double inv_n = 1.0 / static_cast<double>(n);
                    double* dx = xn->grad.data() + i * n;
                    for (int64_t j = 0; j < n; ++j) {
                        const double dh = g[j] * gn->value[static_cast<size_t>(j)];
                        dx[j] += s * (dh - inv_n * sum_dh - h[j] * inv_n * sum_dh_h);
                    }
                }
            }
        });
}

// lookup rows of `table` [V,d] by token id; grad scatter-adds into the table
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    detail::check_rank2(table, "embedding");
    const int64_t v = table.rows(), d = table.cols();
    const int64_t m = static_cast<int64_t>(ids.size());
    if (m == 0) throw ShapeError("embedding: empty id list");
    std::vector<double> out(static_cast<size_t>(m * d));
    for (int64_t i = 0; i < m; ++i) {
        if (ids[static_cast<size_t>(i)] < 0 || ids[static_cast<size_t>(i)] >= v)
            throw InputError("embedding: id " + std::to_string(ids[static_cast<size_t>(i)]) +
                             " out of range [0," + std::to_string(v) + ")");
        const double* src = table.values().data() + ids[static_cast<size_t>(i)] * d;
        std::copy(src, src + d, out.data() + i * d);
    }
    auto tn = table.node();
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    return detail::make_op({m, d}, std::move(out), {table}, [tn, ids_copy, d](TensorNode& self) {
        if (!tn->requires_grad) return;
        tn->ensure_grad();
        const int64_t m = static_cast<int64_t>(ids_copy->size());
        for (int64_t i = 0; i < m; ++i) {
            double* dst = tn->grad.data() + (*ids_copy)[static_cast<size_t>(i)] * d;
            const double* g = self.grad.data() + i * d;
            for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
        }
    });
}

inline Tensor sum_all(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    auto an = a.node();
    return detail::make_op({1}, {acc}, {a}, [an](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double g = self.grad[0];
        for (double& d : an->grad) d += g;
    });
}

inline Tensor mean_all(const Tensor& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// per-row sum, shape [m,1]
inline Tensor row_sum(const Tensor& a) {
    detail::check_rank2(a, "row_sum");
    const int64_t m = a.rows(), n = a.cols();
    std::vector<double> out(static_cast<size_t>(m), 0.0);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(i)] += a.at(i, j);
    auto an = a.node();
    return detail::make_op({m, 1}, std::move(out), {a}, [an, m, n](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int64_t i = 0; i < m; ++i) {
            const double g = self.grad[static_cast<size_t>(i)];
            double* da = an->grad.data() + i * n;
            for (int64_t j = 0; j < n; ++j) da[j] += g;
        }
    });
}

inline Tensor slice_rows(const Tensor& a, int64_t r0, int64_t r1) {
    detail::check_rank2(a, "slice_rows");
    if (r0 < 0 || r1 > a.rows() || r0 >= r1)
        throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," +
                         std::to_string(r1) + ") for " + shape_str(a.shape()));
    const int64_t n = a.cols(), m = r1 - r0;
    std::vector<double> out(a.values().begin() + r0 * n, a.values().begin() + r1 * n);
    auto an = a.node();
    return detail::make_op({m, n}, std::move(out), {a}, [an, r0, m, n](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j)
                an->grad[static_cast<size_t>((r0 + i) * n + j)] +=
                    self.grad[static_cast<size_t>(i * n + j)];
    });
}

inline Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1) {
    detail::check_rank2(a, "slice_cols");
    if (c0 < 0 || c1 > a.cols() || c0 >= c1)
        throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") for " + shape_str(a.shape()));
    const int64_t m = a.rows(), n = a.cols(), w = c1 - c0;
    std::vector<double> out(static_cast<size_t>(m * w));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < w; ++j) out[static_cast<size_t>(i * w + j)] = a.at(i, c0 + j);
    auto an = a.node();
    return detail::make_op({m, w}, std::move(out), {a}, [an, c0, m, n, w](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < w; ++j)
                an->grad[static_cast<size_t>(i * n + c0 + j)] +=
                    self.grad[static_cast<size_t>(i * w + j)];
    });
}

inline Tensor take_rows(const Tensor& a, const std::vector<int>& rows) {
    detail::check_rank2(a, "take_rows");
    const int64_t n = a.cols(), m = static_cast<int64_t>(rows.size());
    if (m == 0) throw ShapeError("take_rows: empty index list");
    std::vector<double> out(static_cast<size_t>(m * n));
    for (int64_t i = 0; i < m; ++i) {
        const int r = rows[static_cast<size_t>(i)];
        if (r < 0 || r >= a.rows())
            throw ShapeError("take_rows: index " + std::to_string(r) + " out of range");
        std::copy(a.values().data() + r * n, a.values().data() + (r + 1) * n, out.data() + i * n);
    }
    auto an = a.node();
    auto idx = std::make_shared<std::vector<int>>(rows);
    return detail::make_op({m, n}, std::move(out), {a}, [an, idx, n](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < idx->size(); ++i) {
            double* dst = an->grad.data() + (*idx)[i] * n;
            const double* g = self.grad.data() + static_cast<int64_t>(i) * n;
            for (int64_t j = 0; j < n; ++j) dst[j] += g[j];
        }
    });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    const int64_t n = parts[0].cols();
    int64_t m = 0;
    for (const auto& p : parts) {
        detail::check_rank2(p, "concat_rows");
        if (p.cols() != n) throw ShapeError("concat_rows: column mismatch");
        m += p.rows();
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(m * n));
    for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    std::vector<Tensor> ps = parts;
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (auto& p : ps) nodes.push_back(p.node());
    return detail::make_op({m, n}, std::move(out), ps, [nodes, n](TensorNode& self) {
        int64_t row = 0;
        for (auto& pn : nodes) {
            const int64_t pm = pn->shape[0];
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (int64_t i = 0; i < pm; ++i)
                    for (int64_t j = 0; j < n; ++j)
                        pn->grad[static_cast<size_t>(i * n + j)] +=
                            self.grad[static_cast<size_t>((row + i) * n + j)];
            }
            row += pm;
        }
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const int64_t m = parts[0].rows();
    int64_t n = 0;
    for (const auto& p : parts) {
        detail::check_rank2(p, "concat_cols");
        if (p.rows() != m) throw ShapeError("concat_cols: row mismatch");
        n += p.cols();
    }
    std::vector<double> out(static_cast<size_t>(m * n));
    int64_t col = 0;
    for (const auto& p : parts) {
        const int64_t w = p.cols();
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < w; ++j)
                out[static_cast<size_t>(i * n + col + j)] = p.at(i, j);
        col += w;
    }
    std::vector<Tensor> ps = parts;
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (auto& p : ps) nodes.push_back(p.node());
    return detail::make_op({m, n}, std::move(out), ps, [nodes, m, n](TensorNode& self) {
        int64_t col = 0;
        for (auto& pn : nodes) {
            const int64_t w = pn->shape[1];
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < w; ++j)
                        pn->grad[static_cast<size_t>(i * w + j)] +=
                            self.grad[static_cast<size_t>(i * n + col + j)];
            }
            col += w;
        }
    });
}

// mean over rows of -log softmax(logits)[target]; backward is softmax minus one-hot
inline Tensor softmax_xent_rows(const Tensor& logits, const std::vector<int>& targets) {
    detail::check_rank2(logits, "softmax_xent_rows");
    detail::check_finite(logits.values(), "softmax_cross_entropy");
    const int64_t m = logits.rows(), n = logits.cols();
    if (static_cast<int64_t>(targets.size()) != m)
        throw ShapeError("softmax_xent_rows: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(m) + " rows");
    double total = 0.0;
    for (int64_t i = 0; i < m; ++i) {
        const int t = targets[static_cast<size_t>(i)];
        if (t < 0 || t >= n)
            throw PreconditionError("softmax_cross_entropy: target " + std::to_string(t) +
                                    " out of range [0," + std::to_string(n) + ")");
        const double* x = logits.values().data() + i * n;
        double mx = x[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (int64_t j = 0; j < n; ++j) z += std::exp(x[j] - mx);
        total += mx + std::log(z) - x[t];
    }
    total /= static_cast<double>(m);
    auto ln = logits.node();
    auto tcopy = std::make_shared<std::vector<int>>(targets);
    return detail::make_op({1}, {total}, {logits}, [ln, tcopy, m, n](TensorNode& self) {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(m);
        for (int64_t i = 0; i < m; ++i) {
            const double* x = ln->value.data() + i * n;
            double mx = x[0];
            for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
            double z = 0.0;
            for (int64_t j = 0; j < n; ++j) z += std::exp(x[j] - mx);
            double* dx = ln->grad.data() + i * n;
            for (int64_t j = 0; j < n; ++j) dx[j] += g * (std::exp(x[j] - mx) / z);
            dx[(*tcopy)[static_cast<size_t>(i)]] -= g;
        }
    });
}

inline Tensor reshape(const Tensor& a, std::vector<int64_t> shape) {
    int64_t numel = 1;
    for (int64_t e : shape) numel *= e;
    if (numel != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    auto an = a.node();
    return detail::make_op(std::move(shape), a.values(), {a}, [an](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

// -log softmax(logits)[target] for a rank-1 logit vector
inline Tensor softmax_cross_entropy(const Tensor& logits, int target) {
    if (logits.rank() != 1)
        throw ShapeError("softmax_cross_entropy: expected rank-1 logits, got " +
                         shape_str(logits.shape()));
    return softmax_xent_rows(reshape(logits, {1, logits.shape()[0]}), {target});
}

// stable binary cross-entropy against constant probability targets;
// d/dx = sigmoid(x) - t
inline Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets) {
    if (static_cast<size_t>(logits.numel()) != targets.size())
        throw ShapeError("bce_with_logits: target count mismatch");
    const size_t n = targets.size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) {
        const double x = logits.values()[i];
        out[i] = std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
    }
    auto ln = logits.node();
    auto t = std::make_shared<std::vector<double>>(targets);
    return detail::make_op(logits.shape(), std::move(out), {logits}, [ln, t](TensorNode& self) {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        for (size_t i = 0; i < self.value.size(); ++i) {
            const double x = ln->value[i];
            const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            ln->grad[i] += self.grad[i] * (s - (*t)[i]);
        }
    });
}

}  // namespace groundling::ad
