#pragma once

// Dense tensors with reverse-mode differentiation on a linear tape.
// Everything is double precision and single-threaded per tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace trendlab::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;   // lazily allocated, same length as value
    bool requires_grad = false;
    std::function<void()> backprop;  // empty for leaves
    std::string name;                // set for named parameters

    std::size_t size() const { return value.size(); }
};

using Var = std::shared_ptr<Node>;

inline void ensure_grad(const Var& v) {
    if (v->grad.size() != v->value.size()) v->grad.assign(v->value.size(), 0.0);
}

inline void zero_grad(const std::vector<Var>& params) {
    for (auto& p : params) p->grad.assign(p->value.size(), 0.0);
}

inline Var make_tensor(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (numel(shape) != values.size())
        throw std::invalid_argument("tensor shape " + shape_str(shape) + " does not match " +
                                    std::to_string(values.size()) + " values");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return n;
}

inline Var make_param(std::string name, Shape shape, std::vector<double> values) {
    auto v = make_tensor(std::move(shape), std::move(values), true);
    v->name = std::move(name);
    return v;
}

inline Var zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(numel(shape), 0.0);
    return make_tensor(std::move(shape), std::move(v), requires_grad);
}

inline Var scalar(double x) { return make_tensor({1}, {x}); }

// Records intermediate nodes in creation order; that order is a valid
// topological order, so backward is a single reverse sweep.
class Tape {
public:
    Var record(Shape shape, bool requires_grad) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value.assign(numel(n->shape), 0.0);
        n->requires_grad = requires_grad;
        if (requires_grad) nodes_.push_back(n);
        return n;
    }

    void backward(const Var& loss) {
        if (loss->size() != 1)
            throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                        shape_str(loss->shape));
        if (backward_done_)
            throw std::runtime_error("backward called twice on the same tape without reset");
        backward_done_ = true;
        for (auto& n : nodes_) ensure_grad(n);
        ensure_grad(loss);
        loss->grad[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if ((*it)->backprop) (*it)->backprop();
        }
    }

    void reset() {
        nodes_.clear();
        backward_done_ = false;
    }

    std::size_t recorded() const { return nodes_.size(); }

private:
    std::vector<Var> nodes_;
    bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// broadcasting: b may equal a's shape, be a suffix of it (bias-style), or be
// one scalar per leading batch entry ([B] / [B,1] against [B,...]).

enum class BCast { same, suffix, batch };

inline BCast broadcast_kind(const Shape& a, const Shape& b) {
    if (a == b) return BCast::same;
    if (b.size() < a.size() &&
        std::equal(b.rbegin(), b.rend(), a.rbegin())) return BCast::suffix;
    if (!a.empty() && numel(b) == a[0] && b[0] == a[0]) return BCast::batch;
    throw std::invalid_argument("incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

namespace detail {

// index of b that pairs with flat index i of a
struct BIndex {
    BCast kind;
    std::size_t bn;      // numel(b)
    std::size_t inner;   // a.numel / batch (batch mode)
    std::size_t operator()(std::size_t i) const {
        switch (kind) {
            case BCast::same: return i;
            case BCast::suffix: return i % bn;
            case BCast::batch: return i / inner;
        }
        return 0;
    }
};

inline BIndex bindex(const Shape& a, const Shape& b) {
    BIndex bi;
    bi.kind = broadcast_kind(a, b);
    bi.bn = numel(b);
    bi.inner = bi.kind == BCast::batch ? numel(a) / a[0] : 0;
    return bi;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops

inline Var add(Tape& t, const Var& a, const Var& b) {
    auto bi = detail::bindex(a->shape, b->shape);
    auto out = t.record(a->shape, a->requires_grad || b->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] + b->value[bi(i)];
    if (out->requires_grad) out->backprop = [a, b, out, bi] {
        if (a->requires_grad) {
            ensure_grad(a);
            for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
        }
        if (b->requires_grad) {
            ensure_grad(b);
            for (std::size_t i = 0; i < a->size(); ++i) b->grad[bi(i)] += out->grad[i];
        }
    };
    return out;
}

inline Var sub(Tape& t, const Var& a, const Var& b) {
    auto bi = detail::bindex(a->shape, b->shape);
    auto out = t.record(a->shape, a->requires_grad || b->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] - b->value[bi(i)];
    if (out->requires_grad) out->backprop = [a, b, out, bi] {
        if (a->requires_grad) {
            ensure_grad(a);
            for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
        }
        if (b->requires_grad) {
            ensure_grad(b);
            for (std::size_t i = 0; i < a->size(); ++i) b->grad[bi(i)] -= out->grad[i];
        }
    };
    return out;
}

inline Var mul(Tape& t, const Var& a, const Var& b) {
    auto bi = detail::bindex(a->shape, b->shape);
    auto out = t.record(a->shape, a->requires_grad || b->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] * b->value[bi(i)];
    if (out->requires_grad) out->backprop = [a, b, out, bi] {
        if (a->requires_grad) {
            ensure_grad(a);
            for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i] * b->value[bi(i)];
        }
        if (b->requires_grad) {
            ensure_grad(b);
            for (std::size_t i = 0; i < a->size(); ++i) b->grad[bi(i)] += out->grad[i] * a->value[i];
        }
    };
    return out;
}

inline Var div(Tape& t, const Var& a, const Var& b) {
    auto bi = detail::bindex(a->shape, b->shape);
    auto out = t.record(a->shape, a->requires_grad || b->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] / b->value[bi(i)];
    if (out->requires_grad) out->backprop = [a, b, out, bi] {
        if (a->requires_grad) {
            ensure_grad(a);
            for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i] / b->value[bi(i)];
        }
        if (b->requires_grad) {
            ensure_grad(b);
            for (std::size_t i = 0; i < a->size(); ++i) {
                double bv = b->value[bi(i)];
                b->grad[bi(i)] -= out->grad[i] * a->value[i] / (bv * bv);
            }
        }
    };
    return out;
}

inline Var maximum(Tape& t, const Var& a, const Var& b) {
    if (a->shape != b->shape)
        throw std::invalid_argument("maximum requires equal shapes, got " + shape_str(a->shape) +
                                    " and " + shape_str(b->shape));
    auto out = t.record(a->shape, a->requires_grad || b->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = std::max(a->value[i], b->value[i]);
    if (out->requires_grad) out->backprop = [a, b, out] {
        if (a->requires_grad) ensure_grad(a);
        if (b->requires_grad) ensure_grad(b);
        for (std::size_t i = 0; i < a->size(); ++i) {
            if (a->value[i] >= b->value[i]) {
                if (a->requires_grad) a->grad[i] += out->grad[i];
            } else if (b->requires_grad) {
                b->grad[i] += out->grad[i];
            }
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// scalar-argument ops

inline Var scale(Tape& t, const Var& a, double c) {
    auto out = t.record(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] * c;
    if (out->requires_grad) out->backprop = [a, out, c] {
        ensure_grad(a);
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i] * c;
    };
    return out;
}

inline Var add_scalar(Tape& t, const Var& a, double c) {
    auto out = t.record(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] + c;
    if (out->requires_grad) out->backprop = [a, out] {
        ensure_grad(a);
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
    };
    return out;
}

inline Var max_scalar(Tape& t, const Var& a, double c) {
    auto out = t.record(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = std::max(a->value[i], c);
    if (out->requires_grad) out->backprop = [a, out, c] {
        ensure_grad(a);
        for (std::size_t i = 0; i < a->size(); ++i)
            if (a->value[i] >= c) a->grad[i] += out->grad[i];
    };
    return out;
}

inline Var power(Tape& t, const Var& a, double p) {
    auto out = t.record(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = std::pow(a->value[i], p);
    if (out->requires_grad) out->backprop = [a, out, p] {
        ensure_grad(a);
        for (std::size_t i = 0; i < a->size(); ++i)
            a->grad[i] += out->grad[i] * p * std::pow(a->value[i], p - 1.0);
    };
    return out;
}

// ---------------------------------------------------------------------------
// elementwise unary ops

namespace detail {

template <class F, class D>
Var unary(Tape& t, const Var& a, F fwd, D dval) {
    auto out = t.record(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = fwd(a->value[i]);
    if (out->requires_grad) out->backprop = [a, out, dval] {
        ensure_grad(a);
        for (std::size_t i = 0; i < a->size(); ++i)
            a->grad[i] += out->grad[i] * dval(a->value[i], out->value[i]);
    };
    return out;
}

}  // namespace detail

inline Var sigmoid(Tape& t, const Var& a) {
    return detail::unary(t, a,
        [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Tape& t, const Var& a) {
    return detail::unary(t, a,
        [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

inline Var exp(Tape& t, const Var& a) {
    return detail::unary(t, a,
        [](double x) { return std::exp(x); },
        [](double, double y) { return y; });
}

inline Var log(Tape& t, const Var& a) {
    return detail::unary(t, a,
        [](double x) { return std::log(x); },
        [](double x, double) { return 1.0 / x; });
}

inline Var relu(Tape& t, const Var& a) {
    return detail::unary(t, a,
        [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var silu(Tape& t, const Var& a) {
    return detail::unary(t, a,
        [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x, double) {
            double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

inline Var gelu(Tape& t, const Var& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::unary(t, a,
        [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [=](double x, double) {
            double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            return cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
        });
}

inline Var logsigmoid(Tape& t, const Var& a) {
    return detail::unary(t, a,
        [](double x) { return x < 0.0 ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x)); },
        [](double x, double) { return 1.0 / (1.0 + std::exp(x)); });
}

inline Var abs(Tape& t, const Var& a) {
    return detail::unary(t, a,
        [](double x) { return std::fabs(x); },
        [](double x, double) { return x >= 0.0 ? 1.0 : -1.0; });
}

// ---------------------------------------------------------------------------
// reductions

inline Var sum(Tape& t, const Var& a) {
    auto out = t.record({1}, a->requires_grad);
    out->value[0] = std::accumulate(a->value.begin(), a->value.end(), 0.0);
    if (out->requires_grad) out->backprop = [a, out] {
        ensure_grad(a);
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[0];
    };
    return out;
}

inline Var mean(Tape& t, const Var& a) {
    double inv = 1.0 / static_cast<double>(a->size());
    auto out = t.record({1}, a->requires_grad);
    out->value[0] = std::accumulate(a->value.begin(), a->value.end(), 0.0) * inv;
    if (out->requires_grad) out->backprop = [a, out, inv] {
        ensure_grad(a);
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[0] * inv;
    };
    return out;
}

// sum over the last axis, keeping it as size 1
inline Var sum_last(Tape& t, const Var& a) {
    if (a->shape.empty()) throw std::invalid_argument("sum_last needs at least one axis");
    std::size_t d = a->shape.back();
    Shape os = a->shape;
    os.back() = 1;
    std::size_t rows = a->size() / d;
    auto out = t.record(os, a->requires_grad);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += a->value[r * d + j];
        out->value[r] = s;
    }
    if (out->requires_grad) out->backprop = [a, out, rows, d] {
        ensure_grad(a);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) a->grad[r * d + j] += out->grad[r];
    };
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra

inline Var matmul(Tape& t, const Var& a, const Var& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
        throw std::invalid_argument("matmul shape mismatch: " + shape_str(a->shape) + " x " +
                                    shape_str(b->shape));
    std::size_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto out = t.record({m, n}, a->requires_grad || b->requires_grad);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            double av = a->value[i * k + p];
            for (std::size_t j = 0; j < n; ++j)
                out->value[i * n + j] += av * b->value[p * n + j];
        }
    if (out->requires_grad) out->backprop = [a, b, out, m, k, n] {
        if (a->requires_grad) {
            ensure_grad(a);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    double g = out->grad[i * n + j];
                    for (std::size_t p = 0; p < k; ++p)
                        a->grad[i * k + p] += g * b->value[p * n + j];
                }
        }
        if (b->requires_grad) {
            ensure_grad(b);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double av = a->value[i * k + p];
                    for (std::size_t j = 0; j < n; ++j)
                        b->grad[p * n + j] += av * out->grad[i * n + j];
                }
        }
    };
    return out;
}

inline Var transpose(Tape& t, const Var& a) {
    if (a->shape.size() != 2) throw std::invalid_argument("transpose expects a 2-D tensor");
    std::size_t m = a->shape[0], n = a->shape[1];
    auto out = t.record({n, m}, a->requires_grad);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out->value[j * m + i] = a->value[i * n + j];
    if (out->requires_grad) out->backprop = [a, out, m, n] {
        ensure_grad(a);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) a->grad[i * n + j] += out->grad[j * m + i];
    };
    return out;
}

// x[..., in] . W[in, out] + b[out]; leading axes are flattened
inline Var linear(Tape& t, const Var& x, const Var& W, const Var& b = nullptr) {
    if (W->shape.size() != 2 || x->shape.empty() || x->shape.back() != W->shape[0])
        throw std::invalid_argument("linear shape mismatch: x " + shape_str(x->shape) + ", W " +
                                    shape_str(W->shape));
    std::size_t in = W->shape[0], outd = W->shape[1];
    std::size_t rows = x->size() / in;
    Shape os = x->shape;
    os.back() = outd;
    bool rg = x->requires_grad || W->requires_grad || (b && b->requires_grad);
    auto out = t.record(os, rg);
    for (std::size_t r = 0; r < rows; ++r) {
        double* o = out->value.data() + r * outd;
        const double* xi = x->value.data() + r * in;
        if (b) std::copy(b->value.begin(), b->value.end(), o);
        for (std::size_t p = 0; p < in; ++p) {
            double xv = xi[p];
            const double* w = W->value.data() + p * outd;
            for (std::size_t j = 0; j < outd; ++j) o[j] += xv * w[j];
        }
    }
    if (rg) out->backprop = [x, W, b, out, rows, in, outd] {
        if (x->requires_grad) {
            ensure_grad(x);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* g = out->grad.data() + r * outd;
                double* xg = x->grad.data() + r * in;
                for (std::size_t p = 0; p < in; ++p) {
                    const double* w = W->value.data() + p * outd;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < outd; ++j) acc += g[j] * w[j];
                    xg[p] += acc;
                }
            }
        }
        if (W->requires_grad) {
            ensure_grad(W);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* g = out->grad.data() + r * outd;
                const double* xi = x->value.data() + r * in;
                for (std::size_t p = 0; p < in; ++p) {
                    double xv = xi[p];
                    double* wg = W->grad.data() + p * outd;
                    for (std::size_t j = 0; j < outd; ++j) wg[j] += xv * g[j];
                }
            }
        }
        if (b && b->requires_grad) {
            ensure_grad(b);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* g = out->grad.data() + r * outd;
                for (std::size_t j = 0; j < outd; ++j) b->grad[j] += g[j];
            }
        }
    };
    return out;
}

// block-diagonal linear: x[..., nb*bin] . blockdiag(W[nb, bin, bout])
inline Var grouped_linear(Tape& t, const Var& x, const Var& W) {
    if (W->shape.size() != 3 || x->shape.empty())
        throw std::invalid_argument("grouped_linear expects W[nb, bin, bout]");
    std::size_t nb = W->shape[0], bin = W->shape[1], bout = W->shape[2];
    if (x->shape.back() != nb * bin)
        throw std::invalid_argument("grouped_linear shape mismatch: x " + shape_str(x->shape) +
                                    ", W " + shape_str(W->shape));
    std::size_t rows = x->size() / (nb * bin);
    Shape os = x->shape;
    os.back() = nb * bout;
    bool rg = x->requires_grad || W->requires_grad;
    auto out = t.record(os, rg);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t g = 0; g < nb; ++g) {
            const double* xi = x->value.data() + r * nb * bin + g * bin;
            const double* w = W->value.data() + g * bin * bout;
            double* o = out->value.data() + r * nb * bout + g * bout;
            for (std::size_t p = 0; p < bin; ++p)
                for (std::size_t j = 0; j < bout; ++j) o[j] += xi[p] * w[p * bout + j];
        }
    if (rg) out->backprop = [x, W, out, rows, nb, bin, bout] {
        if (x->requires_grad) ensure_grad(x);
        if (W->requires_grad) ensure_grad(W);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t g = 0; g < nb; ++g) {
                const double* go = out->grad.data() + r * nb * bout + g * bout;
                const double* xi = x->value.data() + r * nb * bin + g * bin;
                const double* w = W->value.data() + g * bin * bout;
                for (std::size_t p = 0; p < bin; ++p) {
                    for (std::size_t j = 0; j < bout; ++j) {
                        if (x->requires_grad) x->grad[r * nb * bin + g * bin + p] += go[j] * w[p * bout + j];
                        if (W->requires_grad) W->grad[g * bin * bout + p * bout + j] += xi[p] * go[j];
                    }
                }
            }
    };
    return out;
}

// batched outer product: a[B, d1], b[B, d2] -> [B, d1, d2]
inline Var outer(Tape& t, const Var& a, const Var& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[0] != b->shape[0])
        throw std::invalid_argument("outer expects [B,d1] and [B,d2]");
    std::size_t B = a->shape[0], d1 = a->shape[1], d2 = b->shape[1];
    auto out = t.record({B, d1, d2}, a->requires_grad || b->requires_grad);
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < d1; ++i)
            for (std::size_t j = 0; j < d2; ++j)
                out->value[(n * d1 + i) * d2 + j] = a->value[n * d1 + i] * b->value[n * d2 + j];
    if (out->requires_grad) out->backprop = [a, b, out, B, d1, d2] {
        if (a->requires_grad) ensure_grad(a);
        if (b->requires_grad) ensure_grad(b);
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t i = 0; i < d1; ++i)
                for (std::size_t j = 0; j < d2; ++j) {
                    double g = out->grad[(n * d1 + i) * d2 + j];
                    if (a->requires_grad) a->grad[n * d1 + i] += g * b->value[n * d2 + j];
                    if (b->requires_grad) b->grad[n * d2 + j] += g * a->value[n * d1 + i];
                }
    };
    return out;
}

// batched matrix-vector product: M[B, d1, d2] . v[B, d2] -> [B, d1]
inline Var bmv(Tape& t, const Var& M, const Var& v) {
    if (M->shape.size() != 3 || v->shape.size() != 2 || M->shape[0] != v->shape[0] ||
        M->shape[2] != v->shape[1])
        throw std::invalid_argument("bmv expects M[B,d1,d2] and v[B,d2]");
    std::size_t B = M->shape[0], d1 = M->shape[1], d2 = M->shape[2];
    auto out = t.record({B, d1}, M->requires_grad || v->requires_grad);
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < d1; ++i) {
            double acc = 0.0;
            const double* m = M->value.data() + (n * d1 + i) * d2;
            const double* x = v->value.data() + n * d2;
            for (std::size_t j = 0; j < d2; ++j) acc += m[j] * x[j];
            out->value[n * d1 + i] = acc;
        }
    if (out->requires_grad) out->backprop = [M, v, out, B, d1, d2] {
        if (M->requires_grad) ensure_grad(M);
        if (v->requires_grad) ensure_grad(v);
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t i = 0; i < d1; ++i) {
                double g = out->grad[n * d1 + i];
                for (std::size_t j = 0; j < d2; ++j) {
                    if (M->requires_grad) M->grad[(n * d1 + i) * d2 + j] += g * v->value[n * d2 + j];
                    if (v->requires_grad) v->grad[n * d2 + j] += g * M->value[(n * d1 + i) * d2 + j];
                }
            }
    };
    return out;
}

// ---------------------------------------------------------------------------
// shape ops

inline Var reshape(Tape& t, const Var& a, Shape shape) {
    if (numel(shape) != a->size())
        throw std::invalid_argument("reshape " + shape_str(a->shape) + " -> " + shape_str(shape) +
                                    " changes element count");
    auto out = t.record(shape, a->requires_grad);
    out->value = a->value;
    if (out->requires_grad) out->backprop = [a, out] {
        ensure_grad(a);
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
    };
    return out;
}

// slice along the last axis
inline Var slice_last(Tape& t, const Var& a, std::size_t start, std::size_t len) {
    std::size_t d = a->shape.back();
    if (start + len > d) throw std::invalid_argument("slice_last out of range");
    Shape os = a->shape;
    os.back() = len;
    std::size_t rows = a->size() / d;
    auto out = t.record(os, a->requires_grad);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < len; ++j) out->value[r * len + j] = a->value[r * d + start + j];
    if (out->requires_grad) out->backprop = [a, out, rows, d, start, len] {
        ensure_grad(a);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < len; ++j) a->grad[r * d + start + j] += out->grad[r * len + j];
    };
    return out;
}

// concatenate along the last axis
inline Var concat_last(Tape& t, const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_last of nothing");
    Shape base = parts[0]->shape;
    std::size_t total = 0;
    bool rg = false;
    for (auto& p : parts) {
        Shape s = p->shape;
        s.back() = base.back();
        if (s != base) throw std::invalid_argument("concat_last shape mismatch");
        total += p->shape.back();
        rg = rg || p->requires_grad;
    }
    Shape os = base;
    os.back() = total;
    std::size_t rows = parts[0]->size() / parts[0]->shape.back();
    // resolve via out-of-line record on any tape: use first part's requires flag
    return [&](Tape& tape) {
        auto out = tape.record(os, rg);
        std::size_t off = 0;
        for (auto& p : parts) {
            std::size_t d = p->shape.back();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < d; ++j)
                    out->value[r * total + off + j] = p->value[r * d + j];
            off += d;
        }
        if (rg) out->backprop = [parts, out, rows, total] {
            std::size_t off2 = 0;
            for (auto& p : parts) {
                std::size_t d = p->shape.back();
                if (p->requires_grad) {
                    ensure_grad(p);
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < d; ++j)
                            p->grad[r * d + j] += out->grad[r * total + off2 + j];
                }
                off2 += d;
            }
        };
        return out;
    }(t);
}

// x[B, T, C] -> [B, C] at time step ti
inline Var time_step(Tape& t, const Var& x, std::size_t ti) {
    if (x->shape.size() != 3) throw std::invalid_argument("time_step expects [B,T,C]");
    std::size_t B = x->shape[0], T = x->shape[1], C = x->shape[2];
    if (ti >= T) throw std::invalid_argument("time_step index out of range");
    auto out = t.record({B, C}, x->requires_grad);
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c) out->value[n * C + c] = x->value[(n * T + ti) * C + c];
    if (out->requires_grad) out->backprop = [x, out, B, T, C, ti] {
        ensure_grad(x);
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t c = 0; c < C; ++c) x->grad[(n * T + ti) * C + c] += out->grad[n * C + c];
    };
    return out;
}

// steps: T tensors [B, C] -> [B, T, C]
inline Var stack_time(Tape& t, const std::vector<Var>& steps) {
    if (steps.empty()) throw std::invalid_argument("stack_time of nothing");
    std::size_t B = steps[0]->shape[0], C = steps[0]->shape[1], T = steps.size();
    bool rg = false;
    for (auto& s : steps) {
        if (s->shape != Shape{B, C}) throw std::invalid_argument("stack_time shape mismatch");
        rg = rg || s->requires_grad;
    }
    auto out = t.record({B, T, C}, rg);
    for (std::size_t ti = 0; ti < T; ++ti)
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t c = 0; c < C; ++c)
                out->value[(n * T + ti) * C + c] = steps[ti]->value[n * C + c];
    if (rg) out->backprop = [steps, out, B, T, C] {
        for (std::size_t ti = 0; ti < T; ++ti) {
            if (!steps[ti]->requires_grad) continue;
            ensure_grad(steps[ti]);
            for (std::size_t n = 0; n < B; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    steps[ti]->grad[n * C + c] += out->grad[(n * T + ti) * C + c];
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// normalisation and softmax

// layer norm over the last axis; beta may be null (scale-only)
inline Var layer_norm(Tape& t, const Var& x, const Var& gamma, const Var& beta = nullptr,
                      double eps = 1e-5) {
    std::size_t d = x->shape.back();
    if (gamma->size() != d || (beta && beta->size() != d))
        throw std::invalid_argument("layer_norm parameter size mismatch");
    std::size_t rows = x->size() / d;
    bool rg = x->requires_grad || gamma->requires_grad || (beta && beta->requires_grad);
    auto out = t.record(x->shape, rg);
    std::vector<double> mu(rows), istd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = x->value.data() + r * d;
        double m = 0.0;
        for (std::size_t j = 0; j < d; ++j) m += xi[j];
        m /= d;
        double v = 0.0;
        for (std::size_t j = 0; j < d; ++j) v += (xi[j] - m) * (xi[j] - m);
        v /= d;
        mu[r] = m;
        istd[r] = 1.0 / std::sqrt(v + eps);
        for (std::size_t j = 0; j < d; ++j) {
            double xh = (xi[j] - m) * istd[r];
            out->value[r * d + j] = xh * gamma->value[j] + (beta ? beta->value[j] : 0.0);
        }
    }
    if (rg) out->backprop = [x, gamma, beta, out, rows, d, mu = std::move(mu), istd = std::move(istd)] {
        if (x->requires_grad) ensure_grad(x);
        if (gamma->requires_grad) ensure_grad(gamma);
        if (beta && beta->requires_grad) ensure_grad(beta);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xi = x->value.data() + r * d;
            const double* go = out->grad.data() + r * d;
            double sum_gy = 0.0, sum_gyxh = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                double xh = (xi[j] - mu[r]) * istd[r];
                double gy = go[j] * gamma->value[j];
                sum_gy += gy;
                sum_gyxh += gy * xh;
                if (gamma->requires_grad) gamma->grad[j] += go[j] * xh;
                if (beta && beta->requires_grad) beta->grad[j] += go[j];
            }
            if (x->requires_grad) {
                for (std::size_t j = 0; j < d; ++j) {
                    double xh = (xi[j] - mu[r]) * istd[r];
                    double gy = go[j] * gamma->value[j];
                    x->grad[r * d + j] +=
                        istd[r] * (gy - sum_gy / d - xh * sum_gyxh / d);
                }
            }
        }
    };
    return out;
}

// layer norm applied independently to `groups` contiguous chunks of the last
// axis (multi-head norm); gamma spans the whole axis, no shift
inline Var group_layer_norm(Tape& t, const Var& x, const Var& gamma, std::size_t groups,
                            double eps = 1e-5) {
    std::size_t d = x->shape.back();
    if (d % groups != 0 || gamma->size() != d)
        throw std::invalid_argument("group_layer_norm: bad group count or gamma size");
    std::size_t gd = d / groups;
    std::size_t rows = x->size() / d;
    bool rg = x->requires_grad || gamma->requires_grad;
    auto out = t.record(x->shape, rg);
    std::vector<double> mu(rows * groups), istd(rows * groups);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t g = 0; g < groups; ++g) {
            const double* xi = x->value.data() + r * d + g * gd;
            double m = 0.0;
            for (std::size_t j = 0; j < gd; ++j) m += xi[j];
            m /= gd;
            double v = 0.0;
            for (std::size_t j = 0; j < gd; ++j) v += (xi[j] - m) * (xi[j] - m);
            v /= gd;
            mu[r * groups + g] = m;
            istd[r * groups + g] = 1.0 / std::sqrt(v + eps);
            for (std::size_t j = 0; j < gd; ++j) {
                double xh = (xi[j] - m) * istd[r * groups + g];
                out->value[r * d + g * gd + j] = xh * gamma->value[g * gd + j];
            }
        }
    if (rg) out->backprop = [x, gamma, out, rows, d, gd, groups, mu = std::move(mu),
                             istd = std::move(istd)] {
        if (x->requires_grad) ensure_grad(x);
        if (gamma->requires_grad) ensure_grad(gamma);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t g = 0; g < groups; ++g) {
                const double* xi = x->value.data() + r * d + g * gd;
                const double* go = out->grad.data() + r * d + g * gd;
                double m = mu[r * groups + g], is = istd[r * groups + g];
                double sum_gy = 0.0, sum_gyxh = 0.0;
                for (std::size_t j = 0; j < gd; ++j) {
                    double xh = (xi[j] - m) * is;
                    double gy = go[j] * gamma->value[g * gd + j];
                    sum_gy += gy;
                    sum_gyxh += gy * xh;
                    if (gamma->requires_grad) gamma->grad[g * gd + j] += go[j] * xh;
                }
                if (x->requires_grad)
                    for (std::size_t j = 0; j < gd; ++j) {
                        double xh = (xi[j] - m) * is;
                        double gy = go[j] * gamma->value[g * gd + j];
                        x->grad[r * d + g * gd + j] +=
                            is * (gy - sum_gy / gd - xh * sum_gyxh / gd);
                    }
            }
    };
    return out;
}

// softmax over the last axis, computed with max subtraction
inline Var softmax(Tape& t, const Var& x) {
    std::size_t d = x->shape.back();
    std::size_t rows = x->size() / d;
    auto out = t.record(x->shape, x->requires_grad);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = x->value.data() + r * d;
        double mx = *std::max_element(xi, xi + d);
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            out->value[r * d + j] = std::exp(xi[j] - mx);
            s += out->value[r * d + j];
        }
        for (std::size_t j = 0; j < d; ++j) out->value[r * d + j] /= s;
    }
    if (out->requires_grad) out->backprop = [x, out, rows, d] {
        ensure_grad(x);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = out->value.data() + r * d;
            const double* g = out->grad.data() + r * d;
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += y[j] * g[j];
            for (std::size_t j = 0; j < d; ++j) x->grad[r * d + j] += y[j] * (g[j] - dot);
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// causal dilated 1-D convolution
//
// x[B, T, Cin], weight[k, Cin/groups, Cout], optional bias[Cout].
// Left-pads by (k-1)*dilation so the output keeps length T and never reads
// inputs at t' > t. groups == Cin with Cout == Cin gives a depthwise conv.
inline Var causal_dilated_conv1d(Tape& t, const Var& x, const Var& w, const Var& b,
                                 std::size_t dilation, std::size_t groups = 1) {
    if (x->shape.size() != 3 || w->shape.size() != 3)
        throw std::invalid_argument("conv1d expects x[B,T,Cin], w[k,Cin/groups,Cout]");
    std::size_t B = x->shape[0], T = x->shape[1], Cin = x->shape[2];
    std::size_t k = w->shape[0], wcin = w->shape[1], Cout = w->shape[2];
    if (groups == 0 || Cin % groups != 0 || Cout % groups != 0 || wcin != Cin / groups)
        throw std::invalid_argument("conv1d group dims mismatch: x " + shape_str(x->shape) +
                                    ", w " + shape_str(w->shape));
    if (b && b->size() != Cout) throw std::invalid_argument("conv1d bias size mismatch");
    std::size_t gin = Cin / groups, gout = Cout / groups;
    bool rg = x->requires_grad || w->requires_grad || (b && b->requires_grad);
    auto out = t.record({B, T, Cout}, rg);
    auto xat = [&](std::size_t n, std::ptrdiff_t ti, std::size_t c) -> double {
        return ti < 0 ? 0.0 : x->value[(n * T + static_cast<std::size_t>(ti)) * Cin + c];
    };
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t ti = 0; ti < T; ++ti)
            for (std::size_t g = 0; g < groups; ++g)
                for (std::size_t oc = 0; oc < gout; ++oc) {
                    std::size_t co = g * gout + oc;
                    double acc = b ? b->value[co] : 0.0;
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        std::ptrdiff_t src = static_cast<std::ptrdiff_t>(ti) -
                                             static_cast<std::ptrdiff_t>((k - 1 - kk) * dilation);
                        for (std::size_t ic = 0; ic < gin; ++ic)
                            acc += xat(n, src, g * gin + ic) * w->value[(kk * wcin + ic) * Cout + co];
                    }
                    out->value[(n * T + ti) * Cout + co] = acc;
                }
    if (rg) out->backprop = [x, w, b, out, B, T, Cin, k, wcin, Cout, gin, gout, groups, dilation] {
        if (x->requires_grad) ensure_grad(x);
        if (w->requires_grad) ensure_grad(w);
        if (b && b->requires_grad) ensure_grad(b);
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t ti = 0; ti < T; ++ti)
                for (std::size_t g = 0; g < groups; ++g)
                    for (std::size_t oc = 0; oc < gout; ++oc) {
                        std::size_t co = g * gout + oc;
                        double go = out->grad[(n * T + ti) * Cout + co];
                        if (go == 0.0) continue;
                        if (b && b->requires_grad) b->grad[co] += go;
                        for (std::size_t kk = 0; kk < k; ++kk) {
                            std::ptrdiff_t src = static_cast<std::ptrdiff_t>(ti) -
                                                 static_cast<std::ptrdiff_t>((k - 1 - kk) * dilation);
                            if (src < 0) continue;
                            for (std::size_t ic = 0; ic < gin; ++ic) {
                                std::size_t xc = g * gin + ic;
                                std::size_t xo = (n * T + static_cast<std::size_t>(src)) * Cin + xc;
                                std::size_t wo = (kk * wcin + ic) * Cout + co;
                                if (x->requires_grad) x->grad[xo] += go * w->value[wo];
                                if (w->requires_grad) w->grad[wo] += go * x->value[xo];
                            }
                        }
                    }
    };
    return out;
}

// ---------------------------------------------------------------------------
// loss

inline Var mse(Tape& t, const Var& prediction, const Var& target) {
    if (prediction->shape != target->shape)
        throw std::invalid_argument("mse shape mismatch: " + shape_str(prediction->shape) + " vs " +
                                    shape_str(target->shape));
    auto d = sub(t, prediction, target);
    return mean(t, mul(t, d, d));
}

// ---------------------------------------------------------------------------
// parameter initialisation

class ParamInit {
public:
    explicit ParamInit(std::uint64_t seed) : rng_(seed) {}

    // uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]
    Var uniform(std::string name, Shape shape, std::size_t fan_in) {
        double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        std::vector<double> v(numel(shape));
        for (auto& x : v) x = dist(rng_);
        return make_param(std::move(name), std::move(shape), std::move(v));
    }

    Var constant(std::string name, Shape shape, double value) {
        std::vector<double> v(numel(shape), value);
        return make_param(std::move(name), std::move(shape), std::move(v));
    }

private:
    std::mt19937_64 rng_;
};

}  // namespace trendlab::ad
