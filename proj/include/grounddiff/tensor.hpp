#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// Every op builds a node in an implicit tape; backward() walks the tape in
// reverse creation order and returns a gradient map keyed by node. Graphs
// are throwaway: parameters are long-lived leaf tensors, everything else
// lives for one forward/backward pass. Reductions run in a fixed order so
// results are bit-reproducible across runs.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "grounddiff/errors.hpp"
#include "grounddiff/rng.hpp"

namespace grounddiff {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

template <class S> struct Node;

template <class S>
class GradMap {
public:
    std::vector<S>& at(const Node<S>* n, int64_t numel) {
        auto it = grads_.find(n);
        if (it == grads_.end())
            it = grads_.emplace(n, std::vector<S>(static_cast<size_t>(numel), S(0))).first;
        return it->second;
    }
    const std::vector<S>* find(const Node<S>* n) const {
        auto it = grads_.find(n);
        return it == grads_.end() ? nullptr : &it->second;
    }

private:
    std::unordered_map<const Node<S>*, std::vector<S>> grads_;
};

template <class S>
struct Node {
    Shape shape;
    std::vector<S> value;
    bool requires_grad = false;
    uint64_t id = 0;
    std::vector<std::shared_ptr<Node<S>>> parents;
    // Accumulates parent gradients given this node's upstream gradient.
    std::function<void(const Node<S>& self, const std::vector<S>& g, GradMap<S>& sink)> backward;

    int64_t numel() const { return shape_numel(shape); }
};

inline uint64_t next_node_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

template <class S>
class Tensor {
public:
    using value_type = S;

    Tensor() = default;

    static Tensor leaf(Shape shape, std::vector<S> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node<S>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        n->id = next_node_id();
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<S> d(static_cast<size_t>(shape_numel(shape)), S(0));
        return leaf(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, S v, bool requires_grad = false) {
        std::vector<S> d(static_cast<size_t>(shape_numel(shape)), v);
        return leaf(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(S v, bool requires_grad = false) {
        return leaf({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, S stddev = S(1), bool requires_grad = false) {
        std::vector<S> d(static_cast<size_t>(shape_numel(shape)));
        for (auto& x : d) x = static_cast<S>(rng.normal()) * stddev;
        return leaf(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    const std::vector<S>& data() const { return node_->value; }

    // In-place access for optimizer updates and parameter loading. Only
    // valid between graphs: live graphs reference this storage.
    std::vector<S>& mutable_data() { return node_->value; }

    S item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }

    const std::shared_ptr<Node<S>>& node() const { return node_; }

    explicit Tensor(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<Node<S>> node_;
};

namespace detail {

template <class S>
std::shared_ptr<Node<S>> make_op_node(Shape shape, std::vector<std::shared_ptr<Node<S>>> parents) {
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->value.resize(static_cast<size_t>(n->numel()));
    n->id = next_node_id();
    for (const auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    n->parents = std::move(parents);
    return n;
}

template <class S>
void accumulate(GradMap<S>& sink, const std::shared_ptr<Node<S>>& parent, const S* g, int64_t n) {
    if (!parent->requires_grad) return;
    auto& dst = sink.at(parent.get(), parent->numel());
    for (int64_t i = 0; i < n; ++i) dst[static_cast<size_t>(i)] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

// add supports: identical shapes, scalar b, or b.shape a strict suffix of
// a.shape (bias broadcast over leading dims). Anything else is an error.
template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const bool same = sa == sb;
    const bool scalar_b = b.numel() == 1;
    bool suffix_b = false;
    if (!same && !scalar_b && sb.size() < sa.size()) {
        suffix_b = true;
        for (size_t i = 0; i < sb.size(); ++i)
            if (sb[i] != sa[sa.size() - sb.size() + i]) suffix_b = false;
    }
    if (!same && !scalar_b && !suffix_b)
        throw ShapeError("add: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));

    auto n = detail::make_op_node<S>(sa, {a.node(), b.node()});
    const auto& av = a.data();
    const auto& bv = b.data();
    const int64_t total = a.numel();
    const int64_t bn = b.numel();
    for (int64_t i = 0; i < total; ++i)
        n->value[i] = av[i] + (same ? bv[i] : bv[i % bn]);

    n->backward = [same, bn](const Node<S>& self, const std::vector<S>& g, GradMap<S>& sink) {
        detail::accumulate(sink, self.parents[0], g.data(), self.numel());
        const auto& pb = self.parents[1];
        if (!pb->requires_grad) return;
        auto& dst = sink.at(pb.get(), pb->numel());
        if (same) {
            for (int64_t i = 0; i < self.numel(); ++i) dst[i] += g[i];
        } else {
            for (int64_t i = 0; i < self.numel(); ++i) dst[i % bn] += g[i];
        }
    };
    return Tensor<S>(n);
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape() && b.numel() != 1)
        throw ShapeError("mul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const bool scalar_b = b.numel() == 1;
    auto n = detail::make_op_node<S>(a.shape(), {a.node(), b.node()});
    const auto& av = a.data();
    const auto& bv = b.data();
    for (int64_t i = 0; i < a.numel(); ++i) n->value[i] = av[i] * (scalar_b ? bv[0] : bv[i]);

    n->backward = [scalar_b](const Node<S>& self, const std::vector<S>& g, GradMap<S>& sink) {
        const auto& pa = self.parents[0];
        const auto& pb = self.parents[1];
        const auto& av = pa->value;
        const auto& bv = pb->value;
        if (pa->requires_grad) {
            auto& da = sink.at(pa.get(), pa->numel());
            for (int64_t i = 0; i < self.numel(); ++i) da[i] += g[i] * (scalar_b ? bv[0] : bv[i]);
        }
        if (pb->requires_grad) {
            auto& db = sink.at(pb.get(), pb->numel());
            if (scalar_b) {
                S acc = 0;
                for (int64_t i = 0; i < self.numel(); ++i) acc += g[i] * av[i];
                db[0] += acc;
            } else {
                for (int64_t i = 0; i < self.numel(); ++i) db[i] += g[i] * av[i];
            }
        }
    };
    return Tensor<S>(n);
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S s) {
    auto n = detail::make_op_node<S>(a.shape(), {a.node()});
    const auto& av = a.data();
    for (int64_t i = 0; i < a.numel(); ++i) n->value[i] = av[i] * s;
    n->backward = [s](const Node<S>& self, const std::vector<S>& g, GradMap<S>& sink) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = sink.at(p.get(), p->numel());
        for (int64_t i = 0; i < self.numel(); ++i) d[i] += g[i] * s;
    };
    return Tensor<S>(n);
}

template <class S>
Tensor<S> neg(const Tensor<S>& a) { return scale(a, S(-1)); }

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) { return add(a, neg(b)); }

template <class S>
Tensor<S> tanh_op(const Tensor<S>& a) {
    auto n = detail::make_op_node<S>(a.shape(), {a.node()});
    const auto& av = a.data();
    for (int64_t i = 0; i < a.numel(); ++i) n->value[i] = std::tanh(av[i]);
    n->backward = [](const Node<S>& self, const std::vector<S>& g, GradMap<S>& sink) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = sink.at(p.get(), p->numel());
        for (int64_t i = 0; i < self.numel(); ++i) {
            const S y = self.value[i];
            d[i] += g[i] * (S(1) - y * y);
        }
    };
    return Tensor<S>(n);
}

// SiLU: x * sigmoid(x).
template <class S>
Tensor<S> silu(const Tensor<S>& a) {
    auto n = detail::make_op_node<S>(a.shape(), {a.node()});
    const auto& av = a.data();
    for (int64_t i = 0; i < a.numel(); ++i) {
        const S sig = S(1) / (S(1) + std::exp(-av[i]));
        n->value[i] = av[i] * sig;
    }
    n->backward = [](const Node<S>& self, const std::vector<S>& g, GradMap<S>& sink) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = sink.at(p.get(), p->numel());
        const auto& x = p->value;
        for (int64_t i = 0; i < self.numel(); ++i) {
            const S sig = S(1) / (S(1) + std::exp(-x[i]));
            d[i] += g[i] * (sig * (S(1) + x[i] * (S(1) - sig)));
        }
    };
    return Tensor<S>(n);
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        throw ShapeError("matmul: expects 2-D operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int64_t m = a.shape()[0], k = a.shape()[1];
    const int64_t k2 = b.shape()[0], nn = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    auto n = detail::make_op_node<S>({m, nn}, {a.node(), b.node()});
    const S* A = a.data().data();
    const S* B = b.data().data();
    S* C = n->value.data();
    for (int64_t i = 0; i < m; ++i) {
        S* crow = C + i * nn;
        for (int64_t j = 0; j < nn; ++j) crow[j] = S(0);
        for (int64_t p = 0; p < k; ++p) {
            const S av = A[i * k + p];
            const S* brow = B + p * nn;
            for (int64_t j = 0; j < nn; ++j) crow[j] += av * brow[j];
        }
    }
    n->backward = [m, k, nn](const Node<S>& self, const std::vector<S>& g, GradMap<S>& sink) {
        const auto& pa = self.parents[0];
        const auto& pb = self.parents[1];
        const S* A = pa->value.data();
        const S* B = pb->value.data();
        const S* G = g.data();
        if (pa->requires_grad) {
            // dA = G * B^T
            auto& da = sink.at(pa.get(), pa->numel());
            for (int64_t i = 0; i < m; ++i)
                for (int64_t p = 0; p < k; ++p) {
                    S acc = 0;
                    const S* grow = G + i * nn;
                    const S* brow = B + p * nn;
                    for (int64_t j = 0; j < nn; ++j) acc += grow[j] * brow[j];
                    da[i * k + p] += acc;
                }
        }
        if (pb->requires_grad) {
            // dB = A^T * G
            auto& db = sink.at(pb.get(), pb->numel());
            for (int64_t p = 0; p < k; ++p) {
                S* drow = db.data() + p * nn;
                for (int64_t i = 0; i < m; ++i) {
                    const S av = A[i * k + p];
                    const S* grow = G + i * nn;
                    for (int64_t j = 0; j < nn; ++j) drow[j] += av * grow[j];
                }
            }
        }
    };
    return Tensor<S>(n);
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
    if (a.shape().size() != 2)
        throw ShapeError("transpose: expects 2-D, got " + shape_str(a.shape()));
    const int64_t m = a.shape()[0], k = a.shape()[1];
    auto n = detail::make_op_node<S>({k, m}, {a.node()});
    const auto& av = a.data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < k; ++j) n->value[j * m + i] = av[i * k + j];
    n->backward = [m, k](const Node<S>& self, const std::vector<S>& g, GradMap<S>& sink) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = sink.at(p.get(), p->numel());
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < k; ++j) d[i * k + j] += g[j * m + i];
    };
    return Tensor<S>(n);
}

// Row-wise softmax with max subtraction; rows sum to 1 exactly up to rounding.
template <class S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
    if (a.shape().size() != 2)
        throw ShapeError("softmax_rows: expects 2-D, got " + shape_str(a.shape()));
    const int64_t m = a.shape()[0], k = a.shape()[1];
    auto n = detail::make_op_node<S>(a.shape(), {a.node()});
    const auto& av = a.data();
    for (int64_t i = 0; i < m; ++i) {
        const S* row = av.data() + i * k;
        S* out = n->value.data() + i * k;
        S mx = row[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        S denom = 0;
        for (int64_t j = 0; j < k; ++j) {
            out[j] = std::exp(row[j] - mx);
            denom += out[j];
        }
        for (int64_t j = 0; j < k; ++j) out[j] /= denom;
    }
    n->backward = [m, k](const Node<S>& self, const std::vector<S>& g, GradMap<S>& sink) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = sink.at(p.get(), p->numel());
        for (int64_t i = 0; i < m; ++i) {
            const S* y = self.value.data() + i * k;
            const S* gr = g.data() + i * k;
            S dot = 0;
            for (int64_t j = 0; j < k; ++j) dot += gr[j] * y[j];
            for (int64_t j = 0; j < k; ++j) d[i * k + j] += y[j] * (gr[j] - dot);
        }
    };
    return Tensor<S>(n);
}

// Scaled dot-product attention over single-head 2-D token matrices:
// softmax(q k^T / sqrt(d)) v. Composed from primitive ops, so it inherits
// their gradients.
template <class S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v) {
    if (q.shape().size() != 2 || k.shape().size() != 2 || v.shape().size() != 2)
        throw ShapeError("attention: expects 2-D q/k/v");
    if (q.shape()[1] != k.shape()[1])
        throw ShapeError("attention: q width " + shape_str(q.shape()) + " != k width " +
                         shape_str(k.shape()));
    if (k.shape()[0] != v.shape()[0])
        throw ShapeError("attention: k rows " + shape_str(k.shape()) + " != v rows " +
                         shape_str(v.shape()));
    const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(q.shape()[1]));
    auto logits = scale(matmul(q, transpose(k)), inv_sqrt_d);
    return matmul(softmax_rows(logits), v);
}

// ---------------------------------------------------------------------------
// Convolution and spatial ops (single item, layout [C,H,W])
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride, int pad) {
    if (x.shape().size() != 3 || w.shape().size() != 4)
        throw ShapeError("conv2d: expects x[C,H,W], w[Co,Ci,K,K], got " + shape_str(x.shape()) +
                         " and " + shape_str(w.shape()));
    const int64_t ci = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
    const int64_t co = w.shape()[0], ciw = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
    if (ci != ciw)
        throw ShapeError("conv2d: input channels " + std::to_string(ci) + " != kernel channels " +
                         std::to_string(ciw));
    if (kh != kw || kh % 2 == 0) throw ShapeError("conv2d: kernel must be square and odd");
    if (stride < 1 || pad < 0) throw ShapeError("conv2d: stride must be >=1, pad >=0");
    if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != co))
        throw ShapeError("conv2d: bias shape " + shape_str(b.shape()) + " != [" +
                         std::to_string(co) + "]");
    const int64_t oh = (h + 2 * pad - kh) / stride + 1;
    const int64_t ow = (wd + 2 * pad - kw) / stride + 1;
    if (oh <= 0 || ow <= 0)
        throw ShapeError("conv2d: non-positive output size for input " + shape_str(x.shape()));

    std::vector<std::shared_ptr<Node<S>>> parents = {x.node(), w.node()};
    if (b.defined()) parents.push_back(b.node());
    auto n = detail::make_op_node<S>({co, oh, ow}, std::move(parents));

    const S* X = x.data().data();
    const S* W = w.data().data();
    S* Y = n->value.data();
    for (int64_t oc = 0; oc < co; ++oc) {
        const S bias = b.defined() ? b.data()[oc] : S(0);
        for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox) {
                S acc = bias;
                for (int64_t ic = 0; ic < ci; ++ic) {
                    const S* xc = X + ic * h * wd;
                    const S* wc = W + ((oc * ci + ic) * kh) * kw;
                    for (int64_t ky = 0; ky < kh; ++ky) {
                        const int64_t iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        const S* xrow = xc + iy * wd;
                        const S* wrow = wc + ky * kw;
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            const int64_t ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= wd) continue;
                            acc += wrow[kx] * xrow[ix];
                        }
                    }
                }
                Y[(oc * oh + oy) * ow + ox] = acc;
            }
    }

    const bool has_bias = b.defined();
    n->backward = [ci, h, wd, co, kh, kw, oh, ow, stride, pad, has_bias](
                      const Node<S>& self, const std::vector<S>& g, GradMap<S>& sink) {
        const auto& px = self.parents[0];
        const auto& pw = self.parents[1];
        const S* X = px->value.data();
        const S* W = pw->value.data();
        const S* G = g.data();
        if (has_bias && self.parents[2]->requires_grad) {
            auto& db = sink.at(self.parents[2].get(), co);
            for (int64_t oc = 0; oc < co; ++oc) {
                S acc = 0;
                const S* grow = G + oc * oh * ow;
                for (int64_t i = 0; i < oh * ow; ++i) acc += grow[i];
                db[oc] += acc;
            }
        }
        if (pw->requires_grad) {
            auto& dw = sink.at(pw.get(), pw->numel());
            for (int64_t oc = 0; oc < co; ++oc)
                for (int64_t ic = 0; ic < ci; ++ic)
                    for (int64_t ky = 0; ky < kh; ++ky)
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            S acc = 0;
                            for (int64_t oy = 0; oy < oh; ++oy) {
                                const int64_t iy = oy * stride - pad + ky;
                                if (iy < 0 || iy >= h) continue;
                                for (int64_t ox = 0; ox < ow; ++ox) {
                                    const int64_t ix = ox * stride - pad + kx;
                                    if (ix < 0 || ix >= wd) continue;
                                    acc += G[(oc * oh + oy) * ow + ox] * X[(ic * h + iy) * wd + ix];
                                }
                            }
                            dw[((oc * ci + ic) * kh + ky) * kw + kx] += acc;
                        }
        }
        if (px->requires_grad) {
            auto& dx = sink.at(px.get(), px->numel());
            for (int64_t oc = 0; oc < co; ++oc)
                for (int64_t oy = 0; oy < oh; ++oy)
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        const S gv = G[(oc * oh + oy) * ow + ox];
                        for (int64_t ic = 0; ic < ci; ++ic) {
                            const S* wc = W + ((oc * ci + ic) * kh) * kw;
                            for (int64_t ky = 0; ky < kh; ++ky) {
                                const int64_t iy = oy * stride - pad + ky;
                                if (iy < 0 || iy >= h) continue;
                                for (int64_t kx = 0; kx < kw; ++kx) {
                                    const int64_t ix = ox * stride - pad + kx;
                                    if (ix < 0 || ix >= wd) continue;
                                    dx[(ic * h + iy) * wd + ix] += gv * wc[ky * kw + kx];
                                }
                            }
                        }
                    }
        }
    };
    return Tensor<S>(n);
}

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, int stride, int pad) {
    return conv2d(x, w, Tensor<S>(), stride, pad);
}

// Nearest-neighbour 2x upsampling.
template <class S>
Tensor<S> upsample2x(const Tensor<S>& x) {
    if (x.shape().size() != 3) throw ShapeError("upsample2x: expects [C,H,W]");
    const int64_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    auto n = detail::make_op_node<S>({c, h * 2, w * 2}, {x.node()});
    const auto& xv = x.data();
    for (int64_t ic = 0; ic < c; ++ic)
        for (int64_t y = 0; y < 2 * h; ++y)
            for (int64_t xx = 0; xx < 2 * w; ++xx)
                n->value[(ic * 2 * h + y) * 2 * w + xx] = xv[(ic * h + y / 2) * w + xx / 2];
    n->backward = [c, h, w](const Node<S>& self, const std::vector<S>& g, GradMap<S>& sink) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = sink.at(p.get(), p->numel());
        for (int64_t ic = 0; ic < c; ++ic)
            for (int64_t y = 0; y < 2 * h; ++y)
                for (int64_t xx = 0; xx < 2 * w; ++xx)
                    d[(ic * h + y / 2) * w + xx / 2] += g[(ic * 2 * h + y) * 2 * w + xx];
    };
    return Tensor<S>(n);
}

// x[C,H,W] + b[C], broadcast over H,W. Used to inject time embeddings.
template <class S>
Tensor<S> add_channel_bias(const Tensor<S>& x, const Tensor<S>& b) {
    if (x.shape().size() != 3 || b.shape().size() != 1 || b.shape()[0] != x.shape()[0])
        throw ShapeError("add_channel_bias: shapes " + shape_str(x.shape()) + " and " +
                         shape_str(b.shape()));
    const int64_t c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
    auto n = detail::make_op_node<S>(x.shape(), {x.node(), b.node()});
    const auto& xv = x.data();
    const auto& bv = b.data();
    for (int64_t ic = 0; ic < c; ++ic)
        for (int64_t i = 0; i < hw; ++i) n->value[ic * hw + i] = xv[ic * hw + i] + bv[ic];
    n->backward = [c, hw](const Node<S>& self, const std::vector<S>& g, GradMap<S>& sink) {
        detail::accumulate(sink, self.parents[0], g.data(), self.numel());
        const auto& pb = self.parents[1];
        if (!pb->requires_grad) return;
        auto& db = sink.at(pb.get(), c);
        for (int64_t ic = 0; ic < c; ++ic) {
            S acc = 0;
            for (int64_t i = 0; i < hw; ++i) acc += g[ic * hw + i];
            db[ic] += acc;
        }
    };
    return Tensor<S>(n);
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace detail {

// Shared normalization backward: per segment of `len` contiguous elements,
// given xhat and upstream-through-affine dxhat, accumulate input grads.
template <class S>
void norm_segment_backward(const S* xhat, const S* dxhat, S inv_std, int64_t len, S* dx) {
    S mean_d = 0, mean_dx = 0;
    for (int64_t i = 0; i < len; ++i) {
        mean_d += dxhat[i];
        mean_dx += dxhat[i] * xhat[i];
    }
    mean_d /= static_cast<S>(len);
    mean_dx /= static_cast<S>(len);
    for (int64_t i = 0; i < len; ++i)
        dx[i] += inv_std * (dxhat[i] - mean_d - xhat[i] * mean_dx);
}

}  // namespace detail

// GroupNorm over [C,H,W] with per-channel affine. Statistics per group of
// C/groups channels.
template <class S>
Tensor<S> group_norm(const Tensor<S>& x, int groups, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-5)) {
    if (x.shape().size() != 3) throw ShapeError("group_norm: expects [C,H,W]");
    const int64_t c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
    if (c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
        throw ShapeError("group_norm: affine shape mismatch");
    const int64_t gc = c / groups;
    const int64_t glen = gc * hw;

    auto n = detail::make_op_node<S>(x.shape(), {x.node(), gamma.node(), beta.node()});
    const auto& xv = x.data();
    std::vector<S> xhat(static_cast<size_t>(x.numel()));
    std::vector<S> inv_std(static_cast<size_t>(groups));
    for (int64_t g = 0; g < groups; ++g) {
        const S* seg = xv.data() + g * glen;
        double mean = 0;
        for (int64_t i = 0; i < glen; ++i) mean += seg[i];
        mean /= static_cast<double>(glen);
        double var = 0;
        for (int64_t i = 0; i < glen; ++i) {
            const double d = seg[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(glen);
        const S istd = static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        inv_std[g] = istd;
        S* xh = xhat.data() + g * glen;
        for (int64_t i = 0; i < glen; ++i) xh[i] = (seg[i] - static_cast<S>(mean)) * istd;
    }
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    for (int64_t ic = 0; ic < c; ++ic)
        for (int64_t i = 0; i < hw; ++i)
            n->value[ic * hw + i] = xhat[ic * hw + i] * gv[ic] + bv[ic];

    auto xhat_sp = std::make_shared<std::vector<S>>(std::move(xhat));
    auto istd_sp = std::make_shared<std::vector<S>>(std::move(inv_std));
    n->backward = [c, hw, groups, glen, xhat_sp, istd_sp](
                      const Node<S>& self, const std::vector<S>& g, GradMap<S>& sink) {
        const auto& px = self.parents[0];
        const auto& pg = self.parents[1];
        const auto& pb = self.parents[2];
        const auto& xh = *xhat_sp;
        const auto& gamma = pg->value;
        if (pg->requires_grad) {
            auto& dg = sink.at(pg.get(), c);
            for (int64_t ic = 0; ic < c; ++ic) {
                S acc = 0;
                for (int64_t i = 0; i < hw; ++i) acc += g[ic * hw + i] * xh[ic * hw + i];
                dg[ic] += acc;
            }
        }
        if (pb->requires_grad) {
            auto& db = sink.at(pb.get(), c);
            for (int64_t ic = 0; ic < c; ++ic) {
                S acc = 0;
                for (int64_t i = 0; i < hw; ++i) acc += g[ic * hw + i];
                db[ic] += acc;
            }
        }
        if (px->requires_grad) {
            auto& dx = sink.at(px.get(), px->numel());
            std::vector<S> dxhat(static_cast<size_t>(glen));
            for (int64_t grp = 0; grp < groups; ++grp) {
                for (int64_t j = 0; j < glen; ++j) {
                    const int64_t idx = grp * glen + j;
                    dxhat[j] = g[idx] * gamma[idx / hw];
                }
                detail::norm_segment_backward(xh.data() + grp * glen, dxhat.data(),
                                              (*istd_sp)[grp], glen, dx.data() + grp * glen);
            }
        }
    };
    return Tensor<S>(n);
}

// LayerNorm over the last dimension of [N,D] with per-feature affine.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-5)) {
    if (x.shape().size() != 2) throw ShapeError("layer_norm: expects [N,D]");
    const int64_t nrows = x.shape()[0], d = x.shape()[1];
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
        throw ShapeError("layer_norm: affine shape mismatch");

    auto n = detail::make_op_node<S>(x.shape(), {x.node(), gamma.node(), beta.node()});
    const auto& xv = x.data();
    std::vector<S> xhat(static_cast<size_t>(x.numel()));
    std::vector<S> inv_std(static_cast<size_t>(nrows));
    for (int64_t r = 0; r < nrows; ++r) {
        const S* row = xv.data() + r * d;
        double mean = 0;
        for (int64_t i = 0; i < d; ++i) mean += row[i];
        mean /= static_cast<double>(d);
        double var = 0;
        for (int64_t i = 0; i < d; ++i) {
            const double dd = row[i] - mean;
            var += dd * dd;
        }
        var /= static_cast<double>(d);
        const S istd = static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        inv_std[r] = istd;
        for (int64_t i = 0; i < d; ++i)
            xhat[r * d + i] = (row[i] - static_cast<S>(mean)) * istd;
    }
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    for (int64_t r = 0; r < nrows; ++r)
        for (int64_t i = 0; i < d; ++i)
            n->value[r * d + i] = xhat[r * d + i] * gv[i] + bv[i];

    auto xhat_sp = std::make_shared<std::vector<S>>(std::move(xhat));
    auto istd_sp = std::make_shared<std::vector<S>>(std::move(inv_std));
    n->backward = [nrows, d, xhat_sp, istd_sp](const Node<S>& self, const std::vector<S>& g,
                                               GradMap<S>& sink) {
        const auto& px = self.parents[0];
        const auto& pg = self.parents[1];
        const auto& pb = self.parents[2];
        const auto& xh = *xhat_sp;
        const auto& gamma = pg->value;
        if (pg->requires_grad) {
            auto& dg = sink.at(pg.get(), d);
            for (int64_t r = 0; r < nrows; ++r)
                for (int64_t i = 0; i < d; ++i) dg[i] += g[r * d + i] * xh[r * d + i];
        }
        if (pb->requires_grad) {
            auto& db = sink.at(pb.get(), d);
            for (int64_t r = 0; r < nrows; ++r)
                for (int64_t i = 0; i < d; ++i) db[i] += g[r * d + i];
        }
        if (px->requires_grad) {
            auto& dx = sink.at(px.get(), px->numel());
            std::vector<S> dxhat(static_cast<size_t>(d));
            for (int64_t r = 0; r < nrows; ++r) {
                for (int64_t i = 0; i < d; ++i) dxhat[i] = g[r * d + i] * gamma[i];
                detail::norm_segment_backward(xh.data() + r * d, dxhat.data(), (*istd_sp)[r], d,
                                              dx.data() + r * d);
            }
        }
    };
    return Tensor<S>(n);
}

// ---------------------------------------------------------------------------
// Shape ops and reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    auto n = detail::make_op_node<S>(std::move(shape), {a.node()});
    n->value = a.data();
    n->backward = [](const Node<S>& self, const std::vector<S>& g, GradMap<S>& sink) {
        detail::accumulate(sink, self.parents[0], g.data(), self.numel());
    };
    return Tensor<S>(n);
}

// Concatenate 2-D tensors along rows; all must share the column count.
template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    const int64_t d = parts[0].shape()[1];
    int64_t rows = 0;
    std::vector<std::shared_ptr<Node<S>>> parents;
    for (const auto& p : parts) {
        if (p.shape().size() != 2 || p.shape()[1] != d)
            throw ShapeError("concat_rows: column mismatch: " + shape_str(p.shape()));
        rows += p.shape()[0];
        parents.push_back(p.node());
    }
    auto n = detail::make_op_node<S>({rows, d}, std::move(parents));
    int64_t off = 0;
    for (const auto& p : parts) {
        const auto& pv = p.data();
        std::copy(pv.begin(), pv.end(), n->value.begin() + off);
        off += p.numel();
    }
    n->backward = [](const Node<S>& self, const std::vector<S>& g, GradMap<S>& sink) {
        int64_t off = 0;
        for (const auto& p : self.parents) {
            detail::accumulate(sink, p, g.data() + off, p->numel());
            off += p->numel();
        }
    };
    return Tensor<S>(n);
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& a, int64_t begin, int64_t count) {
    if (a.shape().size() != 2) throw ShapeError("slice_rows: expects 2-D");
    const int64_t rows = a.shape()[0], d = a.shape()[1];
    if (begin < 0 || count < 0 || begin + count > rows)
        throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," +
                         std::to_string(begin + count) + ") out of " + std::to_string(rows));
    auto n = detail::make_op_node<S>({count, d}, {a.node()});
    const auto& av = a.data();
    std::copy(av.begin() + begin * d, av.begin() + (begin + count) * d, n->value.begin());
    n->backward = [begin, d](const Node<S>& self, const std::vector<S>& g, GradMap<S>& sink) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& dst = sink.at(p.get(), p->numel());
        for (int64_t i = 0; i < self.numel(); ++i) dst[begin * d + i] += g[i];
    };
    return Tensor<S>(n);
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
    auto n = detail::make_op_node<S>({1}, {a.node()});
    double acc = 0;  // reduce in double regardless of S
    for (const S v : a.data()) acc += static_cast<double>(v);
    n->value[0] = static_cast<S>(acc);
    n->backward = [](const Node<S>& self, const std::vector<S>& g, GradMap<S>& sink) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = sink.at(p.get(), p->numel());
        for (auto& v : d) v += g[0];
    };
    return Tensor<S>(n);
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
    return scale(sum_all(a), S(1) / static_cast<S>(a.numel()));
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

template <class S>
class Gradients {
public:
    explicit Gradients(GradMap<S> m) : map_(std::move(m)) {}

    // Gradient of the loss w.r.t. t; zeros if t never influenced the loss.
    std::vector<S> get(const Tensor<S>& t) const {
        const auto* g = map_.find(t.node().get());
        if (g) return *g;
        return std::vector<S>(static_cast<size_t>(t.numel()), S(0));
    }

    const std::vector<S>* find(const Tensor<S>& t) const { return map_.find(t.node().get()); }

private:
    GradMap<S> map_;
};

template <class S>
Gradients<S> backward(const Tensor<S>& loss) {
    if (loss.numel() != 1)
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));

    // Creation ids are a topological order: parents precede children.
    std::vector<const Node<S>*> order;
    {
        std::unordered_map<const Node<S>*, bool> seen;
        std::vector<const Node<S>*> stack = {loss.node().get()};
        seen[loss.node().get()] = true;
        while (!stack.empty()) {
            const Node<S>* n = stack.back();
            stack.pop_back();
            order.push_back(n);
            for (const auto& p : n->parents) {
                if (!p->requires_grad) continue;
                if (!seen[p.get()]) {
                    seen[p.get()] = true;
                    stack.push_back(p.get());
                }
            }
        }
        std::sort(order.begin(), order.end(),
                  [](const Node<S>* a, const Node<S>* b) { return a->id > b->id; });
    }

    GradMap<S> grads;
    grads.at(loss.node().get(), 1)[0] = S(1);
    for (const Node<S>* n : order) {
        if (!n->backward || !n->requires_grad) continue;
        const auto* g = grads.find(n);
        if (!g) continue;
        n->backward(*n, *g, grads);
    }
    return Gradients<S>(std::move(grads));
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle
// ---------------------------------------------------------------------------

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per element. f must be
// deterministic. Used as the independent check on reverse-mode gradients.
template <class S>
std::vector<S> finite_diff_grad(const std::function<S(const std::vector<S>&)>& f,
                                std::vector<S> x, S h) {
    std::vector<S> g(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        const S orig = x[i];
        x[i] = orig + h;
        const S fp = f(x);
        x[i] = orig - h;
        const S fm = f(x);
        x[i] = orig;
        g[i] = (fp - fm) / (S(2) * h);
    }
    return g;
}

}  // namespace grounddiff
