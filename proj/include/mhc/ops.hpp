#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mhc/graph.hpp"
#include "mhc/tensor.hpp"

// Differentiable tensor operations. Each op has a plain kernel working on
// Tensor values and a Node overload that runs the same kernel and attaches the
// reverse-mode closure, so graph and non-graph paths compute bit-identical
// values.

namespace mhc {

// ---------------------------------------------------------------------------
// plain kernels
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    Tensor<S> out({a.dim(0), b.dim(1)});
    out.mat().noalias() = a.mat() * b.mat();
    return out;
}

namespace detail {
struct AxisSpans {
    std::int64_t outer, len, inner;
};
inline AxisSpans axis_spans(const Shape& shape, int axis) {
    if (axis < 0 || axis >= static_cast<int>(shape.size()))
        throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    AxisSpans s{1, shape[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i) s.inner *= shape[static_cast<std::size_t>(i)];
    return s;
}
}  // namespace detail

// Max-subtracted softmax along one axis.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
    auto sp = detail::axis_spans(x.shape(), axis);
    Tensor<S> out(x.shape());
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t in = 0; in < sp.inner; ++in) {
            const std::int64_t base = o * sp.len * sp.inner + in;
            S mx = x[base];
            for (std::int64_t i = 1; i < sp.len; ++i) mx = std::max(mx, x[base + i * sp.inner]);
            S sum = S(0);
            for (std::int64_t i = 0; i < sp.len; ++i) {
                S e = std::exp(x[base + i * sp.inner] - mx);
                out[base + i * sp.inner] = e;
                sum += e;
            }
            for (std::int64_t i = 0; i < sp.len; ++i) out[base + i * sp.inner] /= sum;
        }
    }
    return out;
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes the last axis to zero mean / unit variance, then applies the
// affine gain and bias.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias) {
    const int d = x.dim(x.rank() - 1);
    if (d < 2) throw std::invalid_argument("layer_norm: last axis must have length >= 2");
    if (gain.size() != d || bias.size() != d)
        throw std::invalid_argument("layer_norm: gain/bias length must match last axis");
    const std::int64_t rows = x.size() / d;
    Tensor<S> out(x.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* xi = x.data() + r * d;
        S* yi = out.data() + r * d;
        S mean = S(0);
        for (int i = 0; i < d; ++i) mean += xi[i];
        mean /= S(d);
        S var = S(0);
        for (int i = 0; i < d; ++i) {
            S c = xi[i] - mean;
            var += c * c;
        }
        var /= S(d);
        const S inv = S(1) / std::sqrt(var + S(kLayerNormEps));
        for (int i = 0; i < d; ++i) yi[i] = gain[i] * ((xi[i] - mean) * inv) + bias[i];
    }
    return out;
}

// GPT-2 style tanh-approximated GELU.
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    Tensor<S> out(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) {
        double v = static_cast<double>(x[i]);
        out[i] = static_cast<S>(0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))));
    }
    return out;
}

template <typename S>
Tensor<S> exp_elem(const Tensor<S>& x) {
    Tensor<S> out(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i]);
    return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
    Tensor<S> out({x.dim(1), x.dim(0)});
    out.mat().noalias() = x.mat().transpose();
    return out;
}

template <typename S>
Tensor<S> normalize_rows(const Tensor<S>& x) {
    Tensor<S> out(x.shape());
    const int rows = x.dim(0), cols = x.dim(1);
    for (int r = 0; r < rows; ++r) {
        S sum = S(0);
        for (int c = 0; c < cols; ++c) sum += x(r, c);
        for (int c = 0; c < cols; ++c) out(r, c) = x(r, c) / sum;
    }
    return out;
}

template <typename S>
Tensor<S> normalize_cols(const Tensor<S>& x) {
    Tensor<S> out(x.shape());
    const int rows = x.dim(0), cols = x.dim(1);
    for (int c = 0; c < cols; ++c) {
        S sum = S(0);
        for (int r = 0; r < rows; ++r) sum += x(r, c);
        for (int r = 0; r < rows; ++r) out(r, c) = x(r, c) / sum;
    }
    return out;
}

// ---------------------------------------------------------------------------
// node ops
// ---------------------------------------------------------------------------

namespace detail {
template <typename S>
void check_same_graph(Node<S> a, Node<S> b) {
    if (a.graph() != b.graph()) throw std::logic_error("op: nodes belong to different graphs");
}
}  // namespace detail

template <typename S>
Node<S> matmul(Node<S> a, Node<S> b) {
    detail::check_same_graph(a, b);
    auto *ad = a.impl(), *bd = b.impl();
    return a.graph()->make("matmul", matmul(a.value(), b.value()), {ad, bd}, [ad, bd](NodeData<S>& n) {
        ad->ensure_grad();
        bd->ensure_grad();
        ad->grad.mat().noalias() += n.grad.mat() * bd->value.mat().transpose();
        bd->grad.mat().noalias() += ad->value.mat().transpose() * n.grad.mat();
    });
}

template <typename S>
Node<S> add(Node<S> a, Node<S> b) {
    detail::check_same_graph(a, b);
    if (!a.value().same_shape(b.value()))
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> out(a.value().shape());
    out.vec() = a.value().vec() + b.value().vec();
    auto *ad = a.impl(), *bd = b.impl();
    return a.graph()->make("add", std::move(out), {ad, bd}, [ad, bd](NodeData<S>& n) {
        ad->ensure_grad();
        bd->ensure_grad();
        ad->grad.vec() += n.grad.vec();
        bd->grad.vec() += n.grad.vec();
    });
}

template <typename S>
Node<S> sub(Node<S> a, Node<S> b) {
    detail::check_same_graph(a, b);
    if (!a.value().same_shape(b.value()))
        throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> out(a.value().shape());
    out.vec() = a.value().vec() - b.value().vec();
    auto *ad = a.impl(), *bd = b.impl();
    return a.graph()->make("sub", std::move(out), {ad, bd}, [ad, bd](NodeData<S>& n) {
        ad->ensure_grad();
        bd->ensure_grad();
        ad->grad.vec() += n.grad.vec();
        bd->grad.vec() -= n.grad.vec();
    });
}

template <typename S>
Node<S> mul(Node<S> a, Node<S> b) {
    detail::check_same_graph(a, b);
    if (!a.value().same_shape(b.value()))
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> out(a.value().shape());
    out.vec() = a.value().vec().cwiseProduct(b.value().vec());
    auto *ad = a.impl(), *bd = b.impl();
    return a.graph()->make("mul", std::move(out), {ad, bd}, [ad, bd](NodeData<S>& n) {
        ad->ensure_grad();
        bd->ensure_grad();
        ad->grad.vec() += n.grad.vec().cwiseProduct(bd->value.vec());
        bd->grad.vec() += n.grad.vec().cwiseProduct(ad->value.vec());
    });
}

template <typename S>
Node<S> scale(Node<S> a, S c) {
    Tensor<S> out(a.value().shape());
    out.vec() = a.value().vec() * c;
    auto* ad = a.impl();
    return a.graph()->make("scale", std::move(out), {ad}, [ad, c](NodeData<S>& n) {
        ad->ensure_grad();
        ad->grad.vec() += n.grad.vec() * c;
    });
}

// x: [R x C], bias: [C]; adds the bias to every row.
template <typename S>
Node<S> add_bias(Node<S> x, Node<S> bias) {
    detail::check_same_graph(x, bias);
    const int rows = x.value().dim(0), cols = x.value().dim(1);
    if (bias.value().size() != cols)
        throw std::invalid_argument("add_bias: bias length " + std::to_string(bias.value().size()) +
                                    " != columns " + std::to_string(cols));
    Tensor<S> out(x.value().shape());
    out.mat() = x.value().mat().rowwise() + bias.value().vec().transpose();
    auto *xd = x.impl(), *bd = bias.impl();
    return x.graph()->make("add_bias", std::move(out), {xd, bd}, [xd, bd, rows, cols](NodeData<S>& n) {
        xd->ensure_grad();
        bd->ensure_grad();
        xd->grad.vec() += n.grad.vec();
        bd->grad.vec() += n.grad.view(rows, cols).colwise().sum().transpose();
    });
}

template <typename S>
Node<S> exp_elem(Node<S> x) {
    auto* xd = x.impl();
    return x.graph()->make("exp", exp_elem(x.value()), {xd}, [xd](NodeData<S>& n) {
        xd->ensure_grad();
        xd->grad.vec() += n.grad.vec().cwiseProduct(n.value.vec());
    });
}

template <typename S>
Node<S> softmax(Node<S> x, int axis) {
    auto sp = detail::axis_spans(x.value().shape(), axis);
    auto* xd = x.impl();
    return x.graph()->make("softmax", softmax(x.value(), axis), {xd}, [xd, sp](NodeData<S>& n) {
        xd->ensure_grad();
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            for (std::int64_t in = 0; in < sp.inner; ++in) {
                const std::int64_t base = o * sp.len * sp.inner + in;
                S dot = S(0);
                for (std::int64_t i = 0; i < sp.len; ++i)
                    dot += n.grad[base + i * sp.inner] * n.value[base + i * sp.inner];
                for (std::int64_t i = 0; i < sp.len; ++i) {
                    const std::int64_t k = base + i * sp.inner;
                    xd->grad[k] += n.value[k] * (n.grad[k] - dot);
                }
            }
        }
    });
}

template <typename S>
Node<S> layer_norm(Node<S> x, Node<S> gain, Node<S> bias) {
    detail::check_same_graph(x, gain);
    detail::check_same_graph(x, bias);
    const int d = x.value().dim(x.value().rank() - 1);
    Tensor<S> out = layer_norm(x.value(), gain.value(), bias.value());

    // Recompute per-row mean/inv-sigma for the backward; cheaper than keeping
    // the normalized activations alive twice.
    auto *xd = x.impl(), *gd = gain.impl(), *bd = bias.impl();
    return x.graph()->make("layer_norm", std::move(out), {xd, gd, bd}, [xd, gd, bd, d](NodeData<S>& n) {
        xd->ensure_grad();
        gd->ensure_grad();
        bd->ensure_grad();
        const std::int64_t rows = xd->value.size() / d;
        for (std::int64_t r = 0; r < rows; ++r) {
            const S* xi = xd->value.data() + r * d;
            const S* gi = n.grad.data() + r * d;
            S* dxi = xd->grad.data() + r * d;
            S mean = S(0);
            for (int i = 0; i < d; ++i) mean += xi[i];
            mean /= S(d);
            S var = S(0);
            for (int i = 0; i < d; ++i) {
                S c = xi[i] - mean;
                var += c * c;
            }
            var /= S(d);
            const S inv = S(1) / std::sqrt(var + S(kLayerNormEps));
            S dot_g = S(0), dot_gx = S(0);
            for (int i = 0; i < d; ++i) {
                const S xhat = (xi[i] - mean) * inv;
                const S dxhat = gi[i] * gd->value[i];
                dot_g += dxhat;
                dot_gx += dxhat * xhat;
                gd->grad[i] += gi[i] * xhat;
                bd->grad[i] += gi[i];
            }
            dot_g /= S(d);
            dot_gx /= S(d);
            for (int i = 0; i < d; ++i) {
                const S xhat = (xi[i] - mean) * inv;
                dxi[i] += inv * (gi[i] * gd->value[i] - dot_g - xhat * dot_gx);
            }
        }
    });
}

template <typename S>
Node<S> gelu(Node<S> x) {
    auto* xd = x.impl();
    return x.graph()->make("gelu", gelu(x.value()), {xd}, [xd](NodeData<S>& n) {
        xd->ensure_grad();
        constexpr double c = 0.7978845608028654;
        for (std::int64_t i = 0; i < xd->value.size(); ++i) {
            const double v = static_cast<double>(xd->value[i]);
            const double u = c * (v + 0.044715 * v * v * v);
            const double t = std::tanh(u);
            const double du = c * (1.0 + 3.0 * 0.044715 * v * v);
            const double dy = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
            xd->grad[i] += n.grad[i] * static_cast<S>(dy);
        }
    });
}

template <typename S>
Node<S> transpose(Node<S> x) {
    auto* xd = x.impl();
    return x.graph()->make("transpose", transpose(x.value()), {xd}, [xd](NodeData<S>& n) {
        xd->ensure_grad();
        xd->grad.mat().noalias() += n.grad.mat().transpose();
    });
}

template <typename S>
Node<S> slice_cols(Node<S> x, int start, int len) {
    const int rows = x.value().dim(0), cols = x.value().dim(1);
    if (start < 0 || len <= 0 || start + len > cols)
        throw std::invalid_argument("slice_cols: [" + std::to_string(start) + ", " +
                                    std::to_string(start + len) + ") out of range for " +
                                    shape_str(x.value().shape()));
    Tensor<S> out({rows, len});
    out.mat() = x.value().mat().middleCols(start, len);
    auto* xd = x.impl();
    return x.graph()->make("slice_cols", std::move(out), {xd}, [xd, start, len](NodeData<S>& n) {
        xd->ensure_grad();
        xd->grad.mat().middleCols(start, len) += n.grad.mat();
    });
}

template <typename S>
Node<S> concat_cols(const std::vector<Node<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const int rows = parts[0].value().dim(0);
    int cols = 0;
    std::vector<NodeData<S>*> parents;
    for (const auto& p : parts) {
        if (p.value().dim(0) != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += p.value().dim(1);
        parents.push_back(p.impl());
    }
    Tensor<S> out({rows, cols});
    int at = 0;
    for (const auto& p : parts) {
        out.mat().middleCols(at, p.value().dim(1)) = p.value().mat();
        at += p.value().dim(1);
    }
    return parts[0].graph()->make("concat_cols", std::move(out), std::move(parents), [](NodeData<S>& n) {
        int at = 0;
        for (NodeData<S>* p : n.parents) {
            const int w = p->value.dim(1);
            p->ensure_grad();
            p->grad.mat() += n.grad.mat().middleCols(at, w);
            at += w;
        }
    });
}

// Additive causal mask for a [T x T] score matrix: positions j > i get a large
// negative offset so their softmax weight underflows to exactly zero.
inline constexpr double kCausalMaskValue = -1e9;

template <typename S>
Node<S> causal_mask(Node<S> scores) {
    const int t = scores.value().dim(0);
    if (scores.value().dim(1) != t) throw std::invalid_argument("causal_mask: scores must be square");
    Tensor<S> out = scores.value();
    for (int i = 0; i < t; ++i)
        for (int j = i + 1; j < t; ++j) out(i, j) += S(kCausalMaskValue);
    auto* sd = scores.impl();
    return scores.graph()->make("causal_mask", std::move(out), {sd}, [sd](NodeData<S>& n) {
        sd->ensure_grad();
        sd->grad.vec() += n.grad.vec();
    });
}

// Row gather: out[t, :] = table[ids[t], :].
template <typename S>
Node<S> rows(Node<S> table, std::vector<int> ids) {
    const int v = table.value().dim(0), d = table.value().dim(1);
    for (int id : ids)
        if (id < 0 || id >= v)
            throw std::invalid_argument("rows: index " + std::to_string(id) + " out of range [0, " +
                                        std::to_string(v) + ")");
    Tensor<S> out({static_cast<int>(ids.size()), d});
    for (std::size_t t = 0; t < ids.size(); ++t)
        out.mat().row(static_cast<Eigen::Index>(t)) = table.value().mat().row(ids[t]);
    auto* td = table.impl();
    return table.graph()->make("rows", std::move(out), {td}, [td, ids = std::move(ids)](NodeData<S>& n) {
        td->ensure_grad();
        for (std::size_t t = 0; t < ids.size(); ++t)
            td->grad.mat().row(ids[t]) += n.grad.mat().row(static_cast<Eigen::Index>(t));
    });
}

// Mean next-token cross entropy over all positions, computed with the usual
// max-subtracted log-sum-exp.
template <typename S>
Node<S> cross_entropy_mean(Node<S> logits, std::vector<int> targets) {
    const int t = logits.value().dim(0), v = logits.value().dim(1);
    if (static_cast<int>(targets.size()) != t)
        throw std::invalid_argument("cross_entropy_mean: got " + std::to_string(targets.size()) +
                                    " targets for " + std::to_string(t) + " positions");
    Tensor<S> probs = softmax(logits.value(), 1);
    S loss = S(0);
    for (int i = 0; i < t; ++i) {
        if (targets[static_cast<std::size_t>(i)] < 0 || targets[static_cast<std::size_t>(i)] >= v)
            throw std::invalid_argument("cross_entropy_mean: target out of vocab range");
        loss -= std::log(probs(i, targets[static_cast<std::size_t>(i)]));
    }
    loss /= S(t);
    auto* ld = logits.impl();
    return logits.graph()->make(
        "cross_entropy", Tensor<S>({1}, {loss}), {ld},
        [ld, probs = std::move(probs), targets = std::move(targets), t](NodeData<S>& n) {
            ld->ensure_grad();
            const S g = n.grad[0] / S(t);
            ld->grad.vec() += probs.vec() * g;
            for (int i = 0; i < t; ++i) ld->grad(i, targets[static_cast<std::size_t>(i)]) -= g;
        });
}

template <typename S>
Node<S> sum_all(Node<S> x) {
    S s = S(0);
    for (std::int64_t i = 0; i < x.value().size(); ++i) s += x.value()[i];
    auto* xd = x.impl();
    return x.graph()->make("sum_all", Tensor<S>({1}, {s}), {xd}, [xd](NodeData<S>& n) {
        xd->ensure_grad();
        xd->grad.vec().array() += n.grad[0];
    });
}

template <typename S>
Node<S> mean_of(const std::vector<Node<S>>& scalars) {
    if (scalars.empty()) throw std::invalid_argument("mean_of: no inputs");
    S s = S(0);
    std::vector<NodeData<S>*> parents;
    for (const auto& n : scalars) {
        if (n.value().size() != 1) throw std::invalid_argument("mean_of: inputs must be scalar");
        s += n.value()[0];
        parents.push_back(n.impl());
    }
    s /= S(scalars.size());
    return scalars[0].graph()->make("mean_of", Tensor<S>({1}, {s}), std::move(parents), [](NodeData<S>& n) {
        const S g = n.grad[0] / S(n.parents.size());
        for (NodeData<S>* p : n.parents) {
            p->ensure_grad();
            p->grad[0] += g;
        }
    });
}

template <typename S>
Node<S> reshape(Node<S> x, Shape shape) {
    Tensor<S> out = x.value().reshaped(shape);
    auto* xd = x.impl();
    return x.graph()->make("reshape", std::move(out), {xd}, [xd](NodeData<S>& n) {
        xd->ensure_grad();
        xd->grad.vec() += n.grad.vec();
    });
}

template <typename S>
Node<S> normalize_rows(Node<S> x) {
    const int rows = x.value().dim(0), cols = x.value().dim(1);
    Tensor<S> sums({rows});
    for (int r = 0; r < rows; ++r) {
        S s = S(0);
        for (int c = 0; c < cols; ++c) s += x.value()(r, c);
        sums[r] = s;
    }
    auto* xd = x.impl();
    return x.graph()->make("normalize_rows", normalize_rows(x.value()), {xd},
                           [xd, sums = std::move(sums), rows, cols](NodeData<S>& n) {
                               xd->ensure_grad();
                               for (int r = 0; r < rows; ++r) {
                                   S dot = S(0);
                                   for (int c = 0; c < cols; ++c) dot += n.grad(r, c) * n.value(r, c);
                                   for (int c = 0; c < cols; ++c)
                                       xd->grad(r, c) += (n.grad(r, c) - dot) / sums[r];
                               }
                           });
}

template <typename S>
Node<S> normalize_cols(Node<S> x) {
    const int rows = x.value().dim(0), cols = x.value().dim(1);
    Tensor<S> sums({cols});
    for (int c = 0; c < cols; ++c) {
        S s = S(0);
        for (int r = 0; r < rows; ++r) s += x.value()(r, c);
        sums[c] = s;
    }
    auto* xd = x.impl();
    return x.graph()->make("normalize_cols", normalize_cols(x.value()), {xd},
                           [xd, sums = std::move(sums), rows, cols](NodeData<S>& n) {
                               xd->ensure_grad();
                               for (int c = 0; c < cols; ++c) {
                                   S dot = S(0);
                                   for (int r = 0; r < rows; ++r) dot += n.grad(r, c) * n.value(r, c);
                                   for (int r = 0; r < rows; ++r)
                                       xd->grad(r, c) += (n.grad(r, c) - dot) / sums[c];
                               }
                           });
}

// ---------------------------------------------------------------------------
// stream ops: [T x n x d] states mixed by routing weights
// ---------------------------------------------------------------------------

// Replicates per-token embeddings into n identical streams.
template <typename S>
Node<S> expand_streams(Node<S> e, int n) {
    if (n < 1) throw std::invalid_argument("expand_streams: n must be >= 1");
    const int t = e.value().dim(0), d = e.value().dim(1);
    Tensor<S> out({t, n, d});
    for (int i = 0; i < t; ++i)
        for (int s = 0; s < n; ++s)
            out.view(t * n, d).row(static_cast<Eigen::Index>(i) * n + s) = e.value().mat().row(i);
    auto* ed = e.impl();
    return e.graph()->make("expand_streams", std::move(out), {ed}, [ed, t, n, d](NodeData<S>& nd) {
        ed->ensure_grad();
        for (int i = 0; i < t; ++i)
            for (int s = 0; s < n; ++s)
                ed->grad.mat().row(i) += nd.grad.view(t * n, d).row(static_cast<Eigen::Index>(i) * n + s);
    });
}

// Per token: Y_t = M X_t with M [n x n], X_t [n x d].
template <typename S>
Node<S> stream_mix(Node<S> m, Node<S> x) {
    detail::check_same_graph(m, x);
    const int t = x.value().dim(0), n = x.value().dim(1), d = x.value().dim(2);
    if (m.value().dim(0) != n || m.value().dim(1) != n)
        throw std::invalid_argument("stream_mix: mix matrix " + shape_str(m.value().shape()) +
                                    " does not match " + std::to_string(n) + " streams");
    Tensor<S> out({t, n, d});
    for (int i = 0; i < t; ++i) {
        Eigen::Map<const MatrixRM<S>> xi(x.value().data() + static_cast<std::int64_t>(i) * n * d, n, d);
        Eigen::Map<MatrixRM<S>> yi(out.data() + static_cast<std::int64_t>(i) * n * d, n, d);
        yi.noalias() = m.value().mat() * xi;
    }
    auto *md = m.impl(), *xd = x.impl();
    return x.graph()->make("stream_mix", std::move(out), {md, xd}, [md, xd, t, n, d](NodeData<S>& nd) {
        md->ensure_grad();
        xd->ensure_grad();
        for (int i = 0; i < t; ++i) {
            Eigen::Map<const MatrixRM<S>> gi(nd.grad.data() + static_cast<std::int64_t>(i) * n * d, n, d);
            Eigen::Map<const MatrixRM<S>> xi(xd->value.data() + static_cast<std::int64_t>(i) * n * d, n, d);
            Eigen::Map<MatrixRM<S>> dxi(xd->grad.data() + static_cast<std::int64_t>(i) * n * d, n, d);
            md->grad.mat().noalias() += gi * xi.transpose();
            dxi.noalias() += md->value.mat().transpose() * gi;
        }
    });
}

// Weighted sum over the stream axis: y_t = sum_s w_s x_{t,s}.
template <typename S>
Node<S> stream_pool(Node<S> w, Node<S> x) {
    detail::check_same_graph(w, x);
    const int t = x.value().dim(0), n = x.value().dim(1), d = x.value().dim(2);
    if (w.value().size() != n)
        throw std::invalid_argument("stream_pool: weight length " + std::to_string(w.value().size()) +
                                    " != " + std::to_string(n) + " streams");
    Tensor<S> out({t, d});
    for (int i = 0; i < t; ++i) {
        Eigen::Map<const MatrixRM<S>> xi(x.value().data() + static_cast<std::int64_t>(i) * n * d, n, d);
        out.mat().row(i).noalias() = w.value().vec().transpose() * xi;
    }
    auto *wd = w.impl(), *xd = x.impl();
    return x.graph()->make("stream_pool", std::move(out), {wd, xd}, [wd, xd, t, n, d](NodeData<S>& nd) {
        wd->ensure_grad();
        xd->ensure_grad();
        for (int i = 0; i < t; ++i) {
            Eigen::Map<const MatrixRM<S>> xi(xd->value.data() + static_cast<std::int64_t>(i) * n * d, n, d);
            Eigen::Map<MatrixRM<S>> dxi(xd->grad.data() + static_cast<std::int64_t>(i) * n * d, n, d);
            wd->grad.vec().noalias() += xi * nd.grad.mat().row(i).transpose();
            dxi.noalias() += wd->value.vec() * nd.grad.mat().row(i);
        }
    });
}

// Outer redistribution: y_{t,s} = w_s u_t.
template <typename S>
Node<S> stream_broadcast(Node<S> w, Node<S> u) {
    detail::check_same_graph(w, u);
    const int t = u.value().dim(0), d = u.value().dim(1);
    const int n = static_cast<int>(w.value().size());
    Tensor<S> out({t, n, d});
    for (int i = 0; i < t; ++i) {
        Eigen::Map<MatrixRM<S>> yi(out.data() + static_cast<std::int64_t>(i) * n * d, n, d);
        yi.noalias() = w.value().vec() * u.value().mat().row(i);
    }
    auto *wd = w.impl(), *ud = u.impl();
    return u.graph()->make("stream_broadcast", std::move(out), {wd, ud}, [wd, ud, t, n, d](NodeData<S>& nd) {
        wd->ensure_grad();
        ud->ensure_grad();
        for (int i = 0; i < t; ++i) {
            Eigen::Map<const MatrixRM<S>> gi(nd.grad.data() + static_cast<std::int64_t>(i) * n * d, n, d);
            wd->grad.vec().noalias() += gi * ud->value.mat().row(i).transpose();
            ud->grad.mat().row(i).noalias() += wd->value.vec().transpose() * gi;
        }
    });
}

// Mean over tokens and streams; feeds the dynamic-routing offset.
template <typename S>
Node<S> seq_stream_mean(Node<S> x) {
    const int t = x.value().dim(0), n = x.value().dim(1), d = x.value().dim(2);
    Tensor<S> out({1, d});
    out.vec() = x.value().view(t * n, d).colwise().sum().transpose() / S(t * n);
    auto* xd = x.impl();
    return x.graph()->make("seq_stream_mean", std::move(out), {xd}, [xd, t, n, d](NodeData<S>& nd) {
        xd->ensure_grad();
        const S inv = S(1) / S(t * n);
        xd->grad.view(t * n, d).rowwise() += nd.grad.vec().transpose() * inv;
    });
}

}  // namespace mhc
