#pragma once

#include <cmath>
#include <vector>

#include "mhc/ops.hpp"

namespace mhc {

// Learnable routing for one layer: unconstrained logits for the inter-stream
// mixing matrix plus the pooling / broadcast weight rows. The mixing matrix is
// realized as Sinkhorn(exp(logits)), which keeps its entries positive and both
// its row and column sums at one.
template <typename S>
struct RoutingParamsT {
    Tensor<S> mix_logits;         // [n x n]
    Tensor<S> pool_weights;       // [n]
    Tensor<S> broadcast_weights;  // [n]
    int sinkhorn_iters = 20;
    double sinkhorn_tol = 1e-6;
};
using RoutingParams = RoutingParamsT<float>;

template <typename S>
struct RealizedRoutingT {
    Tensor<S> mix;        // [n x n], doubly stochastic
    Tensor<S> pool;       // [n]
    Tensor<S> broadcast;  // [n]
};
using RealizedRouting = RealizedRoutingT<float>;

template <typename S>
struct SinkhornResult {
    Tensor<S> matrix;
    bool converged = false;
    double max_deviation = 0.0;  // max |row or column sum - 1| at exit
    int sweeps = 0;
};

namespace detail {
template <typename S>
double sum_deviation(const Tensor<S>& m) {
    const int n = m.dim(0);
    double dev = 0.0;
    for (int r = 0; r < n; ++r) {
        double s = 0.0;
        for (int c = 0; c < n; ++c) s += static_cast<double>(m(r, c));
        dev = std::max(dev, std::abs(s - 1.0));
    }
    for (int c = 0; c < n; ++c) {
        double s = 0.0;
        for (int r = 0; r < n; ++r) s += static_cast<double>(m(r, c));
        dev = std::max(dev, std::abs(s - 1.0));
    }
    return dev;
}

template <typename S>
void check_sinkhorn_input(const Tensor<S>& m) {
    if (m.rank() != 2 || m.dim(0) != m.dim(1))
        throw std::invalid_argument("sinkhorn_project: expected a square matrix, got " + shape_str(m.shape()));
    for (std::int64_t i = 0; i < m.size(); ++i)
        if (!(m[i] > S(0)))
            throw std::domain_error("sinkhorn_project: entries must be strictly positive");
}
}  // namespace detail

// Alternating row/column normalization until both row and column sums are
// within tol of one, or the sweep budget runs out.
template <typename S>
SinkhornResult<S> sinkhorn_project(const Tensor<S>& m, int iters, double tol) {
    detail::check_sinkhorn_input(m);
    SinkhornResult<S> res;
    res.matrix = m;
    for (int it = 0; it < iters; ++it) {
        res.matrix = normalize_rows(res.matrix);
        res.matrix = normalize_cols(res.matrix);
        res.sweeps = it + 1;
        res.max_deviation = detail::sum_deviation(res.matrix);
        if (res.max_deviation <= tol) {
            res.converged = true;
            break;
        }
    }
    res.matrix.require_finite("sinkhorn_project");
    return res;
}

// Graph version: the same normalization sweeps, unrolled as differentiable
// ops with the identical value-based stopping rule.
template <typename S>
Node<S> sinkhorn_project(Node<S> m, int iters, double tol) {
    detail::check_sinkhorn_input(m.value());
    Node<S> x = m;
    for (int it = 0; it < iters; ++it) {
        x = normalize_rows(x);
        x = normalize_cols(x);
        if (detail::sum_deviation(x.value()) <= tol) break;
    }
    return x;
}

// Plain realization (inference / analysis path).
template <typename S>
RealizedRoutingT<S> realize(const RoutingParamsT<S>& params) {
    RealizedRoutingT<S> out;
    out.mix = sinkhorn_project(exp_elem(params.mix_logits), params.sinkhorn_iters, params.sinkhorn_tol).matrix;
    out.pool = params.pool_weights;
    out.broadcast = params.broadcast_weights;
    return out;
}

// Depth profile of the realized routing: Frobenius norm and population
// variance of each matrix, per layer.
struct LayerRoutingStats {
    int layer = 0;
    double pool_frobenius = 0, mix_frobenius = 0, broadcast_frobenius = 0;
    double pool_variance = 0, mix_variance = 0, broadcast_variance = 0;
};

template <typename S>
double frobenius_norm(const Tensor<S>& t) {
    double s = 0.0;
    for (std::int64_t i = 0; i < t.size(); ++i) s += static_cast<double>(t[i]) * static_cast<double>(t[i]);
    return std::sqrt(s);
}

template <typename S>
double population_variance(const Tensor<S>& t) {
    const double n = static_cast<double>(t.size());
    double mean = 0.0;
    for (std::int64_t i = 0; i < t.size(); ++i) mean += static_cast<double>(t[i]);
    mean /= n;
    double var = 0.0;
    for (std::int64_t i = 0; i < t.size(); ++i) {
        const double c = static_cast<double>(t[i]) - mean;
        var += c * c;
    }
    return var / n;
}

template <typename S>
std::vector<LayerRoutingStats> routing_stats(const std::vector<RealizedRoutingT<S>>& realized) {
    if (realized.empty()) throw std::invalid_argument("routing_stats: need at least one layer");
    std::vector<LayerRoutingStats> out;
    out.reserve(realized.size());
    for (std::size_t l = 0; l < realized.size(); ++l) {
        const auto& r = realized[l];
        out.push_back({static_cast<int>(l), frobenius_norm(r.pool), frobenius_norm(r.mix),
                       frobenius_norm(r.broadcast), population_variance(r.pool), population_variance(r.mix),
                       population_variance(r.broadcast)});
    }
    return out;
}

}  // namespace mhc
