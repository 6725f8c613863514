#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mhc/errors.hpp"
#include "mhc/routing.hpp"

namespace mhc {

enum class RoutingMode { kStatic, kDynamic };

inline std::string to_string(RoutingMode m) { return m == RoutingMode::kStatic ? "static" : "dynamic"; }

inline RoutingMode routing_mode_from_string(const std::string& s) {
    if (s == "static") return RoutingMode::kStatic;
    if (s == "dynamic") return RoutingMode::kDynamic;
    throw config_error("routing_mode must be \"static\" or \"dynamic\", got \"" + s + "\"");
}

struct ModelConfig {
    int layers = 4;
    int streams = 4;
    int model_dim = 64;
    int heads = 4;
    int head_dim = 16;
    int vocab = 256;
    int context = 128;
    RoutingMode routing_mode = RoutingMode::kStatic;
    std::uint64_t seed = 1;

    void validate() const {
        if (layers < 1) throw config_error("model.layers must be >= 1");
        if (streams < 1) throw config_error("model.streams must be >= 1");
        if (heads < 1 || head_dim < 1 || heads * head_dim != model_dim)
            throw config_error("model.heads * model.head_dim must equal model.model_dim");
        if (model_dim < 2) throw config_error("model.model_dim must be >= 2");
        if (vocab < 1) throw config_error("model.vocab must be >= 1");
        if (context < 2) throw config_error("model.context must be >= 2");
    }
};

// Per-token hidden state expanded to n parallel residual streams: [T x n x d].
template <typename S>
struct StreamStateT {
    Tensor<S> values;
};
using StreamState = StreamStateT<float>;

// Frozen record of one clean forward pass: the stream state at every depth
// (index 0 = expanded embeddings, index L = pre-collapse), the realized
// routing each block used, and the output logits.
template <typename S>
struct ActivationCacheT {
    std::vector<Tensor<S>> residuals;            // L+1 tensors of [T x n x d]
    std::vector<RealizedRoutingT<S>> routing;    // L entries
    Tensor<S> logits;                            // [T x vocab]
};
using ActivationCache = ActivationCacheT<float>;

template <typename S>
struct ForwardResultT {
    Tensor<S> logits;
    std::optional<ActivationCacheT<S>> cache;
};

template <typename S>
struct LayerWeightsT {
    Parameter<S> ln1_gain, ln1_bias;
    Parameter<S> attn_qkv_w, attn_qkv_b;  // [d x 3d], [3d]
    Parameter<S> attn_proj_w, attn_proj_b;
    Parameter<S> ln2_gain, ln2_bias;
    Parameter<S> mlp_fc_w, mlp_fc_b;      // [d x 4d], [4d]
    Parameter<S> mlp_proj_w, mlp_proj_b;  // [4d x d], [d]
    Parameter<S> mix_logits;              // [n x n]
    Parameter<S> pool_weights;            // [n]
    Parameter<S> broadcast_weights;       // [n]
    Parameter<S> route_w;                 // [d x n*n], dynamic-routing offset map
};

template <typename S>
struct RoutingNodesT {
    Node<S> mix, pool, broadcast;
};

// Decoder-only transformer whose residual pathway is split into n streams per
// token. Each block computes
//     x_{l+1} = Mix x_l + broadcast ⊗ F_l(pool · x_l)
// with Mix doubly stochastic, and F_l a pre-norm causal attention + GELU MLP
// pair. Token/position embeddings are replicated into the streams on entry;
// the streams are pooled by fixed collapse weights (all ones by default), then
// final-norm and the tied embedding produce logits.
template <typename S>
class ModelT {
public:
    explicit ModelT(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        init_weights();
    }

    const ModelConfig& config() const { return cfg_; }

    int sinkhorn_iters = 20;
    double sinkhorn_tol = 1e-6;

    // Stable, named parameter order; the checkpoint manifest follows it.
    std::vector<Parameter<S>*> parameters() {
        std::vector<Parameter<S>*> out{&wte_, &wpe_, &lnf_gain_, &lnf_bias_};
        for (auto& lw : layers_) {
            out.push_back(&lw.ln1_gain);
            out.push_back(&lw.ln1_bias);
            out.push_back(&lw.attn_qkv_w);
            out.push_back(&lw.attn_qkv_b);
            out.push_back(&lw.attn_proj_w);
            out.push_back(&lw.attn_proj_b);
            out.push_back(&lw.ln2_gain);
            out.push_back(&lw.ln2_bias);
            out.push_back(&lw.mlp_fc_w);
            out.push_back(&lw.mlp_fc_b);
            out.push_back(&lw.mlp_proj_w);
            out.push_back(&lw.mlp_proj_b);
            out.push_back(&lw.mix_logits);
            out.push_back(&lw.pool_weights);
            out.push_back(&lw.broadcast_weights);
            out.push_back(&lw.route_w);
        }
        return out;
    }

    LayerWeightsT<S>& layer(int l) { return layers_[static_cast<std::size_t>(l)]; }
    const LayerWeightsT<S>& layer(int l) const { return layers_[static_cast<std::size_t>(l)]; }

    // Fixed per-stream weights applied when collapsing the streams at the
    // output; all ones (a plain stream sum) unless an experiment overrides it.
    Tensor<S>& collapse_weights() { return collapse_weights_; }
    const Tensor<S>& collapse_weights() const { return collapse_weights_; }

    void zero_grad() {
        for (auto* p : parameters()) p->zero_grad();
    }

    // ------------------------------------------------------------------
    // forward passes
    // ------------------------------------------------------------------

    ForwardResultT<S> forward(std::span<const int> tokens, bool want_cache = false) {
        Graph<S> g(false);
        ActivationCacheT<S> cache;
        Node<S> logits = forward_nodes(g, tokens, want_cache ? &cache : nullptr);
        ForwardResultT<S> out;
        out.logits = logits.value();
        if (want_cache) {
            cache.logits = logits.value();
            out.cache = std::move(cache);
        }
        return out;
    }

    // Builds the full differentiable forward pass on an existing graph and
    // returns the logits node. Parameters are bound to the graph, so
    // g.backward() accumulates into their .grad.
    Node<S> forward_nodes(Graph<S>& g, std::span<const int> tokens, ActivationCacheT<S>* cache = nullptr) {
        check_tokens(tokens);
        const int t = static_cast<int>(tokens.size());
        Node<S> wte = g.param(wte_);
        Node<S> tok = rows(wte, std::vector<int>(tokens.begin(), tokens.end()));
        std::vector<int> positions(static_cast<std::size_t>(t));
        for (int i = 0; i < t; ++i) positions[static_cast<std::size_t>(i)] = i;
        Node<S> pos = rows(g.param(wpe_), positions);
        Node<S> x = expand_streams(add(tok, pos), cfg_.streams);
        if (cache) cache->residuals.push_back(x.value());

        for (int l = 0; l < cfg_.layers; ++l) {
            RoutingNodesT<S> rn = realize_nodes(g, l, x);
            if (cache) cache->routing.push_back({rn.mix.value(), rn.pool.value(), rn.broadcast.value()});
            x = block_nodes(g, x, rn, l);
            if (cache) cache->residuals.push_back(x.value());
        }
        return head_nodes(g, x, wte);
    }

    Node<S> loss_node(Graph<S>& g, std::span<const int> tokens, std::span<const int> targets) {
        Node<S> logits = forward_nodes(g, tokens);
        return cross_entropy_mean(logits, std::vector<int>(targets.begin(), targets.end()));
    }

    // Re-runs the pass from the stream state entering block `layer`, using the
    // supplied frozen routing for every remaining block. Bit-identical to the
    // original pass when given an unedited cached state.
    Tensor<S> replay_from(int layer, const Tensor<S>& state,
                          std::span<const RealizedRoutingT<S>> frozen_routing) {
        if (layer < 0 || layer >= cfg_.layers)
            throw std::invalid_argument("replay_from: layer " + std::to_string(layer) + " out of range [0, " +
                                        std::to_string(cfg_.layers) + ")");
        if (static_cast<int>(frozen_routing.size()) != cfg_.layers)
            throw std::invalid_argument("replay_from: expected one frozen routing entry per layer");
        Graph<S> g(false);
        Node<S> x = g.input(state);
        for (int l = layer; l < cfg_.layers; ++l) {
            const auto& fr = frozen_routing[static_cast<std::size_t>(l)];
            RoutingNodesT<S> rn{g.input(fr.mix), g.input(fr.pool), g.input(fr.broadcast)};
            x = block_nodes(g, x, rn, l);
        }
        return head_nodes(g, x, g.param(wte_)).value();
    }

    // One block applied to a plain stream state with explicit routing; the
    // block-level contract surface used by tests and oracles.
    Tensor<S> block_apply(const Tensor<S>& state, const RealizedRoutingT<S>& routing, int layer) {
        Graph<S> g(false);
        RoutingNodesT<S> rn{g.input(routing.mix), g.input(routing.pool), g.input(routing.broadcast)};
        return block_nodes(g, g.input(state), rn, layer).value();
    }

    // Static realization of every layer's routing (dynamic offsets at zero).
    std::vector<RealizedRoutingT<S>> realized_static_routing() {
        std::vector<RealizedRoutingT<S>> out;
        out.reserve(static_cast<std::size_t>(cfg_.layers));
        for (auto& lw : layers_) {
            RoutingParamsT<S> rp{lw.mix_logits.value, lw.pool_weights.value, lw.broadcast_weights.value,
                                 sinkhorn_iters, sinkhorn_tol};
            out.push_back(realize(rp));
        }
        return out;
    }

    template <typename To>
    ModelT<To> cast() {
        ModelT<To> out(cfg_);
        out.sinkhorn_iters = sinkhorn_iters;
        out.sinkhorn_tol = sinkhorn_tol;
        auto dst = out.parameters();
        auto src = parameters();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value.template cast<To>();
        out.collapse_weights() = collapse_weights_.template cast<To>();
        return out;
    }

private:
    template <typename>
    friend class ModelT;

    void check_tokens(std::span<const int> tokens) const {
        if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
        if (static_cast<int>(tokens.size()) > cfg_.context)
            throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) +
                                        " exceeds context " + std::to_string(cfg_.context));
        for (int id : tokens)
            if (id < 0 || id >= cfg_.vocab)
                throw std::invalid_argument("forward: token id " + std::to_string(id) +
                                            " outside vocab [0, " + std::to_string(cfg_.vocab) + ")");
    }

    RoutingNodesT<S> realize_nodes(Graph<S>& g, int l, Node<S> x) {
        auto& lw = layers_[static_cast<std::size_t>(l)];
        Node<S> logits = g.param(lw.mix_logits);
        if (cfg_.routing_mode == RoutingMode::kDynamic) {
            Node<S> pooled = seq_stream_mean(x);                       // [1 x d]
            Node<S> offset = matmul(pooled, g.param(lw.route_w));      // [1 x n*n]
            logits = add(logits, reshape(offset, {cfg_.streams, cfg_.streams}));
        }
        RoutingNodesT<S> rn;
        rn.mix = sinkhorn_project(exp_elem(logits), sinkhorn_iters, sinkhorn_tol);
        rn.pool = g.param(lw.pool_weights);
        rn.broadcast = g.param(lw.broadcast_weights);
        return rn;
    }

    Node<S> block_nodes(Graph<S>& g, Node<S> x, const RoutingNodesT<S>& rn, int l) {
        Node<S> pooled = stream_pool(rn.pool, x);         // [T x d]
        Node<S> f = layer_fn_nodes(g, pooled, l);         // [T x d]
        return add(stream_mix(rn.mix, x), stream_broadcast(rn.broadcast, f));
    }

    // F_l(u) = Attn(LN1(u)) + MLP(LN2(u + Attn(LN1(u)))), i.e. a standard
    // pre-norm GPT-2 block minus its identity path, so that u + F_l(u) is
    // exactly the usual double-residual block.
    Node<S> layer_fn_nodes(Graph<S>& g, Node<S> u, int l) {
        auto& lw = layers_[static_cast<std::size_t>(l)];
        Node<S> a = attention_nodes(g, layer_norm(u, g.param(lw.ln1_gain), g.param(lw.ln1_bias)), lw);
        Node<S> v = add(u, a);
        Node<S> h = layer_norm(v, g.param(lw.ln2_gain), g.param(lw.ln2_bias));
        Node<S> m = add_bias(matmul(gelu(add_bias(matmul(h, g.param(lw.mlp_fc_w)), g.param(lw.mlp_fc_b))),
                                    g.param(lw.mlp_proj_w)),
                             g.param(lw.mlp_proj_b));
        return add(a, m);
    }

    Node<S> attention_nodes(Graph<S>& g, Node<S> h, LayerWeightsT<S>& lw) {
        const int d = cfg_.model_dim, hd = cfg_.head_dim;
        Node<S> qkv = add_bias(matmul(h, g.param(lw.attn_qkv_w)), g.param(lw.attn_qkv_b));
        std::vector<Node<S>> heads;
        heads.reserve(static_cast<std::size_t>(cfg_.heads));
        const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
        for (int i = 0; i < cfg_.heads; ++i) {
            Node<S> q = slice_cols(qkv, i * hd, hd);
            Node<S> k = slice_cols(qkv, d + i * hd, hd);
            Node<S> v = slice_cols(qkv, 2 * d + i * hd, hd);
            Node<S> att = softmax(causal_mask(scale(matmul(q, transpose(k)), inv_sqrt)), 1);
            heads.push_back(matmul(att, v));
        }
        return add_bias(matmul(concat_cols(heads), g.param(lw.attn_proj_w)), g.param(lw.attn_proj_b));
    }

    Node<S> head_nodes(Graph<S>& g, Node<S> x, Node<S> wte) {
        Node<S> collapsed = stream_pool(g.input(collapse_weights_), x);
        Node<S> normed = layer_norm(collapsed, g.param(lnf_gain_), g.param(lnf_bias_));
        return matmul(normed, transpose(wte));  // tied unembedding
    }

    void init_weights() {
        const int d = cfg_.model_dim, n = cfg_.streams;
        SplitMix64 rng(cfg_.seed);
        wte_ = {"wte", Tensor<S>::randn({cfg_.vocab, d}, rng, 0.02)};
        wpe_ = {"wpe", Tensor<S>::randn({cfg_.context, d}, rng, 0.01)};
        lnf_gain_ = {"ln_f.gain", Tensor<S>::full({d}, S(1))};
        lnf_bias_ = {"ln_f.bias", Tensor<S>::zeros({d})};
        layers_.clear();
        layers_.reserve(static_cast<std::size_t>(cfg_.layers));
        for (int l = 0; l < cfg_.layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            LayerWeightsT<S> lw;
            lw.ln1_gain = {p + "ln1.gain", Tensor<S>::full({d}, S(1))};
            lw.ln1_bias = {p + "ln1.bias", Tensor<S>::zeros({d})};
            lw.attn_qkv_w = {p + "attn.qkv_w", Tensor<S>::randn({d, 3 * d}, rng, 0.02)};
            lw.attn_qkv_b = {p + "attn.qkv_b", Tensor<S>::zeros({3 * d})};
            lw.attn_proj_w = {p + "attn.proj_w", Tensor<S>::randn({d, d}, rng, 0.02)};
            lw.attn_proj_b = {p + "attn.proj_b", Tensor<S>::zeros({d})};
            lw.ln2_gain = {p + "ln2.gain", Tensor<S>::full({d}, S(1))};
            lw.ln2_bias = {p + "ln2.bias", Tensor<S>::zeros({d})};
            lw.mlp_fc_w = {p + "mlp.fc_w", Tensor<S>::randn({d, 4 * d}, rng, 0.02)};
            lw.mlp_fc_b = {p + "mlp.fc_b", Tensor<S>::zeros({4 * d})};
            lw.mlp_proj_w = {p + "mlp.proj_w", Tensor<S>::randn({4 * d, d}, rng, 0.02)};
            lw.mlp_proj_b = {p + "mlp.proj_b", Tensor<S>::zeros({d})};
            // mix starts near the identity, pooling at 1/n, broadcast at one:
            // each stream behaves like x + F(mean of streams) at initialization.
            Tensor<S> logits = Tensor<S>::zeros({n, n});
            for (int i = 0; i < n; ++i) logits(i, i) = S(6);
            lw.mix_logits = {p + "routing.mix_logits", std::move(logits)};
            lw.pool_weights = {p + "routing.pool_weights", Tensor<S>::full({n}, S(1) / S(n))};
            lw.broadcast_weights = {p + "routing.broadcast_weights", Tensor<S>::full({n}, S(1))};
            lw.route_w = {p + "routing.route_w", Tensor<S>::zeros({d, n * n})};
            layers_.push_back(std::move(lw));
        }
        collapse_weights_ = Tensor<S>::full({n}, S(1));
    }

    ModelConfig cfg_;
    Parameter<S> wte_, wpe_, lnf_gain_, lnf_bias_;
    std::vector<LayerWeightsT<S>> layers_;
    Tensor<S> collapse_weights_;
};

using Model = ModelT<float>;

// ---------------------------------------------------------------------------
// distribution comparison
// ---------------------------------------------------------------------------

// KL(softmax(p) || softmax(q)) at temperature 1, accumulated in double via
// log-sum-exp; clamped at zero against rounding.
template <typename S>
double kl_divergence(const Tensor<S>& p_logits, const Tensor<S>& q_logits) {
    if (p_logits.size() != q_logits.size())
        throw std::invalid_argument("kl_divergence: logit lengths differ");
    const std::int64_t v = p_logits.size();
    double pmax = p_logits[0], qmax = q_logits[0];
    for (std::int64_t i = 1; i < v; ++i) {
        pmax = std::max(pmax, static_cast<double>(p_logits[i]));
        qmax = std::max(qmax, static_cast<double>(q_logits[i]));
    }
    double psum = 0.0, qsum = 0.0;
    for (std::int64_t i = 0; i < v; ++i) {
        psum += std::exp(static_cast<double>(p_logits[i]) - pmax);
        qsum += std::exp(static_cast<double>(q_logits[i]) - qmax);
    }
    const double plse = pmax + std::log(psum), qlse = qmax + std::log(qsum);
    double kl = 0.0;
    for (std::int64_t i = 0; i < v; ++i) {
        const double lp = static_cast<double>(p_logits[i]) - plse;
        const double lq = static_cast<double>(q_logits[i]) - qlse;
        kl += std::exp(lp) * (lp - lq);
    }
    return std::max(0.0, kl);
}

// Mean over token positions of the per-token KL between two [T x V] logit sets.
template <typename S>
double mean_token_kl(const Tensor<S>& p_logits, const Tensor<S>& q_logits) {
    if (!p_logits.same_shape(q_logits))
        throw std::invalid_argument("mean_token_kl: shape mismatch " + shape_str(p_logits.shape()) + " vs " +
                                    shape_str(q_logits.shape()));
    const int t = p_logits.dim(0), v = p_logits.dim(1);
    double sum = 0.0;
    for (int i = 0; i < t; ++i) {
        Tensor<S> p({v}), q({v});
        std::copy(p_logits.data() + static_cast<std::int64_t>(i) * v,
                  p_logits.data() + static_cast<std::int64_t>(i + 1) * v, p.data());
        std::copy(q_logits.data() + static_cast<std::int64_t>(i) * v,
                  q_logits.data() + static_cast<std::int64_t>(i + 1) * v, q.data());
        sum += kl_divergence(p, q);
    }
    return sum / t;
}

}  // namespace mhc
