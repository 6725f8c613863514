#include "mhc/train.hpp"

#include <cmath>

#include "mhc/ops.hpp"
#include "mhc/rng.hpp"

namespace mhc {

double lr_at(int step, const TrainConfig& cfg) {
    if (step < 0 || step > cfg.total_steps)
        throw std::invalid_argument("lr_at: step " + std::to_string(step) + " outside [0, " +
                                    std::to_string(cfg.total_steps) + "]");
    if (step < cfg.warmup_steps)
        return cfg.lr_max * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    const double progress =
        static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(3.141592653589793 * progress));
}

double clip_gradients(const std::vector<Tensor<float>*>& grads, double clip_norm) {
    if (clip_norm <= 0.0) throw std::invalid_argument("clip_gradients: clip_norm must be > 0");
    double sumsq = 0.0;
    for (const auto* g : grads)
        for (std::int64_t i = 0; i < g->size(); ++i) {
            const double v = (*g)[i];
            sumsq += v * v;
        }
    const double norm = std::sqrt(sumsq);
    if (norm > clip_norm) {
        const float s = static_cast<float>(clip_norm / norm);
        for (auto* g : grads)
            for (std::int64_t i = 0; i < g->size(); ++i) (*g)[i] *= s;
    }
    return norm;
}

AdamW::AdamW(const TrainConfig& cfg, const std::vector<Parameter<float>*>& params) : cfg_(cfg) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const auto* p : params) {
        m_.push_back(Tensor<float>::zeros(p->value.shape()));
        v_.push_back(Tensor<float>::zeros(p->value.shape()));
    }
}

void AdamW::step(const std::vector<Parameter<float>*>& params, double lr) {
    if (params.size() != m_.size()) throw std::invalid_argument("adamw: parameter list changed size");
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
    constexpr double eps = 1e-8;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter<float>& p = *params[pi];
        for (std::int64_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            const double m = cfg_.beta1 * m_[pi][i] + (1.0 - cfg_.beta1) * g;
            const double v = cfg_.beta2 * v_[pi][i] + (1.0 - cfg_.beta2) * g * g;
            m_[pi][i] = static_cast<float>(m);
            v_[pi][i] = static_cast<float>(v);
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            const double update = lr * (mhat / (std::sqrt(vhat) + eps) + cfg_.weight_decay * p.value[i]);
            p.value[i] = static_cast<float>(p.value[i] - update);
        }
    }
}

namespace {

struct Window {
    std::vector<int> inputs, targets;
};

Window window_at(std::span<const int> tokens, std::size_t start, int len) {
    Window w;
    w.inputs.assign(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                    tokens.begin() + static_cast<std::ptrdiff_t>(start + len));
    w.targets.assign(tokens.begin() + static_cast<std::ptrdiff_t>(start + 1),
                     tokens.begin() + static_cast<std::ptrdiff_t>(start + 1 + len));
    return w;
}

}  // namespace

double evaluate_loss(Model& model, std::span<const int> tokens, int max_windows) {
    if (tokens.size() < 2) throw std::invalid_argument("evaluate_loss: need at least 2 tokens");
    const int len = std::min<int>(model.config().context, static_cast<int>(tokens.size()) - 1);
    const std::size_t last_start = tokens.size() - static_cast<std::size_t>(len) - 1;
    const int windows = std::max(1, std::min<int>(max_windows, static_cast<int>(tokens.size() / (len + 1))));
    double sum = 0.0;
    for (int w = 0; w < windows; ++w) {
        const std::size_t start = windows > 1 ? last_start * w / (windows - 1) : 0;
        Window win = window_at(tokens, start, len);
        Graph<float> g(false);
        Node<float> loss = model.loss_node(g, win.inputs, win.targets);
        sum += loss.value()[0];
    }
    return sum / windows;
}

TrainResult train(Model& model, const Corpus& corpus, const TrainConfig& cfg, int eval_every) {
    cfg.validate();
    const int len = model.config().context;
    if (corpus.tokens().size() < static_cast<std::size_t>(100 * len))
        throw std::invalid_argument("train: corpus has " + std::to_string(corpus.tokens().size()) +
                                    " tokens, need at least 100 * context = " + std::to_string(100 * len));

    auto train_tokens = corpus.train_tokens();
    if (train_tokens.size() < static_cast<std::size_t>(len + 2))
        throw std::invalid_argument("train: train split too small for one window");

    auto params = model.parameters();
    AdamW opt(cfg, params);
    SplitMix64 rng(cfg.seed);
    const int batch = std::max(1, cfg.batch_tokens / len);
    const std::uint64_t max_start = train_tokens.size() - static_cast<std::size_t>(len) - 1;

    TrainResult result;
    auto record = [&](int step, const std::string& split, double loss) {
        result.curve.push_back({step, split, loss});
    };

    for (int step = 0; step < cfg.total_steps; ++step) {
        Graph<float> g(true);
        std::vector<Node<float>> losses;
        losses.reserve(static_cast<std::size_t>(batch));
        for (int b = 0; b < batch; ++b) {
            const auto start = static_cast<std::size_t>(rng.next_below(max_start + 1));
            Window w = window_at(train_tokens, start, len);
            losses.push_back(model.loss_node(g, w.inputs, w.targets));
        }
        Node<float> loss = mean_of(losses);
        const double loss_value = loss.value()[0];
        if (!std::isfinite(loss_value))
            throw numeric_error("train: non-finite loss at step " + std::to_string(step));

        const bool log_step = step % eval_every == 0 || step == cfg.total_steps - 1;
        if (log_step) {
            record(step, "train", loss_value);
            record(step, "holdout", evaluate_loss(model, corpus.holdout_tokens()));
        }

        g.backward(loss);
        std::vector<Tensor<float>*> grads;
        grads.reserve(params.size());
        for (auto* p : params) grads.push_back(&p->grad);
        clip_gradients(grads, cfg.clip_norm);
        opt.step(params, lr_at(step, cfg));
        model.zero_grad();
    }

    result.final_holdout_loss = evaluate_loss(model, corpus.holdout_tokens());
    record(cfg.total_steps, "holdout", result.final_holdout_loss);
    return result;
}

}  // namespace mhc
