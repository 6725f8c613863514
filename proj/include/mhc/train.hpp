#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mhc/corpus.hpp"
#include "mhc/errors.hpp"
#include "mhc/model.hpp"

namespace mhc {

struct TrainConfig {
    double lr_max = 3e-4;
    double lr_min = 3e-5;
    int warmup_steps = 200;
    int total_steps = 2000;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double clip_norm = 1.0;
    int batch_tokens = 1024;
    std::uint64_t seed = 2;

    void validate() const {
        if (!(lr_min > 0.0 && lr_min <= lr_max)) throw config_error("train: need 0 < lr_min <= lr_max");
        if (warmup_steps < 0 || warmup_steps >= total_steps)
            throw config_error("train: need 0 <= warmup_steps < total_steps");
        if (clip_norm <= 0.0) throw config_error("train: clip_norm must be > 0");
        if (batch_tokens < 1) throw config_error("train: batch_tokens must be >= 1");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
            throw config_error("train: betas must lie in [0, 1)");
    }
};

// Linear warmup from zero to lr_max over warmup_steps, then cosine decay to
// lr_min at total_steps. Valid for step in [0, total_steps].
double lr_at(int step, const TrainConfig& cfg);

// Scales all gradients by clip_norm / g when the global L2 norm g exceeds
// clip_norm; returns g (pre-scaling).
double clip_gradients(const std::vector<Tensor<float>*>& grads, double clip_norm);

// Bias-corrected AdamW with decoupled weight decay (update includes
// lr * weight_decay * param), epsilon 1e-8.
class AdamW {
public:
    AdamW(const TrainConfig& cfg, const std::vector<Parameter<float>*>& params);

    // Applies one update from the accumulated gradients, then leaves the
    // gradients untouched (callers zero them).
    void step(const std::vector<Parameter<float>*>& params, double lr);

    int steps_taken() const { return step_; }

private:
    TrainConfig cfg_;
    int step_ = 0;
    std::vector<Tensor<float>> m_, v_;
};

struct LossPoint {
    int step;
    std::string split;  // "train" or "holdout"
    double loss;
};

struct TrainResult {
    std::vector<LossPoint> curve;
    double final_holdout_loss = 0.0;
};

// Next-token cross entropy on random contiguous windows of the train split;
// evaluates on fixed holdout windows every eval_every steps. Deterministic
// given cfg.seed and the model's initial weights.
TrainResult train(Model& model, const Corpus& corpus, const TrainConfig& cfg, int eval_every = 100);

// Mean cross entropy of the model over fixed evenly spaced windows of a token
// stream (no gradient).
double evaluate_loss(Model& model, std::span<const int> tokens, int max_windows = 16);

}  // namespace mhc
