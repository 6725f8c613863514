#pragma once

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <vector>

#include "mhc/corpus.hpp"
#include "mhc/model.hpp"

namespace mhc {

// A counterfactual prompt pair built by swapping one word for a same-length
// alternative; tokens differ exactly on [span_begin, span_end).
struct PromptPair {
    std::vector<int> source_tokens;
    std::vector<int> target_tokens;
    int span_begin = 0;
    int span_end = 0;
};

enum class InterventionMode { kAblate, kPatch };

// Declarative description of one edit to the stream state entering one block.
// Layer index 0 addresses the expanded embeddings; rescued streams keep their
// cached clean values while the rest of the ablate set is zeroed. Patch mode
// overwrites (layer, patch_stream) on [span_begin, span_end) with residuals
// from the source cache.
struct InterventionSpec {
    int layer = 0;
    std::vector<int> ablate_set;
    std::vector<int> rescue_set;
    InterventionMode mode = InterventionMode::kAblate;
    std::optional<int> patch_stream;
    const ActivationCache* source_cache = nullptr;
    int span_begin = 0;
    int span_end = 0;

    void validate(int streams, int layers) const;
};

// Deterministic STR pairs from the sentence templates; the substituted word
// always changes and always keeps its byte length.
std::vector<PromptPair> build_str_pairs(const std::vector<std::string>& templates, const WordLists& words,
                                        int count, std::uint64_t seed);
std::vector<PromptPair> build_str_pairs(int count, std::uint64_t seed);

// Forward pass with the layer-entry state edited per spec. The realized
// routing of every block is frozen from the clean cache, so an edit-free spec
// replays the clean pass bit for bit.
Tensor<float> run_intervened(Model& model, std::span<const int> tokens, const InterventionSpec& spec,
                             const ActivationCache& clean);

// Mean token-wise KL(clean || ablated) over prompts for ablating the stream
// pair {i, j} at one layer.
double ablation_kl(Model& model, const std::vector<std::vector<int>>& prompts, int layer, int i, int j);

// Fractional KL reduction relative to full ablation: 1 - kl_rescue/kl_ablate.
// Undefined (nullopt) when the ablation KL is at noise level.
std::optional<double> recovery_fraction(double kl_rescue, double kl_ablate);

// Recovery for rescuing stream i while stream j stays ablated.
std::optional<double> recovery(Model& model, const std::vector<std::vector<int>>& prompts, int layer,
                               int rescue_stream, int ablated_stream);

// Per-layer n x n recovery matrices plus their across-layer mean. Entry
// (ablated partner j, recovered i) holds Recovery(+i, -j) as a fraction;
// diagonal and unstable entries are NaN and excluded from the mean.
struct RescueMatrixStack {
    std::vector<int> layers;
    std::vector<Eigen::MatrixXd> per_layer;
    Eigen::MatrixXd mean;
};

RescueMatrixStack rescue_matrix(Model& model, const std::vector<std::vector<int>>& prompts,
                                const std::vector<int>& layers);

// Mean KL between clean-target and patched-target logits when one
// (layer, stream) residual span is injected from the source run.
Eigen::MatrixXd patch_heatmap(Model& model, const std::vector<PromptPair>& pairs,
                              const std::vector<int>& layers, const std::vector<int>& streams);

// Per-layer recovery(+b, -a) - recovery(+a, -b) for one stream pair.
struct AsymmetrySeries {
    int stream_a = 0;
    int stream_b = 0;
    std::vector<int> layers;
    std::vector<double> difference;  // NaN where either side is undefined
    std::vector<int> skipped_layers;
    double mean = 0.0;  // over defined layers
};

AsymmetrySeries rescue_asymmetry(const RescueMatrixStack& stack, int stream_a, int stream_b);

}  // namespace mhc
