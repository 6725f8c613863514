#include "mhc/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mhc/rng.hpp"

namespace mhc {

namespace {

constexpr double kAblationNoiseFloor = 1e-9;
const double kNan = std::numeric_limits<double>::quiet_NaN();

void check_stream(int s, int streams, const char* what) {
    if (s < 0 || s >= streams)
        throw std::invalid_argument(std::string(what) + ": stream " + std::to_string(s) +
                                    " outside [0, " + std::to_string(streams) + ")");
}

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

}  // namespace

void InterventionSpec::validate(int streams, int layers) const {
    if (layer < 0 || layer >= layers)
        throw std::invalid_argument("intervention: layer " + std::to_string(layer) + " outside [0, " +
                                    std::to_string(layers) + ")");
    for (int s : ablate_set) check_stream(s, streams, "intervention ablate_set");
    for (int s : rescue_set) {
        check_stream(s, streams, "intervention rescue_set");
        if (!contains(ablate_set, s))
            throw std::invalid_argument("intervention: rescue_set must be a subset of ablate_set");
    }
    if (mode == InterventionMode::kPatch) {
        if (!ablate_set.empty())
            throw std::invalid_argument("intervention: patch mode requires an empty ablate_set");
        if (!patch_stream) throw std::invalid_argument("intervention: patch mode requires patch_stream");
        check_stream(*patch_stream, streams, "intervention patch_stream");
        if (!source_cache) throw std::invalid_argument("intervention: patch mode requires a source cache");
        if (span_begin < 0 || span_end <= span_begin)
            throw std::invalid_argument("intervention: patch span must be nonempty");
    }
}

Tensor<float> run_intervened(Model& model, std::span<const int> tokens, const InterventionSpec& spec,
                             const ActivationCache& clean) {
    const auto& cfg = model.config();
    spec.validate(cfg.streams, cfg.layers);

    const int t = static_cast<int>(tokens.size());
    if (clean.residuals.size() != static_cast<std::size_t>(cfg.layers) + 1 ||
        clean.routing.size() != static_cast<std::size_t>(cfg.layers))
        throw std::logic_error("run_intervened: clean cache does not cover every layer");
    if (clean.residuals[0].dim(0) != t)
        throw std::logic_error("run_intervened: clean cache was built for a different sequence length");

    Tensor<float> state = clean.residuals[static_cast<std::size_t>(spec.layer)];
    const int d = cfg.model_dim;

    if (spec.mode == InterventionMode::kAblate) {
        for (int s : spec.ablate_set) {
            if (contains(spec.rescue_set, s)) continue;  // rescued: keep the cached clean values
            for (int i = 0; i < t; ++i)
                for (int k = 0; k < d; ++k) state(i, s, k) = 0.0f;
        }
    } else {
        const auto& src = *spec.source_cache;
        if (src.residuals.size() != clean.residuals.size())
            throw std::logic_error("run_intervened: source cache does not cover every layer");
        const auto& src_state = src.residuals[static_cast<std::size_t>(spec.layer)];
        if (src_state.dim(0) != t)
            throw std::logic_error("run_intervened: source cache was built for a different sequence length");
        if (spec.span_end > t)
            throw std::invalid_argument("run_intervened: patch span exceeds sequence length");
        const int s = *spec.patch_stream;
        for (int i = spec.span_begin; i < spec.span_end; ++i)
            for (int k = 0; k < d; ++k) state(i, s, k) = src_state(i, s, k);
    }

    return model.replay_from(spec.layer, state, clean.routing);
}

namespace {

// Mean over prompts of the per-prompt token-mean KL(clean || edited), with the
// edit fixed up to the per-prompt cache.
double mean_intervention_kl(Model& model, const std::vector<std::vector<int>>& prompts,
                            const InterventionSpec& spec) {
    if (prompts.empty()) throw std::invalid_argument("intervention: no prompts");
    double sum = 0.0;
    for (const auto& tokens : prompts) {
        auto fwd = model.forward(tokens, /*want_cache=*/true);
        Tensor<float> edited = run_intervened(model, tokens, spec, *fwd.cache);
        sum += mean_token_kl(fwd.logits, edited);
    }
    return sum / static_cast<double>(prompts.size());
}

}  // namespace

double ablation_kl(Model& model, const std::vector<std::vector<int>>& prompts, int layer, int i, int j) {
    if (i == j) throw std::invalid_argument("ablation_kl: stream pair must be distinct (diagonal undefined)");
    InterventionSpec spec;
    spec.layer = layer;
    spec.ablate_set = {i, j};
    return mean_intervention_kl(model, prompts, spec);
}

std::optional<double> recovery_fraction(double kl_rescue, double kl_ablate) {
    if (kl_ablate <= kAblationNoiseFloor) return std::nullopt;
    return 1.0 - kl_rescue / kl_ablate;
}

std::optional<double> recovery(Model& model, const std::vector<std::vector<int>>& prompts, int layer,
                               int rescue_stream, int ablated_stream) {
    if (rescue_stream == ablated_stream)
        throw std::invalid_argument("recovery: stream pair must be distinct (diagonal undefined)");
    const double kl_ablate = ablation_kl(model, prompts, layer, rescue_stream, ablated_stream);
    InterventionSpec spec;
    spec.layer = layer;
    spec.ablate_set = {rescue_stream, ablated_stream};
    spec.rescue_set = {rescue_stream};
    const double kl_rescue = mean_intervention_kl(model, prompts, spec);
    return recovery_fraction(kl_rescue, kl_ablate);
}

RescueMatrixStack rescue_matrix(Model& model, const std::vector<std::vector<int>>& prompts,
                                const std::vector<int>& layers) {
    const int n = model.config().streams;
    if (n < 2) throw std::invalid_argument("rescue_matrix: needs at least 2 streams");
    if (layers.empty()) throw std::invalid_argument("rescue_matrix: no layers requested");
    if (prompts.empty()) throw std::invalid_argument("rescue_matrix: no prompts");

    // Per prompt and layer: one ablation pass and two rescue passes per
    // unordered pair, aggregated prompt-first per Eq-style expectations.
    RescueMatrixStack stack;
    stack.layers = layers;
    for (int layer : layers) {
        Eigen::MatrixXd abl = Eigen::MatrixXd::Zero(n, n);      // unordered pair KL, stored symmetric
        Eigen::MatrixXd rescue = Eigen::MatrixXd::Zero(n, n);   // (ablated j, rescued i)
        for (const auto& tokens : prompts) {
            auto fwd = model.forward(tokens, /*want_cache=*/true);
            const auto& cache = *fwd.cache;
            for (int i = 0; i < n; ++i) {
                for (int j = i + 1; j < n; ++j) {
                    InterventionSpec spec;
                    spec.layer = layer;
                    spec.ablate_set = {i, j};
                    const double kl_abl =
                        mean_token_kl(fwd.logits, run_intervened(model, tokens, spec, cache));
                    abl(i, j) += kl_abl;
                    abl(j, i) += kl_abl;
                    spec.rescue_set = {i};
                    rescue(j, i) += mean_token_kl(fwd.logits, run_intervened(model, tokens, spec, cache));
                    spec.rescue_set = {j};
                    rescue(i, j) += mean_token_kl(fwd.logits, run_intervened(model, tokens, spec, cache));
                }
            }
        }
        const double inv = 1.0 / static_cast<double>(prompts.size());
        Eigen::MatrixXd rec(n, n);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                if (i == j) {
                    rec(i, j) = kNan;
                    continue;
                }
                auto r = recovery_fraction(rescue(i, j) * inv, abl(i, j) * inv);
                rec(i, j) = r ? *r : kNan;
            }
        }
        stack.per_layer.push_back(std::move(rec));
    }

    stack.mean = Eigen::MatrixXd::Constant(n, n, kNan);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            double sum = 0.0;
            int count = 0;
            for (const auto& m : stack.per_layer) {
                if (std::isnan(m(i, j))) continue;
                sum += m(i, j);
                ++count;
            }
            if (count > 0) stack.mean(i, j) = sum / count;
        }
    }
    return stack;
}

Eigen::MatrixXd patch_heatmap(Model& model, const std::vector<PromptPair>& pairs,
                              const std::vector<int>& layers, const std::vector<int>& streams) {
    if (pairs.empty()) throw std::invalid_argument("patch_heatmap: no prompt pairs");
    if (layers.empty() || streams.empty())
        throw std::invalid_argument("patch_heatmap: no layers or streams requested");

    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(layers.size()),
                                                static_cast<Eigen::Index>(streams.size()));
    for (const auto& pair : pairs) {
        auto target = model.forward(pair.target_tokens, /*want_cache=*/true);
        auto source = model.forward(pair.source_tokens, /*want_cache=*/true);
        for (std::size_t li = 0; li < layers.size(); ++li) {
            for (std::size_t si = 0; si < streams.size(); ++si) {
                InterventionSpec spec;
                spec.layer = layers[li];
                spec.mode = InterventionMode::kPatch;
                spec.patch_stream = streams[si];
                spec.source_cache = &*source.cache;
                spec.span_begin = pair.span_begin;
                spec.span_end = pair.span_end;
                Tensor<float> patched = run_intervened(model, pair.target_tokens, spec, *target.cache);
                sum(static_cast<Eigen::Index>(li), static_cast<Eigen::Index>(si)) +=
                    mean_token_kl(target.logits, patched);
            }
        }
    }
    return sum / static_cast<double>(pairs.size());
}

AsymmetrySeries rescue_asymmetry(const RescueMatrixStack& stack, int stream_a, int stream_b) {
    if (stack.per_layer.empty()) throw std::invalid_argument("rescue_asymmetry: empty stack");
    const int n = static_cast<int>(stack.per_layer.front().rows());
    check_stream(stream_a, n, "rescue_asymmetry");
    check_stream(stream_b, n, "rescue_asymmetry");
    if (stream_a == stream_b) throw std::invalid_argument("rescue_asymmetry: streams must differ");

    AsymmetrySeries series;
    series.stream_a = stream_a;
    series.stream_b = stream_b;
    series.layers = stack.layers;
    double sum = 0.0;
    int count = 0;
    for (std::size_t li = 0; li < stack.per_layer.size(); ++li) {
        const auto& m = stack.per_layer[li];
        // recovery(+b, -a) lives at (ablated a, recovered b)
        const double plus_b = m(stream_a, stream_b);
        const double plus_a = m(stream_b, stream_a);
        if (std::isnan(plus_b) || std::isnan(plus_a)) {
            series.difference.push_back(kNan);
            series.skipped_layers.push_back(stack.layers[li]);
            continue;
        }
        const double diff = plus_b - plus_a;
        series.difference.push_back(diff);
        sum += diff;
        ++count;
    }
    series.mean = count > 0 ? sum / count : kNan;
    return series;
}

// ---------------------------------------------------------------------------
// STR pair construction
// ---------------------------------------------------------------------------

namespace {

struct Piece {
    bool is_slot = false;
    std::string text;  // literal text or slot name
};

std::vector<Piece> parse_template(const std::string& tmpl) {
    std::vector<Piece> pieces;
    std::size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] == '{') {
            const std::size_t close = tmpl.find('}', i);
            if (close == std::string::npos)
                throw std::invalid_argument("template: unterminated { in " + tmpl);
            pieces.push_back({true, tmpl.substr(i + 1, close - i - 1)});
            i = close + 1;
        } else {
            const std::size_t next = tmpl.find('{', i);
            const std::size_t end = next == std::string::npos ? tmpl.size() : next;
            pieces.push_back({false, tmpl.substr(i, end - i)});
            i = end;
        }
    }
    return pieces;
}

const std::vector<std::string>& slot_list(const WordLists& words, const std::string& slot) {
    if (slot == "adj") return words.adjectives;
    if (slot == "noun") return words.nouns;
    if (slot == "verb") return words.verbs;
    throw std::invalid_argument("template: unknown slot {" + slot + "}");
}

}  // namespace

std::vector<PromptPair> build_str_pairs(const std::vector<std::string>& templates, const WordLists& words,
                                        int count, std::uint64_t seed) {
    if (count < 1) throw std::invalid_argument("build_str_pairs: count must be >= 1");
    if (templates.empty()) throw std::invalid_argument("build_str_pairs: no templates");
    for (const auto* list : {&words.adjectives, &words.nouns, &words.verbs})
        if (list->size() < 2)
            throw std::invalid_argument("build_str_pairs: each word list needs at least 2 entries");

    SplitMix64 rng(seed);
    std::vector<PromptPair> pairs;
    pairs.reserve(static_cast<std::size_t>(count));
    for (int c = 0; c < count; ++c) {
        const auto& tmpl = templates[static_cast<std::size_t>(rng.next_below(templates.size()))];
        auto pieces = parse_template(tmpl);
        std::vector<std::size_t> slot_indices;
        for (std::size_t i = 0; i < pieces.size(); ++i)
            if (pieces[i].is_slot) slot_indices.push_back(i);
        if (slot_indices.empty()) throw std::invalid_argument("build_str_pairs: template has no slots: " + tmpl);

        const std::size_t swap_piece =
            slot_indices[static_cast<std::size_t>(rng.next_below(slot_indices.size()))];

        std::string source, target;
        int span_begin = 0, span_end = 0;
        for (std::size_t i = 0; i < pieces.size(); ++i) {
            if (!pieces[i].is_slot) {
                source += pieces[i].text;
                target += pieces[i].text;
                continue;
            }
            const auto& list = slot_list(words, pieces[i].text);
            const std::string& word = list[static_cast<std::size_t>(rng.next_below(list.size()))];
            if (i == swap_piece) {
                std::vector<const std::string*> alts;
                for (const auto& w : list)
                    if (w.size() == word.size() && w != word) alts.push_back(&w);
                if (alts.empty())
                    throw std::runtime_error("build_str_pairs: no equal-length alternative for \"" + word +
                                             "\" in slot {" + pieces[i].text + "}");
                const std::string& alt = *alts[static_cast<std::size_t>(rng.next_below(alts.size()))];
                span_begin = static_cast<int>(source.size());
                span_end = span_begin + static_cast<int>(word.size());
                source += word;
                target += alt;
            } else {
                source += word;
                target += word;
            }
        }
        pairs.push_back({text_to_tokens(source), text_to_tokens(target), span_begin, span_end});
    }
    return pairs;
}

std::vector<PromptPair> build_str_pairs(int count, std::uint64_t seed) {
    return build_str_pairs(default_templates(), default_word_lists(), count, seed);
}

}  // namespace mhc
