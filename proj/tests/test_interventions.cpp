#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mhc/interventions.hpp"
#include "oracles.hpp"

using namespace mhc;

namespace {

ModelConfig base_config(int layers, int streams, std::uint64_t seed) {
    ModelConfig cfg;
    cfg.layers = layers;
    cfg.streams = streams;
    cfg.model_dim = 16;
    cfg.heads = 2;
    cfg.head_dim = 8;
    cfg.vocab = 256;
    cfg.context = 64;
    cfg.seed = seed;
    return cfg;
}

// Streams 0 and 1 are exact functional copies: uniform doubly stochastic mix,
// uniform pooling, equal broadcast. Expansion makes them identical and every
// block treats them symmetrically.
Model tied_copy_model(int layers = 2, std::uint64_t seed = 11) {
    Model model(base_config(layers, 2, seed));
    for (int l = 0; l < layers; ++l) {
        auto& lw = model.layer(l);
        lw.mix_logits.value = Tensor<float>::zeros({2, 2});
        lw.pool_weights.value = Tensor<float>::full({2}, 0.5f);
        lw.broadcast_weights.value = Tensor<float>::full({2}, 1.0f);
    }
    return model;
}

// Stream 2 has zero outgoing influence: pooling weight zero, a mix whose
// column (and row) 2 is isolated to itself, and a zeroed collapse weight.
Model dead_stream_model(int layers = 2, std::uint64_t seed = 13) {
    Model model(base_config(layers, 3, seed));
    for (int l = 0; l < layers; ++l) {
        auto& lw = model.layer(l);
        Tensor<float> logits = Tensor<float>::zeros({3, 3});
        for (int i = 0; i < 3; ++i) {
            logits(i, 2) = -50.0f;
            logits(2, i) = -50.0f;
        }
        logits(2, 2) = 50.0f;
        lw.mix_logits.value = logits;
        lw.pool_weights.value = Tensor<float>({3}, {0.5f, 0.5f, 0.0f});
    }
    model.collapse_weights()[2] = 0.0f;
    return model;
}

std::vector<std::vector<int>> sentence_prompts(int count, std::uint64_t seed) {
    auto pairs = build_str_pairs(count, seed);
    std::vector<std::vector<int>> prompts;
    for (const auto& p : pairs) prompts.push_back(p.target_tokens);
    return prompts;
}

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
    if (!a.same_shape(b)) return false;
    for (std::int64_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

}  // namespace

TEST_SUITE("interventions") {

TEST_CASE("build_str_pairs: pairs differ exactly on the substituted span") {
    auto pairs = build_str_pairs(50, 7);
    REQUIRE(pairs.size() == 50);
    for (const auto& p : pairs) {
        REQUIRE(p.source_tokens.size() == p.target_tokens.size());
        CHECK(p.span_end > p.span_begin);
        for (int i = 0; i < static_cast<int>(p.source_tokens.size()); ++i) {
            if (i >= p.span_begin && i < p.span_end) continue;
            CHECK(p.source_tokens[static_cast<std::size_t>(i)] == p.target_tokens[static_cast<std::size_t>(i)]);
        }
        // the substitution always changes the word
        bool any_diff = false;
        for (int i = p.span_begin; i < p.span_end; ++i)
            any_diff = any_diff ||
                       p.source_tokens[static_cast<std::size_t>(i)] != p.target_tokens[static_cast<std::size_t>(i)];
        CHECK(any_diff);
    }
}

TEST_CASE("build_str_pairs: three-byte nouns swap within their length group") {
    WordLists words;
    words.adjectives = {"big", "old"};
    words.nouns = {"cat", "dog"};
    words.verbs = {"sees", "pets"};
    auto pairs = build_str_pairs({"The {noun} {verb} the {noun}."}, words, 20, 3);
    for (const auto& p : pairs) CHECK(p.span_end - p.span_begin >= 3);
}

TEST_CASE("build_str_pairs: deterministic for a fixed seed") {
    auto a = build_str_pairs(100, 7);
    auto b = build_str_pairs(100, 7);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].source_tokens == b[i].source_tokens);
        CHECK(a[i].target_tokens == b[i].target_tokens);
        CHECK(a[i].span_begin == b[i].span_begin);
        CHECK(a[i].span_end == b[i].span_end);
    }
}

TEST_CASE("build_str_pairs: no equal-length candidate is a generation error") {
    WordLists words;
    words.adjectives = {"big", "tiny"};  // lengths 3 and 4: no same-length partner
    words.nouns = {"cat", "bird"};
    words.verbs = {"sees", "likes"};
    CHECK_THROWS_AS(build_str_pairs({"The {adj} {noun} {verb}."}, words, 50, 1), std::runtime_error);
}

TEST_CASE("run_intervened: rescuing the whole ablate set replays the clean pass bit for bit") {
    Model model = tied_copy_model();
    auto prompts = sentence_prompts(3, 17);
    for (const auto& tokens : prompts) {
        auto fwd = model.forward(tokens, true);
        for (int layer = 0; layer < model.config().layers; ++layer) {
            InterventionSpec spec;
            spec.layer = layer;
            spec.ablate_set = {0, 1};
            spec.rescue_set = {0, 1};
            Tensor<float> logits = run_intervened(model, tokens, spec, *fwd.cache);
            CHECK(bit_equal(logits, fwd.logits));
            CHECK(mean_token_kl(fwd.logits, logits) == 0.0);
        }
    }
}

TEST_CASE("run_intervened: self-patch is the identity") {
    Model model = tied_copy_model();
    auto tokens = sentence_prompts(1, 19)[0];
    auto fwd = model.forward(tokens, true);
    InterventionSpec spec;
    spec.layer = 1;
    spec.mode = InterventionMode::kPatch;
    spec.patch_stream = 1;
    spec.source_cache = &*fwd.cache;  // patch from the prompt's own cache
    spec.span_begin = 2;
    spec.span_end = 6;
    Tensor<float> logits = run_intervened(model, tokens, spec, *fwd.cache);
    CHECK(bit_equal(logits, fwd.logits));
}

TEST_CASE("run_intervened: contract violations throw") {
    Model model = tied_copy_model();
    auto tokens = sentence_prompts(1, 23)[0];
    auto fwd = model.forward(tokens, true);

    InterventionSpec bad_rescue;
    bad_rescue.layer = 0;
    bad_rescue.ablate_set = {0};
    bad_rescue.rescue_set = {1};  // not a subset
    CHECK_THROWS_AS(run_intervened(model, tokens, bad_rescue, *fwd.cache), std::invalid_argument);

    InterventionSpec bad_patch;
    bad_patch.layer = 0;
    bad_patch.mode = InterventionMode::kPatch;
    bad_patch.ablate_set = {0};  // must be empty in patch mode
    bad_patch.patch_stream = 0;
    bad_patch.source_cache = &*fwd.cache;
    bad_patch.span_begin = 0;
    bad_patch.span_end = 2;
    CHECK_THROWS_AS(run_intervened(model, tokens, bad_patch, *fwd.cache), std::invalid_argument);

    InterventionSpec no_stream;
    no_stream.layer = 0;
    no_stream.mode = InterventionMode::kPatch;
    no_stream.source_cache = &*fwd.cache;
    no_stream.span_begin = 0;
    no_stream.span_end = 2;
    CHECK_THROWS_AS(run_intervened(model, tokens, no_stream, *fwd.cache), std::invalid_argument);

    // cache built for a different sequence length
    auto other_tokens = tokens;
    other_tokens.push_back(32);
    auto other = model.forward(other_tokens, true);
    InterventionSpec ok;
    ok.layer = 0;
    ok.ablate_set = {0};
    CHECK_THROWS_AS(run_intervened(model, tokens, ok, *other.cache), std::logic_error);

    InterventionSpec bad_layer;
    bad_layer.layer = 99;
    CHECK_THROWS_AS(run_intervened(model, tokens, bad_layer, *fwd.cache), std::invalid_argument);
}

TEST_CASE("dead stream: zeroing it is causally invisible") {
    Model model = dead_stream_model();
    auto prompts = sentence_prompts(4, 31);
    for (const auto& tokens : prompts) {
        auto fwd = model.forward(tokens, true);
        for (int layer = 0; layer < model.config().layers; ++layer) {
            InterventionSpec spec;
            spec.layer = layer;
            spec.ablate_set = {2};
            Tensor<float> logits = run_intervened(model, tokens, spec, *fwd.cache);
            CHECK(mean_token_kl(fwd.logits, logits) < 1e-6);
        }
    }
}

TEST_CASE("ablation_kl: matches a per-token loop oracle and is nonnegative") {
    Model model = tied_copy_model();
    auto prompts = sentence_prompts(3, 37);
    const double got = ablation_kl(model, prompts, 1, 0, 1);
    CHECK(got >= 0.0);

    // oracle: recompute the mean with explicit loops and the direct KL formula
    double sum_over_prompts = 0.0;
    for (const auto& tokens : prompts) {
        auto fwd = model.forward(tokens, true);
        InterventionSpec spec;
        spec.layer = 1;
        spec.ablate_set = {0, 1};
        Tensor<float> abl = run_intervened(model, tokens, spec, *fwd.cache);
        double token_sum = 0.0;
        const int t = abl.dim(0), v = abl.dim(1);
        for (int i = 0; i < t; ++i) {
            oracles::dvec p(static_cast<std::size_t>(v)), q(static_cast<std::size_t>(v));
            for (int k = 0; k < v; ++k) {
                p[static_cast<std::size_t>(k)] = fwd.logits(i, k);
                q[static_cast<std::size_t>(k)] = abl(i, k);
            }
            token_sum += oracles::kl_direct(p, q);
        }
        sum_over_prompts += token_sum / t;
    }
    const double expect = sum_over_prompts / static_cast<double>(prompts.size());
    CHECK(std::abs(got - expect) < 1e-9);
    CHECK(got > 1e-6);  // zeroing both streams genuinely hurts
}

TEST_CASE("ablation_kl: the diagonal is a contract error") {
    Model model = tied_copy_model();
    auto prompts = sentence_prompts(1, 41);
    CHECK_THROWS_AS(ablation_kl(model, prompts, 0, 1, 1), std::invalid_argument);
}

TEST_CASE("ablation_kl: clean distribution is always the first KL argument") {
    Model model = tied_copy_model();
    auto prompts = sentence_prompts(2, 43);
    const double forward_order = ablation_kl(model, prompts, 0, 0, 1);

    // reversed-argument variant, computed manually
    double reversed = 0.0;
    for (const auto& tokens : prompts) {
        auto fwd = model.forward(tokens, true);
        InterventionSpec spec;
        spec.layer = 0;
        spec.ablate_set = {0, 1};
        Tensor<float> abl = run_intervened(model, tokens, spec, *fwd.cache);
        reversed += mean_token_kl(abl, fwd.logits);
    }
    reversed /= static_cast<double>(prompts.size());
    CHECK(std::abs(forward_order - reversed) > 1e-6);  // KL is not symmetric here
}

TEST_CASE("recovery_fraction: the published arithmetic identities") {
    CHECK(*recovery_fraction(0.5, 2.0) == doctest::Approx(0.75));
    CHECK(*recovery_fraction(2.0, 2.0) == doctest::Approx(0.0));
    CHECK(*recovery_fraction(0.0, 2.0) == doctest::Approx(1.0));
    CHECK(*recovery_fraction(3.0, 2.0) < 0.0);  // a harmful rescue goes negative
    CHECK(!recovery_fraction(0.5, 1e-10));      // unstable denominator: undefined
}

TEST_CASE("rescue_matrix: tied-copy streams give a symmetric matrix with an empty diagonal") {
    Model model = tied_copy_model();
    auto prompts = sentence_prompts(4, 47);
    std::vector<int> layers{0, 1};
    auto stack = rescue_matrix(model, prompts, layers);

    REQUIRE(stack.per_layer.size() == 2);
    for (const auto& m : stack.per_layer) {
        CHECK(m.rows() == 2);
        CHECK(std::isnan(m(0, 0)));
        CHECK(std::isnan(m(1, 1)));
        CHECK(std::abs(m(0, 1) - m(1, 0)) < 0.02);
    }
    CHECK(std::abs(stack.mean(0, 1) - stack.mean(1, 0)) < 0.02);
}

TEST_CASE("rescue_matrix: a dead stream cannot rescue and needs no rescuing") {
    Model model = dead_stream_model();
    auto prompts = sentence_prompts(4, 53);
    std::vector<int> layers{0, 1};
    auto stack = rescue_matrix(model, prompts, layers);

    for (std::size_t li = 0; li < stack.per_layer.size(); ++li) {
        const auto& m = stack.per_layer[li];
        const int layer = layers[li];
        // ablating {2, j} behaves as single ablation of j
        for (int j = 0; j < 2; ++j) {
            const double pair_kl = ablation_kl(model, prompts, layer, 2, j);
            InterventionSpec only_j;
            only_j.layer = layer;
            only_j.ablate_set = {j};
            double single = 0.0;
            for (const auto& tokens : prompts) {
                auto fwd = model.forward(tokens, true);
                single += mean_token_kl(fwd.logits, run_intervened(model, tokens, only_j, *fwd.cache));
            }
            single /= static_cast<double>(prompts.size());
            CHECK(std::abs(pair_kl - single) < 1e-6);

            // rescuing the dead stream recovers nothing; rescuing the live one recovers everything
            CHECK(std::abs(m(j, 2)) < 0.02);  // recovered 2 while j stays ablated
            CHECK(m(2, j) == doctest::Approx(1.0).epsilon(0.02));  // recovered j, dead 2 ablated
        }
    }
}

TEST_CASE("patch_heatmap: identical source and target prompts give an all-zero map") {
    Model model = tied_copy_model();
    auto pairs = build_str_pairs(3, 59);
    for (auto& p : pairs) p.source_tokens = p.target_tokens;  // degenerate pairs
    auto map = patch_heatmap(model, pairs, {0, 1}, {0, 1});
    CHECK(map.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("patch_heatmap: nonnegative and invariant to prompt-pair order") {
    Model model = tied_copy_model();
    auto pairs = build_str_pairs(6, 61);
    auto map = patch_heatmap(model, pairs, {0, 1}, {0, 1});
    CHECK(map.minCoeff() >= 0.0);

    auto shuffled = pairs;
    std::rotate(shuffled.begin(), shuffled.begin() + 3, shuffled.end());
    auto map2 = patch_heatmap(model, shuffled, {0, 1}, {0, 1});
    CHECK((map - map2).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("patch_heatmap: a counterfactual word leaves a real footprint") {
    Model model(base_config(2, 2, 67));
    auto pairs = build_str_pairs(4, 67);
    auto map = patch_heatmap(model, pairs, {0, 1}, {0, 1});
    CHECK(map.maxCoeff() > 1e-8);  // patching layer-0 residuals changes the distribution
}

TEST_CASE("rescue_asymmetry: tied copies are symmetric; the series is antisymmetric") {
    Model model = tied_copy_model();
    auto prompts = sentence_prompts(4, 71);
    auto stack = rescue_matrix(model, prompts, {0, 1});

    auto ab = rescue_asymmetry(stack, 0, 1);
    auto ba = rescue_asymmetry(stack, 1, 0);
    REQUIRE(ab.difference.size() == 2);
    for (std::size_t i = 0; i < ab.difference.size(); ++i) {
        CHECK(std::abs(ab.difference[i]) < 0.02);      // functional copies
        CHECK(ab.difference[i] == -ba.difference[i]);  // antisymmetry, exact
    }
    CHECK(ab.mean == -ba.mean);
}

TEST_CASE("rescue_asymmetry: undefined layers are skipped and reported") {
    RescueMatrixStack stack;
    stack.layers = {0, 1, 2};
    Eigen::MatrixXd good(2, 2);
    good << std::nan(""), 0.8, 0.6, std::nan("");
    Eigen::MatrixXd bad = Eigen::MatrixXd::Constant(2, 2, std::nan(""));
    stack.per_layer = {good, bad, good};
    stack.mean = good;

    auto series = rescue_asymmetry(stack, 0, 1);
    REQUIRE(series.difference.size() == 3);
    CHECK(series.difference[0] == doctest::Approx(0.8 - 0.6));
    CHECK(std::isnan(series.difference[1]));
    CHECK(series.skipped_layers == std::vector<int>{1});
    CHECK(series.mean == doctest::Approx(0.2));
    CHECK_THROWS_AS(rescue_asymmetry(stack, 1, 1), std::invalid_argument);
}

}  // TEST_SUITE
