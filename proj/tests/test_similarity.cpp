#include <doctest.h>

#include <Eigen/QR>
#include <cmath>

#include "mhc/cka.hpp"
#include "mhc/corpus.hpp"
#include "mhc/rng.hpp"

using namespace mhc;

namespace {

Eigen::MatrixXd gaussian(int rows, int cols, std::uint64_t seed) {
    SplitMix64 rng(seed);
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = rng.next_normal();
    return m;
}

Eigen::MatrixXd random_orthogonal(int n, std::uint64_t seed) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(n, n, seed));
    return qr.householderQ();
}

Model toy_model() {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.streams = 3;
    cfg.model_dim = 16;
    cfg.heads = 2;
    cfg.head_dim = 8;
    cfg.vocab = 256;
    cfg.context = 24;
    cfg.seed = 77;
    Model model(cfg);
    // scramble routing so streams diverge across depth
    SplitMix64 rng(5);
    for (int l = 0; l < cfg.layers; ++l) {
        auto& lw = model.layer(l);
        for (std::int64_t i = 0; i < lw.mix_logits.value.size(); ++i)
            lw.mix_logits.value[i] = static_cast<float>(rng.next_normal());
        for (std::int64_t i = 0; i < 3; ++i)
            lw.broadcast_weights.value[i] = static_cast<float>(1.0 + 0.5 * rng.next_normal());
    }
    return model;
}

FeatureSet toy_features(Model& model, int n_samples, std::uint64_t seed) {
    auto text = generate_synthetic_text(300, 9);
    auto tokens = text_to_tokens(text);
    return collect_feature_samples(model, tokens, n_samples, seed);
}

}  // namespace

TEST_SUITE("similarity") {

TEST_CASE("center_columns: idempotent, kills constants, zero column means") {
    Eigen::MatrixXd x = gaussian(40, 6, 1);
    Eigen::MatrixXd c = center_columns(x);
    Eigen::MatrixXd c2 = center_columns(c);
    CHECK((c - c2).cwiseAbs().maxCoeff() < 1e-7);
    CHECK(c.colwise().mean().cwiseAbs().maxCoeff() < 1e-6);

    Eigen::MatrixXd constant = Eigen::MatrixXd::Constant(10, 3, 4.2);
    CHECK(center_columns(constant).cwiseAbs().maxCoeff() == 0.0);

    Eigen::MatrixXd one_row(1, 3);
    CHECK_THROWS_AS(center_columns(one_row), std::invalid_argument);
}

TEST_CASE("linear_cka: self similarity is one") {
    Eigen::MatrixXd x = gaussian(64, 8, 2);
    CHECK(std::abs(linear_cka(x, x) - 1.0) < 1e-6);
}

TEST_CASE("linear_cka: invariant to orthogonal maps and isotropic scaling") {
    Eigen::MatrixXd x = gaussian(128, 12, 3);
    Eigen::MatrixXd q = random_orthogonal(12, 4);
    Eigen::MatrixXd y = 3.7 * x * q;
    CHECK(std::abs(linear_cka(x, y) - linear_cka(x, x)) < 1e-5);
    Eigen::MatrixXd z = -0.2 * x * q;
    CHECK(std::abs(linear_cka(x, z) - 1.0) < 1e-5);
}

TEST_CASE("linear_cka: independent Gaussians sit below the 0.1 null level") {
    // Monte-Carlo oracle for the null level at N=1024, d=32
    double max_null = 0.0;
    for (int trial = 0; trial < 8; ++trial) {
        Eigen::MatrixXd x = gaussian(1024, 32, 100 + static_cast<std::uint64_t>(trial) * 2);
        Eigen::MatrixXd y = gaussian(1024, 32, 101 + static_cast<std::uint64_t>(trial) * 2);
        max_null = std::max(max_null, linear_cka(x, y));
    }
    CHECK(max_null < 0.1);
}

TEST_CASE("linear_cka: zero-variance input is an explicit error, not zero") {
    Eigen::MatrixXd x = gaussian(32, 4, 5);
    Eigen::MatrixXd flat = Eigen::MatrixXd::Constant(32, 4, 1.0);
    CHECK_THROWS_AS(linear_cka(x, flat), undefined_similarity_error);
    CHECK_THROWS_AS(linear_cka(flat, x), undefined_similarity_error);
}

TEST_CASE("stream_cka: layer 0 is all ones (expansion replicates streams)") {
    Model model = toy_model();
    FeatureSet set = toy_features(model, 96, 11);
    Eigen::MatrixXd m = stream_cka(set, 0);
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) CHECK(std::abs(m(i, j) - 1.0) < 1e-6);
}

TEST_CASE("stream_cka: symmetric with unit diagonal, entries in [0, 1]") {
    Model model = toy_model();
    FeatureSet set = toy_features(model, 96, 13);
    for (int l = 0; l <= set.layers; ++l) {
        Eigen::MatrixXd m = stream_cka(set, l);
        for (int i = 0; i < m.rows(); ++i) {
            CHECK(std::abs(m(i, i) - 1.0) < 1e-6);
            for (int j = 0; j < m.cols(); ++j) {
                CHECK(m(i, j) == m(j, i));  // computed once per pair
                CHECK(m(i, j) >= 0.0);
                CHECK(m(i, j) <= 1.0 + 1e-6);
            }
        }
    }
}

TEST_CASE("stream_cka: matches an independent two-pass recomputation") {
    Model model = toy_model();
    FeatureSet set = toy_features(model, 80, 17);
    const int layer = 2;
    Eigen::MatrixXd m = stream_cka(set, layer);
    for (int i = 0; i < set.streams; ++i) {
        for (int j = 0; j < set.streams; ++j) {
            // recompute from scratch with explicit loops over doubles
            const auto& fx = set.per_layer[layer][static_cast<std::size_t>(i)].features;
            const auto& fy = set.per_layer[layer][static_cast<std::size_t>(j)].features;
            const int n = set.samples, d = set.dim;
            std::vector<std::vector<double>> xc(n, std::vector<double>(d)), yc = xc;
            for (int c = 0; c < d; ++c) {
                double mx = 0, my = 0;
                for (int r = 0; r < n; ++r) {
                    mx += fx(r, c);
                    my += fy(r, c);
                }
                mx /= n;
                my /= n;
                for (int r = 0; r < n; ++r) {
                    xc[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] = fx(r, c) - mx;
                    yc[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] = fy(r, c) - my;
                }
            }
            auto gram_frob2 = [n, d](const auto& a, const auto& b) {
                double total = 0;
                for (int p = 0; p < d; ++p)
                    for (int q = 0; q < d; ++q) {
                        double dot = 0;
                        for (int r = 0; r < n; ++r)
                            dot += a[static_cast<std::size_t>(r)][static_cast<std::size_t>(p)] *
                                   b[static_cast<std::size_t>(r)][static_cast<std::size_t>(q)];
                        total += dot * dot;
                    }
                return total;
            };
            const double expect = gram_frob2(yc, xc) / (std::sqrt(gram_frob2(xc, xc)) * std::sqrt(gram_frob2(yc, yc)));
            CHECK(std::abs(m(i, j) - expect) < 1e-6);
        }
    }
}

TEST_CASE("interlayer_cka: unit diagonal, symmetric, adjacent layers beat the null") {
    Model model = toy_model();
    FeatureSet set = toy_features(model, 128, 19);
    Eigen::MatrixXd m = interlayer_cka(set);
    REQUIRE(m.rows() == set.layers + 1);
    double null_level = 0.0;
    for (int trial = 0; trial < 4; ++trial) {
        Eigen::MatrixXd x = gaussian(set.samples, set.streams * set.dim, 500 + static_cast<std::uint64_t>(trial));
        Eigen::MatrixXd y = gaussian(set.samples, set.streams * set.dim, 900 + static_cast<std::uint64_t>(trial));
        null_level = std::max(null_level, linear_cka(x, y));
    }
    for (int i = 0; i < m.rows(); ++i) {
        CHECK(std::abs(m(i, i) - 1.0) < 1e-6);
        for (int j = 0; j < m.cols(); ++j) {
            CHECK(m(i, j) == m(j, i));
            CHECK(m(i, j) >= 0.0);
            CHECK(m(i, j) <= 1.0 + 1e-6);
        }
    }
    for (int l = 0; l < set.layers; ++l) CHECK(m(l, l + 1) > null_level);
}

TEST_CASE("feature sampling: deterministic given the seed") {
    Model model = toy_model();
    FeatureSet a = toy_features(model, 64, 23);
    FeatureSet b = toy_features(model, 64, 23);
    FeatureSet c = toy_features(model, 64, 24);
    CHECK(a.samples == b.samples);
    bool identical = true, differs_c = false;
    for (int l = 0; l <= a.layers; ++l)
        for (int s = 0; s < a.streams; ++s) {
            identical = identical && a.per_layer[static_cast<std::size_t>(l)][static_cast<std::size_t>(s)]
                                         .features.isApprox(b.per_layer[static_cast<std::size_t>(l)]
                                                                [static_cast<std::size_t>(s)].features, 0.0);
            differs_c = differs_c || !a.per_layer[static_cast<std::size_t>(l)][static_cast<std::size_t>(s)]
                                          .features.isApprox(c.per_layer[static_cast<std::size_t>(l)]
                                                                 [static_cast<std::size_t>(s)].features, 0.0);
        }
    CHECK(identical);
    CHECK(differs_c);

    // identical reports follow
    auto ra = cka_report(a), rb = cka_report(b);
    for (std::size_t l = 0; l < ra.within_layer.size(); ++l)
        CHECK(ra.within_layer[l].isApprox(rb.within_layer[l], 0.0));
    CHECK(ra.inter_layer.isApprox(rb.inter_layer, 0.0));
}

TEST_CASE("feature sampling: clamps oversized requests and warns on small N") {
    Model model = toy_model();
    auto tokens = text_to_tokens("only twelve b");  // universe smaller than model_dim
    FeatureSet set = collect_feature_samples(model, tokens, 1 << 20, 31);
    CHECK(set.samples == static_cast<int>(tokens.size()));
    bool clamped = false, small = false;
    for (const auto& w : set.warnings) {
        clamped = clamped || w.find("clamped") != std::string::npos;
        small = small || w.find("below feature dimension") != std::string::npos;
    }
    CHECK(clamped);
    CHECK(small);
}

}  // TEST_SUITE
