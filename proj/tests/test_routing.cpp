#include <doctest.h>

#include <cmath>

#include "mhc/model.hpp"
#include "mhc/routing.hpp"
#include "oracles.hpp"

using namespace mhc;

namespace {

Tensor<float> random_positive(int n, SplitMix64& rng) {
    Tensor<float> t({n, n});
    // mixed scales: uniform and log-normal entries
    for (std::int64_t i = 0; i < t.size(); ++i)
        t[i] = (i % 2 == 0) ? 0.05f + 9.95f * rng.next_float()
                            : static_cast<float>(std::exp(2.0 * rng.next_normal()));
    return t;
}

}  // namespace

TEST_SUITE("routing") {

TEST_CASE("sinkhorn: an already doubly stochastic matrix is a fixed point") {
    // 0.7 on the diagonal, 0.1 elsewhere: rows and columns sum to 1
    Tensor<float> m = Tensor<float>::full({4, 4}, 0.1f);
    for (int i = 0; i < 4; ++i) m(i, i) = 0.7f;
    auto res = sinkhorn_project(m, 20, 1e-6);
    CHECK(res.converged);
    for (std::int64_t i = 0; i < m.size(); ++i) CHECK(std::abs(res.matrix[i] - m[i]) < 1e-7);
}

TEST_CASE("sinkhorn: all-ones 4x4 becomes uniform 0.25") {
    auto res = sinkhorn_project(Tensor<float>::full({4, 4}, 1.0f), 20, 1e-6);
    for (std::int64_t i = 0; i < 16; ++i) CHECK(res.matrix[i] == doctest::Approx(0.25).epsilon(1e-7));
}

TEST_CASE("sinkhorn: [[1,2],[3,4]] matches the 1000-iteration reference") {
    // Frozen from the long-iteration oracle: the 2x2 limit preserves the
    // cross ratio, a/(1-a) = sqrt(2/3)  =>  a = 0.4494897...
    const double expect_diag = 0.44948974;
    Tensor<float> m({2, 2}, {1, 2, 3, 4});
    auto res = sinkhorn_project(m, 200, 1e-9);
    CHECK(std::abs(res.matrix(0, 0) - expect_diag) < 1e-6);
    CHECK(std::abs(res.matrix(1, 1) - expect_diag) < 1e-6);
    CHECK(std::abs(res.matrix(0, 1) - (1.0 - expect_diag)) < 1e-6);

    auto ref = oracles::sinkhorn_reference({{1, 2}, {3, 4}}, 1000);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) CHECK(std::abs(res.matrix(i, j) - ref[i][j]) < 1e-6);
}

TEST_CASE("sinkhorn: rejects nonpositive entries") {
    Tensor<float> m({2, 2}, {1, 0, 3, 4});
    CHECK_THROWS_AS(sinkhorn_project(m, 10, 1e-6), std::domain_error);
    Tensor<float> neg({2, 2}, {1, -2, 3, 4});
    CHECK_THROWS_AS(sinkhorn_project(neg, 10, 1e-6), std::domain_error);
}

TEST_CASE("sinkhorn: converges within 200 sweeps and is idempotent (random positive input)") {
    SplitMix64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        auto res = sinkhorn_project(random_positive(4, rng), 200, 1e-6);
        CHECK(res.converged);
        CHECK(res.max_deviation <= 1e-4);
        for (std::int64_t i = 0; i < 16; ++i) {
            CHECK(res.matrix[i] > 0.0f);
            CHECK(res.matrix[i] <= 1.0f + 1e-6f);
        }
        auto again = sinkhorn_project(res.matrix, 200, 1e-6);
        for (std::int64_t i = 0; i < 16; ++i) CHECK(std::abs(again.matrix[i] - res.matrix[i]) <= 1e-6);
    }
}

TEST_CASE("realize: zero logits give the uniform mix") {
    RoutingParams params{Tensor<float>::zeros({4, 4}), Tensor<float>::full({4}, 0.25f),
                         Tensor<float>::full({4}, 1.0f)};
    auto realized = realize(params);
    for (std::int64_t i = 0; i < 16; ++i) CHECK(realized.mix[i] == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(realized.pool[0] == 0.25f);
    CHECK(realized.broadcast[3] == 1.0f);
}

TEST_CASE("realize: strong diagonal logits give a near-identity mix") {
    Tensor<float> logits = Tensor<float>::zeros({4, 4});
    for (int i = 0; i < 4; ++i) logits(i, i) = 10.0f;
    RoutingParams params{logits, Tensor<float>::full({4}, 0.25f), Tensor<float>::full({4}, 1.0f)};
    auto realized = realize(params);

    // cross-check against the long-iteration oracle on the same input
    oracles::dmat in(4, oracles::dvec(4));
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) in[i][j] = std::exp(static_cast<double>(logits(i, j)));
    auto ref = oracles::sinkhorn_reference(in, 1000);
    for (int i = 0; i < 4; ++i) {
        CHECK(realized.mix(i, i) > 0.99f);
        CHECK(ref[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] > 0.99);
    }
}

TEST_CASE("realize: n=1 gives the only 1x1 doubly stochastic matrix") {
    RoutingParams params{Tensor<float>({1, 1}, {-3.7f}), Tensor<float>({1}, {1.0f}),
                         Tensor<float>({1}, {1.0f})};
    auto realized = realize(params);
    CHECK(realized.mix.size() == 1);
    CHECK(realized.mix[0] == 1.0f);
}

TEST_CASE("realize: permutation equivariance of the projection") {
    SplitMix64 rng(17);
    // P: cyclic shift of 4 elements
    const int perm[4] = {2, 0, 3, 1};
    for (int trial = 0; trial < 10; ++trial) {
        Tensor<float> logits({4, 4});
        for (std::int64_t i = 0; i < 16; ++i) logits[i] = 2.0f * rng.next_float() - 1.0f;
        Tensor<float> permuted({4, 4});
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) permuted(perm[i], perm[j]) = logits(i, j);

        RoutingParams a{logits, Tensor<float>::full({4}, 1.0f), Tensor<float>::full({4}, 1.0f)};
        RoutingParams b{permuted, Tensor<float>::full({4}, 1.0f), Tensor<float>::full({4}, 1.0f)};
        auto ra = realize(a), rb = realize(b);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) CHECK(std::abs(rb.mix(perm[i], perm[j]) - ra.mix(i, j)) < 1e-6);
    }
}

TEST_CASE("realize: differentiable through the unrolled projection") {
    SplitMix64 rng(23);
    Tensor<double> logits({3, 3});
    for (std::int64_t i = 0; i < 9; ++i) logits[i] = rng.next_normal();
    Tensor<double> w({3, 3});
    for (std::int64_t i = 0; i < 9; ++i) w[i] = rng.next_normal();
    const double err = oracles::grad_check_max_rel_error(
        {logits, w}, [](Graph<double>&, std::vector<Node<double>>& in) {
            Node<double> mix = sinkhorn_project(exp_elem(in[0]), 20, 1e-9);
            return sum_all(mul(mix, in[1]));
        });
    CHECK(err < 1e-3);
}

TEST_CASE("routing_stats: identity mix has Frobenius norm 2") {
    RealizedRouting r{Tensor<float>::identity(4), Tensor<float>::full({4}, 0.25f),
                      Tensor<float>::full({4}, 1.0f)};
    auto stats = routing_stats(std::vector<RealizedRouting>{r});
    CHECK(stats.size() == 1);
    CHECK(stats[0].mix_frobenius == doctest::Approx(2.0));
    CHECK(stats[0].broadcast_variance == doctest::Approx(0.0));  // constant vector
}

TEST_CASE("routing_stats: fresh-init layers share one realized mix profile") {
    // every layer starts from the same near-identity logits, so the realized
    // statistics are constant across depth
    ModelConfig cfg;
    cfg.layers = 3;
    cfg.streams = 4;
    cfg.model_dim = 16;
    cfg.heads = 2;
    cfg.head_dim = 8;
    cfg.vocab = 64;
    cfg.context = 16;
    cfg.seed = 77;
    ModelT<float> model(cfg);
    auto stats = routing_stats(model.realized_static_routing());
    REQUIRE(stats.size() == 3);
    for (const auto& s : stats) {
        CHECK(s.mix_frobenius == stats[0].mix_frobenius);
        CHECK(s.pool_frobenius == stats[0].pool_frobenius);
        CHECK(s.broadcast_frobenius == stats[0].broadcast_frobenius);
    }
}

TEST_CASE("routing_stats: random stack matches a scalar-loop oracle") {
    SplitMix64 rng(29);
    std::vector<RealizedRouting> stack;
    for (int l = 0; l < 3; ++l) {
        RealizedRouting r;
        r.mix = Tensor<float>({4, 4});
        r.pool = Tensor<float>({4});
        r.broadcast = Tensor<float>({4});
        for (std::int64_t i = 0; i < 16; ++i) r.mix[i] = static_cast<float>(rng.next_normal());
        for (std::int64_t i = 0; i < 4; ++i) {
            r.pool[i] = static_cast<float>(rng.next_normal());
            r.broadcast[i] = static_cast<float>(rng.next_normal());
        }
        stack.push_back(r);
    }
    auto stats = routing_stats(stack);
    auto loop_frob = [](const Tensor<float>& t) {
        double s = 0;
        for (std::int64_t i = 0; i < t.size(); ++i) s += double(t[i]) * double(t[i]);
        return std::sqrt(s);
    };
    auto loop_var = [](const Tensor<float>& t) {
        double m = 0;
        for (std::int64_t i = 0; i < t.size(); ++i) m += t[i];
        m /= double(t.size());
        double v = 0;
        for (std::int64_t i = 0; i < t.size(); ++i) v += (t[i] - m) * (t[i] - m);
        return v / double(t.size());
    };
    for (std::size_t l = 0; l < stack.size(); ++l) {
        CHECK(std::abs(stats[l].mix_frobenius - loop_frob(stack[l].mix)) < 1e-6);
        CHECK(std::abs(stats[l].pool_frobenius - loop_frob(stack[l].pool)) < 1e-6);
        CHECK(std::abs(stats[l].broadcast_frobenius - loop_frob(stack[l].broadcast)) < 1e-6);
        CHECK(std::abs(stats[l].mix_variance - loop_var(stack[l].mix)) < 1e-6);
        CHECK(std::abs(stats[l].pool_variance - loop_var(stack[l].pool)) < 1e-6);
        CHECK(std::abs(stats[l].broadcast_variance - loop_var(stack[l].broadcast)) < 1e-6);
    }
}

}  // TEST_SUITE
