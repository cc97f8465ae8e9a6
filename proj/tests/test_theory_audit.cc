#include <doctest.h>

#include <cmath>
#include <random>

#include "aent/theory_audit.h"
#include "oracles.h"

using namespace aent;

namespace {

TokenMdp bandit(std::vector<double> rewards) {
    const int n = static_cast<int>(rewards.size());
    return TokenMdp(n, 1, 1, [rewards](const TokenState&, int a) { return rewards[a]; });
}

double norm(const LogitGradient& g) {
    double s = 0.0;
    for (double x : g.values()) s += x * x;
    return std::sqrt(s);
}

LogitGradient as_gradient(const SoftmaxPolicy& like, const std::vector<double>& v) {
    auto g = LogitGradient::like(like);
    std::copy(v.begin(), v.end(), g.values().begin());
    return g;
}

}  // namespace

TEST_CASE("exact policy gradient on a two-action bandit") {
    const auto mdp = bandit({1.0, 0.0});
    const auto p = oracle::constant_policy(mdp, {0.0, 0.0});
    const auto g = exact_policy_gradient(mdp, p, 0.0);
    REQUIRE(g.values().size() == 2);
    CHECK(g.values()[0] == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(g.values()[1] == doctest::Approx(-0.25).epsilon(1e-14));
}

TEST_CASE("exact policy gradient needs every reachable row") {
    TokenMdp mdp(2, 2, 1, [](const TokenState&, int a) { return a * 0.5; });
    SoftmaxPolicy p(2);
    p.set_row(TokenState{0, {}}, std::vector<double>{0.0, 0.0});
    CHECK_THROWS_AS(exact_policy_gradient(mdp, p, 0.0), std::invalid_argument);
}

TEST_CASE("exact gradients match finite differences of brute-force objectives") {
    std::mt19937_64 rng(31);
    for (int i = 0; i < 25; ++i) {
        const auto mdp = random_token_mdp(RandomMdpSpec{2, 5, 1, 3, 1, 3, 4}, rng);
        const auto policy = random_policy(mdp, 1.0, rng);
        for (double lambda : {0.0, 0.1}) {
            const auto exact = exact_policy_gradient(mdp, policy, lambda);
            const auto fd = oracle::finite_differences(policy, [&](const SoftmaxPolicy& p) {
                return oracle::value(mdp, p) + lambda * oracle::entropy(mdp, p);
            });
            CHECK(oracle::max_rel_error(exact.values(), fd) <= 1e-5);
        }
        const auto eg = exact_entropy_and_grad(mdp, policy);
        const auto fd = oracle::finite_differences(policy, [&](const SoftmaxPolicy& p) { return oracle::entropy(mdp, p); });
        CHECK(oracle::max_rel_error(eg.gradient.values(), fd) <= 1e-5);
        CHECK(eg.entropy == doctest::Approx(oracle::entropy(mdp, policy)).epsilon(1e-12));
        CHECK(exact_entropy(mdp, policy) == doctest::Approx(oracle::entropy(mdp, policy)).epsilon(1e-12));
    }
}

TEST_CASE("exact entropy of uniform policies") {
    TokenMdp two(2, 2, 1, [](const TokenState&, int) { return 0.0; });
    CHECK(exact_entropy(two, oracle::constant_policy(two, {0.0, 0.0})) == doctest::Approx(std::log(4.0)).epsilon(1e-14));
    TokenMdp three(3, 2, 2, [](const TokenState&, int) { return 0.0; });
    CHECK(exact_entropy(three, oracle::constant_policy(three, {0.0, 0.0, 0.0})) ==
          doctest::Approx(2.0 * std::log(3.0)).epsilon(1e-14));
    const auto g = exact_entropy_and_grad(three, oracle::constant_policy(three, {0.0, 0.0, 0.0})).gradient;
    for (double x : g.values()) CHECK(std::abs(x) <= 1e-14);
}

TEST_CASE("gradient-entropy bound example and random instances") {
    const auto mdp = bandit({1.0, 0.0});
    const auto rep = check_prop1_gradient_entropy_bound(mdp, oracle::constant_policy(mdp, {0.0, 0.0}));
    CHECK(rep.grad_norm == doctest::Approx(std::sqrt(0.125)).epsilon(1e-14));
    CHECK(rep.inequalities.at(0).rhs == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-14));
    CHECK(rep.inequalities.at(0).pass(1e-9));

    std::mt19937_64 rng(32);
    for (int i = 0; i < 200; ++i) {
        const auto m = random_token_mdp(RandomMdpSpec{}, rng);
        const auto p = random_policy(m, 3.0, rng);
        const auto r = check_prop1_gradient_entropy_bound(m, p);
        CHECK(r.inequalities.at(0).slack() >= -1e-9);
        CHECK(r.grad_norm == doctest::Approx(norm(exact_policy_gradient(m, p, 0.0))));
    }
}

TEST_CASE("suboptimality bound example") {
    const auto mdp = bandit({1.0, 0.0});
    const auto rep = check_prop1_suboptimality(mdp, oracle::constant_policy(mdp, {0.0, 0.0}), 0);
    CHECK(rep.suboptimality == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(rep.c_factor == doctest::Approx(0.5).epsilon(1e-14));
    const auto& e = rep.inequalities.at(0);
    CHECK(e.rhs == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));
    CHECK_FALSE(e.vacuous);
    CHECK(e.pass(1e-7));
}

TEST_CASE("suboptimality bound is vacuous when the optimal sequence has zero probability") {
    const auto mdp = bandit({1.0, 0.0});
    SoftmaxPolicy p(2);
    p.set_row(TokenState{0, {}}, std::vector<double>{-1e4, 0.0});
    const auto e = check_prop1_suboptimality(mdp, p, 0).inequalities.at(0);
    CHECK(e.vacuous);
    CHECK(e.pass(0.0));
}

TEST_CASE("optimal response sets") {
    SyntheticTaskSpec spec;
    spec.action_count = 2000;
    spec.n_suboptimal = 50;
    const auto task = build_synthetic_task(spec, 5);
    const auto opt = optimal_response_set(task.mdp, 0);
    CHECK(opt.sequences.size() == 5);
    CHECK(opt.value == 1.0);

    TokenMdp flat(3, 2, 1, [](const TokenState&, int) { return 0.5; });
    const auto all = optimal_response_set(flat, 0);
    CHECK(all.sequences.size() == 9);
    CHECK(all.value == doctest::Approx(1.0));

    // Reward 1 only for the sequence (1, 0).
    TokenMdp one(2, 2, 1, [](const TokenState& s, int a) {
        return (s.prefix.size() == 1 && s.prefix[0] == 1 && a == 0) ? 1.0 : 0.0;
    });
    const auto single = optimal_response_set(one, 0);
    REQUIRE(single.sequences.size() == 1);
    CHECK(single.sequences[0] == std::vector<int>{1, 0});
}

TEST_CASE("soft-optimal policy") {
    const auto mdp = bandit({1.0, 0.0});
    const auto soft = soft_optimal_policy(mdp, 1.0);
    CHECK(soft.tables.queries[0].v_reg[0] == doctest::Approx(std::log(std::exp(1.0) + 1.0)).epsilon(1e-12));
    const auto pr = probs(soft.policy, TokenState{0, {}});
    CHECK(pr[0] == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)).epsilon(1e-12));

    const auto wide = probs(soft_optimal_policy(mdp, 1e6).policy, TokenState{0, {}});
    CHECK(std::abs(wide[0] - 0.5) <= 1e-6);
    const auto sharp = probs(soft_optimal_policy(mdp, 1e-3).policy, TokenState{0, {}});
    CHECK(sharp[0] >= 1.0 - 1e-12);
    CHECK_THROWS_AS(soft_optimal_policy(mdp, 0.0), std::invalid_argument);

    // Stationary point of V + lambda H: the exact regularized gradient vanishes,
    // and its value beats random policies.
    std::mt19937_64 rng(33);
    for (int i = 0; i < 10; ++i) {
        const auto m = random_token_mdp(RandomMdpSpec{}, rng);
        const auto s = soft_optimal_policy(m, 0.3);
        CHECK(norm(exact_policy_gradient(m, s.policy, 0.3)) <= 1e-10);
        const double best = regularized_objective(m, s.policy, 0.3);
        for (int j = 0; j < 5; ++j) CHECK(regularized_objective(m, random_policy(m, 1.0, rng), 0.3) <= best + 1e-12);
    }
}

TEST_CASE("entropy bias term and regularized bound") {
    SyntheticTaskSpec spec;
    spec.action_count = 10;
    spec.n_optimal = 2;
    spec.n_suboptimal = 0;
    const auto task = build_synthetic_task(spec, 3);
    const auto rep = check_prop2_bound(task.mdp, task.policy, 0, 0.1);
    CHECK(rep.optimal_set_size == 2);
    CHECK(rep.bias_term == doctest::Approx(0.1 * std::log(5.0)).epsilon(1e-12));
    CHECK(rep.inequalities.at(0).pass(1e-7));
    CHECK(rep.c_d == doctest::Approx(1.0));
    CHECK_THROWS_AS(check_prop2_bound(task.mdp, task.policy, 0, 0.0), std::invalid_argument);
}

TEST_CASE("regularized bound holds on random instances") {
    std::mt19937_64 rng(34);
    for (int i = 0; i < 40; ++i) {
        const auto m = random_token_mdp(RandomMdpSpec{}, rng);
        const auto p = random_policy(m, 1.0, rng);
        for (int q = 0; q < m.query_count(); ++q) {
            CHECK(check_prop2_bound(m, p, q, 0.1).inequalities.at(0).pass(1e-7));
            CHECK(check_prop1_suboptimality(m, p, q).inequalities.at(0).pass(1e-7));
        }
    }
}

TEST_CASE("performance difference identity") {
    std::mt19937_64 rng(35);
    for (int i = 0; i < 50; ++i) {
        const auto m = random_token_mdp(RandomMdpSpec{}, rng);
        const auto a = random_policy(m, 1.5, rng);
        const auto b = random_policy(m, 1.5, rng);
        for (int q = 0; q < m.query_count(); ++q) {
            const auto pd = check_performance_difference(m, a, b, q);
            CHECK(pd.pass);
            CHECK(pd.lhs == doctest::Approx(oracle::value(m, a, q) - oracle::value(m, b, q)).epsilon(1e-10));
        }
    }
}

TEST_CASE("regularized advantages have zero mean under the policy") {
    std::mt19937_64 rng(36);
    for (int i = 0; i < 50; ++i) {
        const auto m = random_token_mdp(RandomMdpSpec{}, rng);
        const auto p = random_policy(m, 2.0, rng);
        CHECK(max_advantage_mean(ValueTables::compute(m, p, 0.0)) <= 1e-10);
        CHECK(max_advantage_mean(ValueTables::compute(m, p, 0.2)) <= 1e-10);
    }
}

TEST_CASE("value tables agree with brute force") {
    std::mt19937_64 rng(37);
    for (int i = 0; i < 20; ++i) {
        const auto m = random_token_mdp(RandomMdpSpec{}, rng);
        const auto p = random_policy(m, 1.0, rng);
        const auto t = ValueTables::compute(m, p, 0.25);
        CHECK(t.value() == doctest::Approx(oracle::value(m, p)).epsilon(1e-12));
        CHECK(t.entropy() == doctest::Approx(oracle::entropy(m, p)).epsilon(1e-12));
        CHECK(t.reg_value() == doctest::Approx(oracle::value(m, p) + 0.25 * oracle::entropy(m, p)).epsilon(1e-12));
    }
}

TEST_CASE("relative error helper") {
    SoftmaxPolicy p(2);
    p.set_row(TokenState{0, {}}, std::vector<double>{0.0, 0.0});
    const auto a = as_gradient(p, {1.0, 0.0});
    const auto b = as_gradient(p, {1.1, 1e-6});
    CHECK(max_relative_error(a, b) == doctest::Approx(0.1 / 1.1));
    CHECK(max_relative_error(as_gradient(p, {0.0, 0.0}), as_gradient(p, {0.0, 1e-9})) == doctest::Approx(1e-5));
}

TEST_CASE("exact gradient ascent increases the regularized objective") {
    std::mt19937_64 rng(38);
    for (int i = 0; i < 5; ++i) {
        const auto m = random_token_mdp(RandomMdpSpec{}, rng);
        const auto p = random_policy(m, 1.0, rng);
        const auto q = exact_gradient_ascent(m, p, 0.1, 100, 1.0);
        CHECK(regularized_objective(m, q, 0.1) > regularized_objective(m, p, 0.1));
        CHECK(norm(exact_policy_gradient(m, q, 0.1)) < norm(exact_policy_gradient(m, p, 0.1)));
    }
}

TEST_CASE("audit instance emits every check and passes") {
    AuditOptions options;
    for (std::uint64_t id = 0; id < 10; ++id) {
        auto rng = make_stream(99, id);
        const auto rows = audit_instance(id, rng, options);
        CHECK(rows.size() == kAuditChecksPerInstance);
        for (const auto& r : rows) {
            CHECK(r.instance_id == id);
            CHECK_MESSAGE(r.pass, r.inequality_name << " lhs=" << r.lhs << " rhs=" << r.rhs);
        }
    }
}

TEST_CASE("a corrupted gradient fails the finite-difference checks") {
    AuditOptions options;
    options.gradient_corruption = 1.01;
    auto rng = make_stream(99, 0);
    const auto rows = audit_instance(0, rng, options);
    int failed = 0;
    for (const auto& r : rows) {
        if (!r.pass) {
            ++failed;
            CHECK(r.inequality_name.find("gradient_fd") != std::string::npos);
        }
    }
    CHECK(failed == 3);  // both policy-gradient checks and the entropy gradient
}
