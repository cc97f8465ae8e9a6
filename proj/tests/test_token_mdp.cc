#include <doctest.h>

#include <cmath>
#include <set>

#include "aent/token_mdp.h"
#include "oracles.h"

using namespace aent;

namespace {

TokenMdp bandit(std::vector<double> rewards) {
    const int n = static_cast<int>(rewards.size());
    return TokenMdp(n, 1, 1, [rewards](const TokenState&, int a) { return rewards[a]; });
}

}  // namespace

TEST_CASE("synthetic task has the requested reward histogram") {
    SyntheticTaskSpec spec;
    spec.n_optimal = 5;
    const auto task = build_synthetic_task(spec, 7);
    int ones = 0, fifths = 0, zeros = 0;
    for (double r : task.action_rewards) {
        if (r == 1.0) ++ones;
        else if (r == 0.2) ++fifths;
        else if (r == 0.0) ++zeros;
    }
    CHECK(ones == 5);
    CHECK(fifths == 500);
    CHECK(zeros == 99495);
    CHECK(task.mdp.horizon() == 1);
    CHECK(task.mdp.action_count() == 100000);
    for (int a : task.optimal_actions) CHECK(task.mdp.reward(task.mdp.root(0), a) == 1.0);

    std::set<int> opt(task.optimal_actions.begin(), task.optimal_actions.end());
    for (int a : task.suboptimal_actions) CHECK_FALSE(opt.contains(a));
}

TEST_CASE("synthetic task degenerate small case") {
    SyntheticTaskSpec spec;
    spec.action_count = 3;
    spec.n_optimal = 1;
    spec.n_suboptimal = 0;
    const auto task = build_synthetic_task(spec, 1);
    std::multiset<double> r(task.action_rewards.begin(), task.action_rewards.end());
    CHECK(r.count(1.0) == 1);
    CHECK(r.count(0.0) == 2);
}

TEST_CASE("synthetic task is deterministic per seed") {
    SyntheticTaskSpec spec;
    spec.action_count = 5000;
    spec.n_suboptimal = 100;
    const auto a = build_synthetic_task(spec, 42);
    const auto b = build_synthetic_task(spec, 42);
    const auto c = build_synthetic_task(spec, 43);
    CHECK(a.action_rewards == b.action_rewards);
    const auto ra = oracle::row_of(a.policy, a.mdp.root(0));
    const auto rb = oracle::row_of(b.policy, b.mdp.root(0));
    CHECK(ra == rb);
    CHECK(ra != oracle::row_of(c.policy, c.mdp.root(0)));
}

TEST_CASE("synthetic task elevates optimal and rewarded actions") {
    SyntheticTaskSpec spec;
    spec.action_count = 20000;
    spec.n_optimal = 15;
    const auto task = build_synthetic_task(spec, 3);
    const auto row = oracle::row_of(task.policy, task.mdp.root(0));
    double elevated = 0.0, rest = 0.0;
    std::set<int> rewarded(task.optimal_actions.begin(), task.optimal_actions.end());
    rewarded.insert(task.suboptimal_actions.begin(), task.suboptimal_actions.end());
    for (int a = 0; a < spec.action_count; ++a) (rewarded.contains(a) ? elevated : rest) += row[a];
    elevated /= rewarded.size();
    rest /= spec.action_count - rewarded.size();
    // 515 draws of N(1, 1): standard error about 0.044.
    CHECK(elevated == doctest::Approx(1.0).epsilon(0.2));
    CHECK(std::abs(rest) < 0.05);
}

TEST_CASE("independent elevated set keeps its size") {
    SyntheticTaskSpec spec;
    spec.action_count = 2000;
    spec.n_optimal = 5;
    spec.n_suboptimal = 50;
    spec.elevated = ElevatedSet::independent;
    spec.init_stddev = 0.0;
    spec.elevated_init_mean = 3.0;
    const auto task = build_synthetic_task(spec, 9);
    const auto row = oracle::row_of(task.policy, task.mdp.root(0));
    int high = 0;
    for (double x : row) high += x == 3.0;
    CHECK(high == 55);
    for (int a : task.optimal_actions) CHECK(row[a] == 3.0);
}

TEST_CASE("synthetic task rejects overfull sets") {
    SyntheticTaskSpec spec;
    spec.action_count = 10;
    spec.n_optimal = 6;
    spec.n_suboptimal = 5;
    CHECK_THROWS_AS(build_synthetic_task(spec, 0), std::invalid_argument);
}

TEST_CASE("rewards outside [0,1] are rejected") {
    CHECK_THROWS_AS(bandit({0.5, 1.5}), std::domain_error);
    CHECK_THROWS_AS(bandit({-0.1, 0.0}), std::domain_error);
    CHECK_THROWS_AS(TokenMdp(2, 1, 0, [](const TokenState&, int) { return 0.0; }), std::invalid_argument);
}

TEST_CASE("exact_value examples") {
    const auto coin = bandit({1.0, 0.0});
    SoftmaxPolicy uniform(2, [](const TokenState&, std::span<double> r) { std::fill(r.begin(), r.end(), 0.0); });
    CHECK(exact_value(coin, uniform, 0) == doctest::Approx(0.5).epsilon(1e-15));

    TokenMdp two_step(2, 2, 1, [](const TokenState&, int a) { return a == 0 ? 1.0 : 0.0; });
    const auto p = oracle::constant_policy(two_step, {std::log(0.8), std::log(0.2)});
    CHECK(exact_value(two_step, p, 0) == doctest::Approx(1.6).epsilon(1e-14));
    CHECK(exact_value(two_step, p, 0) == doctest::Approx(oracle::value(two_step, p, 0)).epsilon(1e-14));

    TokenMdp zero(3, 2, 2, [](const TokenState&, int) { return 0.0; });
    std::mt19937_64 rng(5);
    CHECK(exact_value(zero, random_policy(zero, 2.0, rng)) == 0.0);
}

TEST_CASE("exact_value matches sequence enumeration on random instances") {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 30; ++i) {
        const auto mdp = random_token_mdp(RandomMdpSpec{}, rng);
        const auto policy = random_policy(mdp, 1.5, rng);
        for (int q = 0; q < mdp.query_count(); ++q) {
            CHECK(exact_value(mdp, policy, q) == doctest::Approx(oracle::value(mdp, policy, q)).epsilon(1e-12));
        }
    }
}

TEST_CASE("exact oracles refuse large instances") {
    TokenMdp big(1000, 3, 1, [](const TokenState&, int) { return 0.0; });
    SoftmaxPolicy p(1000);
    CHECK_FALSE(big.enumerable());
    CHECK_THROWS_AS(exact_value(big, p, 0), EnumerationLimitError);
    CHECK_THROWS_AS(exact_state_distribution(big, p, 0), EnumerationLimitError);
}

TEST_CASE("state distribution") {
    TokenMdp two_step(2, 2, 1, [](const TokenState&, int a) { return a == 0 ? 1.0 : 0.0; });
    const auto p = oracle::constant_policy(two_step, {std::log(0.8), std::log(0.2)});
    const auto dist = exact_state_distribution(two_step, p, 0);
    REQUIRE(dist.size() == 2);
    CHECK(dist[0].at(TokenState{0, {}}) == 1.0);
    CHECK(dist[1].at(TokenState{0, {0}}) == doctest::Approx(0.8).epsilon(1e-14));

    std::mt19937_64 rng(2);
    for (int i = 0; i < 20; ++i) {
        const auto mdp = random_token_mdp(RandomMdpSpec{}, rng);
        const auto policy = random_policy(mdp, 2.0, rng);
        const auto d = exact_state_distribution(mdp, policy, 0);
        for (std::size_t t = 0; t < d.size(); ++t) {
            double s = 0.0;
            for (const auto& [state, prob] : d[t]) {
                s += prob;
                CHECK(state.prefix.size() == t);  // concatenation: step t states have t actions
            }
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("rollout of a point-mass policy") {
    const auto mdp = bandit({0.0, 1.0, 0.0});
    SoftmaxPolicy p(3, [](const TokenState&, std::span<double> r) {
        r[0] = -1e4;
        r[1] = 0.0;
        r[2] = -1e4;
    });
    std::mt19937_64 rng(1);
    for (int i = 0; i < 100; ++i) {
        const auto tr = rollout(mdp, p, 0, rng);
        CHECK(tr.actions == std::vector<int>{1});
        CHECK(tr.rewards == std::vector<double>{1.0});
    }
}

TEST_CASE("rollout frequencies under a uniform policy") {
    const auto mdp = bandit({0.0, 0.0, 0.0, 0.0});
    SoftmaxPolicy p(4, [](const TokenState&, std::span<double> r) { std::fill(r.begin(), r.end(), 0.0); });
    RolloutSampler sampler(mdp, p);
    std::mt19937_64 rng(123);
    const int n = 1'000'000;
    std::vector<int> counts(4, 0);
    for (int i = 0; i < n; ++i) ++counts[sampler.sample(0, rng).actions[0]];
    const double sigma = std::sqrt(n * 0.25 * 0.75);
    for (int c : counts) CHECK(std::abs(c - n * 0.25) <= 3.0 * sigma);
}

TEST_CASE("stored behaviour log-probs match the policy") {
    std::mt19937_64 rng(8);
    const auto mdp = random_token_mdp(RandomMdpSpec{}, rng);
    const auto policy = random_policy(mdp, 1.0, rng);
    for (int i = 0; i < 200; ++i) {
        const auto tr = rollout(mdp, policy, i % mdp.query_count(), rng);
        REQUIRE(tr.actions.size() == static_cast<std::size_t>(mdp.horizon()));
        REQUIRE(tr.rewards.size() == tr.actions.size());
        for (std::size_t t = 0; t < tr.actions.size(); ++t) {
            const auto p = oracle::naive_softmax(oracle::row_of(policy, tr.state_at(t)));
            CHECK(tr.behavior_logprobs[t] <= 0.0);
            CHECK(std::abs(tr.behavior_logprobs[t] - std::log(p[tr.actions[t]])) <= 1e-12);
        }
    }
}

TEST_CASE("Monte Carlo returns agree with exact_value within 4 standard errors") {
    std::mt19937_64 rng(77);
    const auto mdp = random_token_mdp(RandomMdpSpec{2, 4, 2, 3, 1, 1, 4}, rng);
    const auto policy = random_policy(mdp, 1.0, rng);
    const double exact = exact_value(mdp, policy, 0);
    RolloutSampler sampler(mdp, policy);
    const int n = 100'000;
    double s = 0.0, ss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double g = sampler.sample(0, rng).total_return();
        s += g;
        ss += g * g;
    }
    const double mean = s / n;
    const double se = std::sqrt((ss / n - mean * mean) / n);
    CHECK(std::abs(mean - exact) <= 4.0 * se);
}

TEST_CASE("rollouts are deterministic per stream") {
    std::mt19937_64 rng(4);
    const auto mdp = random_token_mdp(RandomMdpSpec{}, rng);
    const auto policy = random_policy(mdp, 1.0, rng);
    auto s1 = make_stream(99, 3), s2 = make_stream(99, 3);
    for (int i = 0; i < 10; ++i) CHECK(rollout(mdp, policy, 0, s1).actions == rollout(mdp, policy, 0, s2).actions);
    CHECK(derive_seed(99, 3) != derive_seed(99, 4));
    CHECK(derive_seed(99, 3) != derive_seed(100, 3));
}

TEST_CASE("batch grouping") {
    TrajectoryBatch b;
    b.group_size = 2;
    for (double r : {1.0, 0.0, 0.5, 0.5}) b.trajectories.push_back(Trajectory{0, {0}, {r}, {-0.1}});
    CHECK(b.group_count() == 2);
    CHECK(b.step_count() == 4);
    const auto g = b.grouped_returns();
    CHECK(g == std::vector<std::vector<double>>{{1.0, 0.0}, {0.5, 0.5}});
}
