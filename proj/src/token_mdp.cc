#include "aent/token_mdp.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <string>

namespace aent {

// ---------------------------------------------------------------------------
// TokenMdp
// ---------------------------------------------------------------------------

TokenMdp::TokenMdp(int action_count, int horizon, int query_count, RewardFn reward,
                   std::uint64_t enumeration_limit)
    : action_count_(action_count),
      horizon_(horizon),
      query_count_(query_count),
      reward_(std::move(reward)),
      enumeration_limit_(enumeration_limit) {
    if (action_count <= 0) throw std::invalid_argument("action_count must be positive");
    if (horizon <= 0) throw std::invalid_argument("horizon must be positive");
    if (query_count <= 0) throw std::invalid_argument("the query set must be non-empty");
    if (enumeration_limit == 0) throw std::invalid_argument("enumeration_limit must be positive");
    if (!reward_) throw std::invalid_argument("reward function is empty");

    if (enumerable()) {
        for (int q = 0; q < query_count_; ++q) {
            const auto tree = ExactTree::build(*this, q);
            for (const auto& node : tree.nodes) {
                for (int a = 0; a < action_count_; ++a) (void)this->reward(node.state, a);
            }
        }
    }
}

double TokenMdp::reward(const TokenState& state, int action) const {
    const double r = reward_(state, action);
    if (!(r >= 0.0 && r <= 1.0)) {
        throw std::domain_error("reward outside [0, 1]: " + std::to_string(r));
    }
    return r;
}

TokenState TokenMdp::root(int query) const {
    if (query < 0 || query >= query_count_) throw std::out_of_range("query index out of range");
    return TokenState{query, {}};
}

std::uint64_t TokenMdp::sequence_count() const {
    std::uint64_t n = 1;
    const auto a = static_cast<std::uint64_t>(action_count_);
    for (int t = 0; t < horizon_; ++t) {
        if (n > std::numeric_limits<std::uint64_t>::max() / a) {
            return std::numeric_limits<std::uint64_t>::max();
        }
        n *= a;
    }
    return n;
}

void TokenMdp::require_enumerable(const char* what) const {
    if (!enumerable()) {
        throw EnumerationLimitError(std::string(what) +
                                    ": exact oracle only for small instances (|A|^H = " +
                                    std::to_string(sequence_count()) + " exceeds limit " +
                                    std::to_string(enumeration_limit_) + ")");
    }
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

double Trajectory::total_return() const {
    return std::accumulate(rewards.begin(), rewards.end(), 0.0);
}

TokenState Trajectory::state_at(std::size_t t) const {
    return TokenState{query_index, std::vector<int>(actions.begin(), actions.begin() + t)};
}

std::size_t TrajectoryBatch::group_count() const {
    return group_size == 0 ? 0 : trajectories.size() / group_size;
}

std::size_t TrajectoryBatch::step_count() const {
    std::size_t n = 0;
    for (const auto& tr : trajectories) n += tr.actions.size();
    return n;
}

std::vector<std::vector<double>> TrajectoryBatch::grouped_returns() const {
    if (group_size == 0 || trajectories.size() % group_size != 0) {
        throw std::invalid_argument("batch size is not a multiple of the group size");
    }
    std::vector<std::vector<double>> groups(group_count());
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
        groups[i / group_size].push_back(trajectories[i].total_return());
    }
    return groups;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    return mix(mix(base) ^ (index * 0xd1b54a32d192ed03ULL + 0x632be59bd9b4e019ULL));
}

std::mt19937_64 make_stream(std::uint64_t base, std::uint64_t index) {
    return std::mt19937_64(derive_seed(base, index));
}

RolloutSampler::RolloutSampler(const TokenMdp& mdp, const SoftmaxPolicy& policy)
    : mdp_(mdp), policy_(policy) {
    if (mdp.action_count() != policy.action_count()) {
        throw std::invalid_argument("policy and MDP disagree on |A|");
    }
}

const RolloutSampler::Row& RolloutSampler::row_for(const TokenState& state) {
    auto it = cache_.find(state);
    if (it != cache_.end()) return it->second;
    std::vector<double> scratch;
    const auto logits = policy_.logits(state, scratch);
    Row row;
    const double m = *std::max_element(logits.begin(), logits.end());
    row.cumulative.resize(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        sum += std::exp(logits[i] - m);
        row.cumulative[i] = sum;
    }
    row.log_probs = log_softmax(logits);
    return cache_.emplace(state, std::move(row)).first->second;
}

Trajectory RolloutSampler::sample(int query, std::mt19937_64& rng) {
    Trajectory tr;
    tr.query_index = query;
    TokenState state = mdp_.root(query);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int t = 0; t < mdp_.horizon(); ++t) {
        const Row& row = row_for(state);
        const double u = unit(rng) * row.cumulative.back();
        auto it = std::upper_bound(row.cumulative.begin(), row.cumulative.end(), u);
        if (it == row.cumulative.end()) --it;
        int a = static_cast<int>(it - row.cumulative.begin());
        // Zero-weight entries share a cumulative value with their predecessor
        // and must never be chosen.
        while (a > 0 && row.cumulative[a] == row.cumulative[a - 1]) --a;
        tr.actions.push_back(a);
        tr.rewards.push_back(mdp_.reward(state, a));
        tr.behavior_logprobs.push_back(std::min(row.log_probs[a], 0.0));
        state.prefix.push_back(a);
    }
    return tr;
}

Trajectory rollout(const TokenMdp& mdp, const SoftmaxPolicy& behavior, int query,
                   std::mt19937_64& rng) {
    RolloutSampler sampler(mdp, behavior);
    return sampler.sample(query, rng);
}

// ---------------------------------------------------------------------------
// Exact enumeration
// ---------------------------------------------------------------------------

ExactTree ExactTree::build(const TokenMdp& mdp, int query) {
    mdp.require_enumerable("ExactTree::build");
    ExactTree tree;
    tree.action_count = mdp.action_count();
    tree.horizon = mdp.horizon();
    tree.nodes.push_back(Node{mdp.root(query), -1, -1, 0, 0});
    for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
        if (tree.nodes[i].depth == tree.horizon - 1) continue;
        tree.nodes[i].first_child = tree.nodes.size();
        const Node parent = tree.nodes[i];
        for (int a = 0; a < tree.action_count; ++a) {
            tree.nodes.push_back(Node{parent.state.extended(a), static_cast<int>(i), a,
                                      parent.depth + 1, 0});
        }
    }
    return tree;
}

double exact_value(const TokenMdp& mdp, const SoftmaxPolicy& policy, int query) {
    const auto tree = ExactTree::build(mdp, query);
    std::vector<double> value(tree.nodes.size(), 0.0);
    std::vector<double> scratch;
    for (std::size_t i = tree.nodes.size(); i-- > 0;) {
        const auto& node = tree.nodes[i];
        const auto p = softmax(policy.logits(node.state, scratch));
        double v = 0.0;
        for (int a = 0; a < tree.action_count; ++a) {
            double q = mdp.reward(node.state, a);
            if (!tree.is_leaf_level(i)) q += value[tree.child(i, a)];
            v += p[a] * q;
        }
        value[i] = v;
    }
    return value[0];
}

double exact_value(const TokenMdp& mdp, const SoftmaxPolicy& policy) {
    double sum = 0.0;
    for (int q = 0; q < mdp.query_count(); ++q) sum += exact_value(mdp, policy, q);
    return sum / mdp.query_count();
}

StateDistribution exact_state_distribution(const TokenMdp& mdp, const SoftmaxPolicy& policy,
                                           int query) {
    const auto tree = ExactTree::build(mdp, query);
    StateDistribution dist(mdp.horizon());
    std::vector<double> reach(tree.nodes.size(), 0.0);
    reach[0] = 1.0;
    std::vector<double> scratch;
    for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
        const auto& node = tree.nodes[i];
        dist[node.depth][node.state] = reach[i];
        if (tree.is_leaf_level(i)) continue;
        const auto p = softmax(policy.logits(node.state, scratch));
        for (int a = 0; a < tree.action_count; ++a) reach[tree.child(i, a)] = reach[i] * p[a];
    }
    return dist;
}

// ---------------------------------------------------------------------------
// Synthetic task
// ---------------------------------------------------------------------------

void SyntheticTaskSpec::validate() const {
    if (action_count <= 0 || horizon <= 0) {
        throw std::invalid_argument("synthetic task needs positive action_count and horizon");
    }
    if (n_optimal < 0 || n_suboptimal < 0) {
        throw std::invalid_argument("action counts must be non-negative");
    }
    if (static_cast<long long>(n_optimal) + n_suboptimal > action_count) {
        throw std::invalid_argument("n_optimal + n_suboptimal exceeds action_count");
    }
    for (double r : {reward_optimal, reward_suboptimal, reward_other}) {
        if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("rewards must lie in [0, 1]");
    }
    if (!(init_stddev >= 0.0)) throw std::invalid_argument("init_stddev must be non-negative");
}

SyntheticTask build_synthetic_task(const SyntheticTaskSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    const int n = spec.action_count;

    // Partial Fisher-Yates: the first n_optimal + n_suboptimal slots are the
    // rewarded actions.
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    const int rewarded = spec.n_optimal + spec.n_suboptimal;
    for (int i = 0; i < rewarded; ++i) {
        std::uniform_int_distribution<int> pick(i, n - 1);
        std::swap(perm[i], perm[pick(rng)]);
    }
    std::vector<int> optimal(perm.begin(), perm.begin() + spec.n_optimal);
    std::vector<int> suboptimal(perm.begin() + spec.n_optimal, perm.begin() + rewarded);
    std::sort(optimal.begin(), optimal.end());
    std::sort(suboptimal.begin(), suboptimal.end());

    auto rewards = std::make_shared<std::vector<double>>(n, spec.reward_other);
    for (int a : suboptimal) (*rewards)[a] = spec.reward_suboptimal;
    for (int a : optimal) (*rewards)[a] = spec.reward_optimal;

    std::vector<char> elevated(n, 0);
    for (int a : optimal) elevated[a] = 1;
    if (spec.elevated == ElevatedSet::rewarded) {
        for (int a : suboptimal) elevated[a] = 1;
    } else {
        // n_suboptimal further actions outside the optimal set.
        std::vector<int> rest;
        rest.reserve(n - spec.n_optimal);
        for (int a = 0; a < n; ++a) {
            if (!elevated[a]) rest.push_back(a);
        }
        const int extra = std::min<int>(spec.n_suboptimal, static_cast<int>(rest.size()));
        for (int i = 0; i < extra; ++i) {
            std::uniform_int_distribution<int> pick(i, static_cast<int>(rest.size()) - 1);
            std::swap(rest[i], rest[pick(rng)]);
            elevated[rest[i]] = 1;
        }
    }

    auto logits = std::make_shared<std::vector<double>>(n);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (int a = 0; a < n; ++a) {
        const double mean = elevated[a] ? spec.elevated_init_mean : spec.base_init_mean;
        (*logits)[a] = mean + spec.init_stddev * noise(rng);
    }

    TokenMdp mdp(n, spec.horizon, 1, [rewards](const TokenState&, int a) { return (*rewards)[a]; });
    SoftmaxPolicy policy(n, [logits](const TokenState&, std::span<double> row) {
        std::copy(logits->begin(), logits->end(), row.begin());
    });
    policy.ensure_row(mdp.root(0));
    return SyntheticTask{std::move(mdp), std::move(policy), std::move(optimal),
                         std::move(suboptimal), *rewards};
}

// ---------------------------------------------------------------------------
// Random small instances
// ---------------------------------------------------------------------------

TokenMdp random_token_mdp(const RandomMdpSpec& spec, std::mt19937_64& rng) {
    auto draw = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    const int actions = draw(spec.min_actions, spec.max_actions);
    const int horizon = draw(spec.min_horizon, spec.max_horizon);
    const int queries = draw(spec.min_queries, spec.max_queries);
    const int levels = std::max(spec.reward_levels, 1);

    using Table = std::unordered_map<TokenState, std::vector<double>, TokenStateHash>;
    auto table = std::make_shared<Table>();
    // Enumerate reachable states breadth first to fill the table in a fixed order.
    for (int q = 0; q < queries; ++q) {
        std::vector<TokenState> frontier{TokenState{q, {}}};
        for (int t = 0; t < horizon; ++t) {
            std::vector<TokenState> next;
            for (const auto& s : frontier) {
                auto& row = (*table)[s];
                row.resize(actions);
                for (int a = 0; a < actions; ++a) {
                    row[a] = static_cast<double>(draw(0, levels)) / levels;
                    if (t + 1 < horizon) next.push_back(s.extended(a));
                }
            }
            frontier = std::move(next);
        }
    }
    return TokenMdp(actions, horizon, queries, [table](const TokenState& s, int a) {
        auto it = table->find(s);
        if (it == table->end()) throw std::out_of_range("state outside the reward table");
        return it->second[a];
    });
}

void materialize_rows(const TokenMdp& mdp, SoftmaxPolicy& policy) {
    for (int q = 0; q < mdp.query_count(); ++q) {
        for (const auto& node : ExactTree::build(mdp, q).nodes) policy.ensure_row(node.state);
    }
}

SoftmaxPolicy random_policy(const TokenMdp& mdp, double stddev, std::mt19937_64& rng) {
    SoftmaxPolicy policy(mdp.action_count());
    materialize_rows(mdp, policy);
    std::normal_distribution<double> noise(0.0, stddev);
    for (double& v : policy.table()) v = noise(rng);
    return policy;
}

}  // namespace aent
