#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "aent/softmax_policy.h"
#include "aent/token_state.h"

namespace aent {

inline constexpr std::uint64_t kDefaultEnumerationLimit = 1'000'000;

/// Raised by exact oracles on instances with more than enumeration_limit
/// action sequences.
class EnumerationLimitError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using RewardFn = std::function<double(const TokenState&, int)>;

/// Finite-horizon MDP whose transition appends the chosen action to the state.
/// Queries are the root states 0..query_count-1, drawn uniformly.
class TokenMdp {
public:
    /// Rewards are checked against [0, 1]: eagerly over every reachable
    /// (state, action) pair when the instance is enumerable, otherwise on
    /// each call to reward().
    TokenMdp(int action_count, int horizon, int query_count, RewardFn reward,
             std::uint64_t enumeration_limit = kDefaultEnumerationLimit);

    int action_count() const { return action_count_; }
    int horizon() const { return horizon_; }
    int query_count() const { return query_count_; }
    std::uint64_t enumeration_limit() const { return enumeration_limit_; }

    double reward(const TokenState& state, int action) const;

    TokenState root(int query) const;
    TokenState next(const TokenState& state, int action) const { return state.extended(action); }

    /// |A|^H, saturating at UINT64_MAX.
    std::uint64_t sequence_count() const;
    bool enumerable() const { return sequence_count() <= enumeration_limit_; }
    /// Throws EnumerationLimitError naming `what` if the instance is too large.
    void require_enumerable(const char* what) const;

private:
    int action_count_;
    int horizon_;
    int query_count_;
    RewardFn reward_;
    std::uint64_t enumeration_limit_;
};

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

struct Trajectory {
    int query_index = 0;
    std::vector<int> actions;
    std::vector<double> rewards;
    std::vector<double> behavior_logprobs;

    double total_return() const;
    /// State at which actions[t] was taken.
    TokenState state_at(std::size_t t) const;
};

/// Rollouts of one sampling phase, grouped by query: trajectories
/// [g * group_size, (g + 1) * group_size) share a query.
struct TrajectoryBatch {
    std::vector<Trajectory> trajectories;
    std::size_t group_size = 1;

    std::size_t group_count() const;
    std::size_t step_count() const;
    std::vector<std::vector<double>> grouped_returns() const;
};

/// splitmix64-mixed seed for stream `index` under `base`.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);
std::mt19937_64 make_stream(std::uint64_t base, std::uint64_t index);

/// Samples from a fixed policy snapshot, caching each visited state's
/// cumulative weights. Outputs are identical to uncached sampling.
class RolloutSampler {
public:
    RolloutSampler(const TokenMdp& mdp, const SoftmaxPolicy& policy);

    Trajectory sample(int query, std::mt19937_64& rng);

private:
    struct Row {
        std::vector<double> cumulative;  // running sums of exp(theta - max)
        std::vector<double> log_probs;
    };
    const Row& row_for(const TokenState& state);

    const TokenMdp& mdp_;
    const SoftmaxPolicy& policy_;
    std::unordered_map<TokenState, Row, TokenStateHash> cache_;
};

Trajectory rollout(const TokenMdp& mdp, const SoftmaxPolicy& behavior, int query,
                   std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Exact enumeration
// ---------------------------------------------------------------------------

/// Every state reachable from one query at steps 0..H-1, stored breadth
/// first. Children of a node are contiguous and ordered by action.
struct ExactTree {
    struct Node {
        TokenState state;
        int parent = -1;
        int via_action = -1;
        int depth = 0;
        std::size_t first_child = 0;  // meaningful when depth < H - 1
    };

    int action_count = 0;
    int horizon = 0;
    std::vector<Node> nodes;

    static ExactTree build(const TokenMdp& mdp, int query);
    bool is_leaf_level(std::size_t node) const { return nodes[node].depth == horizon - 1; }
    std::size_t child(std::size_t node, int action) const { return nodes[node].first_child + action; }
};

/// V^pi(s_0) summed over all |A|^H action sequences.
double exact_value(const TokenMdp& mdp, const SoftmaxPolicy& policy, int query);

/// V^pi(D): mean of exact_value over the queries.
double exact_value(const TokenMdp& mdp, const SoftmaxPolicy& policy);

/// P_t(s | s_0): one map per step t = 0..H-1.
using StateDistribution = std::vector<std::unordered_map<TokenState, double, TokenStateHash>>;
StateDistribution exact_state_distribution(const TokenMdp& mdp, const SoftmaxPolicy& policy,
                                           int query);

// ---------------------------------------------------------------------------
// Synthetic sparse-optimality task
// ---------------------------------------------------------------------------

/// Which actions receive the elevated initial logit mean.
///   rewarded:    the optimal and suboptimal-reward actions.
///   independent: the optimal actions plus n_suboptimal random others,
///                drawn independently of the suboptimal-reward set.
enum class ElevatedSet { rewarded, independent };

struct SyntheticTaskSpec {
    int action_count = 100'000;
    int n_optimal = 5;
    int n_suboptimal = 500;
    double reward_optimal = 1.0;
    double reward_suboptimal = 0.2;
    double reward_other = 0.0;
    int horizon = 1;
    double elevated_init_mean = 1.0;
    double base_init_mean = 0.0;
    double init_stddev = 1.0;
    ElevatedSet elevated = ElevatedSet::rewarded;

    void validate() const;
};

struct SyntheticTask {
    TokenMdp mdp;
    SoftmaxPolicy policy;
    std::vector<int> optimal_actions;     // sorted
    std::vector<int> suboptimal_actions;  // sorted
    std::vector<double> action_rewards;   // reward of each action, any step
};

/// Single-query task whose reward depends only on the action. The initial
/// policy gives every visited state the same random logit row.
SyntheticTask build_synthetic_task(const SyntheticTaskSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Random small instances
// ---------------------------------------------------------------------------

struct RandomMdpSpec {
    int min_actions = 2, max_actions = 6;
    int min_horizon = 1, max_horizon = 3;
    int min_queries = 1, max_queries = 3;
    /// Rewards are drawn from {0, 1/levels, ..., 1}; coarse levels create ties.
    int reward_levels = 4;
};

/// Random tabular reward over every reachable (state, action) pair.
TokenMdp random_token_mdp(const RandomMdpSpec& spec, std::mt19937_64& rng);

/// Creates a row for every state reachable from every query.
void materialize_rows(const TokenMdp& mdp, SoftmaxPolicy& policy);

/// Policy with N(0, stddev^2) logits on every reachable state.
SoftmaxPolicy random_policy(const TokenMdp& mdp, double stddev, std::mt19937_64& rng);

}  // namespace aent
