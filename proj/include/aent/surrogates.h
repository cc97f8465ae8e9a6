#pragma once

#include <cstddef>
#include <unordered_map>
#include <vector>

#include "aent/softmax_policy.h"
#include "aent/token_mdp.h"

namespace aent {

struct ClipConfig {
    double eps_low = 0.2;
    double eps_high = 0.2;

    void validate() const;
};

enum class AdvantageNormalization { mean_only, mean_std };

/// How per-step terms are reduced to a batch objective.
///   token_mean:     sum over all steps / number of steps.
///   trajectory_sum: sum over all steps / number of trajectories.
enum class Aggregation { token_mean, trajectory_sum };

/// One scalar advantage per trajectory, broadcast to all of its steps.
struct AdvantageBatch {
    std::vector<double> values;
    std::size_t group_size = 0;
    AdvantageNormalization normalization = AdvantageNormalization::mean_std;
};

inline constexpr double kAdvantageStdFloor = 1e-6;

/// Group-relative advantages. Throws std::invalid_argument("degenerate group")
/// on a singleton group under mean_std, and on ragged groups.
AdvantageBatch grpo_advantages(const std::vector<std::vector<double>>& grouped_returns,
                               AdvantageNormalization normalization);

struct SurrogateEval {
    double value = 0.0;
    LogitGradient gradient;
    double entropy_bonus_value = 0.0;
    LogitGradient entropy_bonus_gradient;
    std::size_t excluded_steps = 0;  ///< steps with a non-finite ratio
};

struct BonusEval {
    double value = 0.0;
    LogitGradient gradient;
};

/// Retained sets keyed by policy row, for evaluating the bonus against sets
/// captured at sampling time instead of the current policy.
using RetainedSets = std::unordered_map<std::size_t, std::vector<int>>;
RetainedSets capture_retained_sets(const SoftmaxPolicy& policy, const TrajectoryBatch& batch,
                                   const ClampConfig& clamp);

// All batch functions below require a policy row for every visited state and
// return gradients shaped like the policy.

/// PPO-clip surrogate with decoupled clip range; A-hat and pi_b are constants.
SurrogateEval ppo_clip_objective(const SoftmaxPolicy& policy, const TrajectoryBatch& batch,
                                 const AdvantageBatch& advantages, const ClipConfig& clip,
                                 Aggregation aggregation = Aggregation::token_mean);

/// Clamped entropy of the current policy at the states the batch visited.
BonusEval clamped_entropy_bonus(const SoftmaxPolicy& policy, const TrajectoryBatch& batch,
                                const ClampConfig& clamp,
                                Aggregation aggregation = Aggregation::token_mean,
                                const RetainedSets* frozen = nullptr);

/// PPO-clip surrogate plus lambda times the clamped entropy bonus.
SurrogateEval aent_objective(const SoftmaxPolicy& policy, const TrajectoryBatch& batch,
                             const AdvantageBatch& advantages, const ClipConfig& clip,
                             const ClampConfig& clamp, double lambda,
                             Aggregation aggregation = Aggregation::token_mean,
                             const RetainedSets* frozen = nullptr);

/// Mean over trajectories of sum_t grad log pi(a_t|s_t) * (reward-to-go at t).
LogitGradient reinforce_gradient_estimate(const SoftmaxPolicy& policy,
                                          const TrajectoryBatch& on_policy_batch);

/// Mean over trajectories of
///   -sum_h grad log pi(a_h|s_h) * sum_{t >= h} log pi(a_t|s_t).
LogitGradient sampled_entropy_gradient_estimate(const SoftmaxPolicy& policy,
                                                const TrajectoryBatch& on_policy_batch);

}  // namespace aent
