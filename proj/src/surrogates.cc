#include "aent/surrogates.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace aent {

void ClipConfig::validate() const {
    if (!(eps_low >= 0.0) || !(eps_high >= 0.0)) {
        throw std::invalid_argument("clip ranges must be non-negative");
    }
    if (!(1.0 - eps_low > 0.0)) throw std::invalid_argument("clip lower bound 1 - eps_low must be positive");
}

AdvantageBatch grpo_advantages(const std::vector<std::vector<double>>& grouped_returns,
                               AdvantageNormalization normalization) {
    AdvantageBatch out;
    out.normalization = normalization;
    if (grouped_returns.empty()) return out;
    out.group_size = grouped_returns.front().size();
    for (const auto& group : grouped_returns) {
        if (group.size() != out.group_size) throw std::invalid_argument("groups differ in size");
        if (group.empty()) throw std::invalid_argument("empty group");
        if (normalization == AdvantageNormalization::mean_std && group.size() < 2) {
            throw std::invalid_argument("degenerate group");
        }
        const double n = static_cast<double>(group.size());
        const double mean = std::accumulate(group.begin(), group.end(), 0.0) / n;
        double scale = 1.0;
        if (normalization == AdvantageNormalization::mean_std) {
            double var = 0.0;
            for (double r : group) var += (r - mean) * (r - mean);
            scale = 1.0 / (std::sqrt(var / n) + kAdvantageStdFloor);
        }
        for (double r : group) out.values.push_back((r - mean) * scale);
    }
    return out;
}

namespace {

std::size_t require_row(const SoftmaxPolicy& policy, const TokenState& s) {
    auto r = policy.find(s);
    if (!r) throw std::invalid_argument("batch visits a state with no policy row");
    return *r;
}

/// Per-row log-partition cache for the current policy.
class LogPartition {
public:
    explicit LogPartition(const SoftmaxPolicy& policy) : policy_(policy) {}
    double log_prob(std::size_t row, int action) {
        auto it = lse_.find(row);
        if (it == lse_.end()) it = lse_.emplace(row, log_sum_exp(policy_.row(row))).first;
        return policy_.row(row)[action] - it->second;
    }

private:
    const SoftmaxPolicy& policy_;
    std::unordered_map<std::size_t, double> lse_;
};

/// Accumulates sum_i c_i * (e_{a_i} - pi(.|s_i)) without materializing a dense
/// score vector per step. Rows are finalized in first-touch order so the
/// reduction order only depends on the batch order.
class ScoreAccumulator {
public:
    void add(std::size_t row, int action, double coef) {
        auto [it, inserted] = slot_.try_emplace(row, entries_.size());
        if (inserted) entries_.push_back(Entry{row, 0.0, {}});
        Entry& e = entries_[it->second];
        e.total += coef;
        e.terms.emplace_back(action, coef);
    }

    LogitGradient finish(const SoftmaxPolicy& policy) const {
        auto g = LogitGradient::like(policy);
        for (const auto& e : entries_) {
            auto out = g.row(e.row);
            for (const auto& [a, c] : e.terms) out[a] += c;
            if (e.total != 0.0) {
                const auto p = softmax(policy.row(e.row));
                for (std::size_t a = 0; a < p.size(); ++a) out[a] -= e.total * p[a];
            }
        }
        return g;
    }

private:
    struct Entry {
        std::size_t row;
        double total;
        std::vector<std::pair<int, double>> terms;
    };
    std::unordered_map<std::size_t, std::size_t> slot_;
    std::vector<Entry> entries_;
};

double aggregation_denominator(const TrajectoryBatch& batch, std::size_t steps, Aggregation agg) {
    const std::size_t d = agg == Aggregation::token_mean ? steps : batch.trajectories.size();
    return static_cast<double>(std::max<std::size_t>(d, 1));
}

std::vector<int> all_actions(int n) {
    std::vector<int> v(n);
    std::iota(v.begin(), v.end(), 0);
    return v;
}

}  // namespace

RetainedSets capture_retained_sets(const SoftmaxPolicy& policy, const TrajectoryBatch& batch,
                                   const ClampConfig& clamp) {
    RetainedSets sets;
    for (const auto& tr : batch.trajectories) {
        for (std::size_t t = 0; t < tr.actions.size(); ++t) {
            const std::size_t r = require_row(policy, tr.state_at(t));
            if (!sets.contains(r)) sets.emplace(r, clamped_set(policy.row(r), clamp));
        }
    }
    return sets;
}

SurrogateEval ppo_clip_objective(const SoftmaxPolicy& policy, const TrajectoryBatch& batch,
                                 const AdvantageBatch& advantages, const ClipConfig& clip,
                                 Aggregation aggregation) {
    clip.validate();
    if (advantages.values.size() != batch.trajectories.size()) {
        throw std::invalid_argument("one advantage per trajectory is required");
    }
    LogPartition lp(policy);
    struct Term {
        std::size_t row;
        int action;
        double coef;  // rho * A when the unclipped branch is active
    };
    std::vector<Term> terms;
    SurrogateEval eval;
    double sum = 0.0;
    std::size_t included = 0;
    for (std::size_t i = 0; i < batch.trajectories.size(); ++i) {
        const auto& tr = batch.trajectories[i];
        const double adv = advantages.values[i];
        for (std::size_t t = 0; t < tr.actions.size(); ++t) {
            const std::size_t r = require_row(policy, tr.state_at(t));
            const double ratio = std::exp(lp.log_prob(r, tr.actions[t]) - tr.behavior_logprobs[t]);
            if (!std::isfinite(ratio)) {
                ++eval.excluded_steps;
                continue;
            }
            ++included;
            const double unclipped = ratio * adv;
            const double clipped = std::clamp(ratio, 1.0 - clip.eps_low, 1.0 + clip.eps_high) * adv;
            sum += std::min(unclipped, clipped);
            if (unclipped <= clipped) terms.push_back(Term{r, tr.actions[t], unclipped});
        }
    }
    const double denom = aggregation_denominator(batch, included, aggregation);
    ScoreAccumulator acc;
    for (const auto& term : terms) acc.add(term.row, term.action, term.coef / denom);
    eval.value = sum / denom;
    eval.gradient = acc.finish(policy);
    eval.entropy_bonus_gradient = LogitGradient::like(policy);
    return eval;
}

BonusEval clamped_entropy_bonus(const SoftmaxPolicy& policy, const TrajectoryBatch& batch,
                                const ClampConfig& clamp, Aggregation aggregation,
                                const RetainedSets* frozen) {
    clamp.validate();
    // Visit counts per row, in first-visit order.
    std::vector<std::pair<std::size_t, std::size_t>> visits;
    std::unordered_map<std::size_t, std::size_t> slot;
    for (const auto& tr : batch.trajectories) {
        for (std::size_t t = 0; t < tr.actions.size(); ++t) {
            const std::size_t r = require_row(policy, tr.state_at(t));
            auto [it, inserted] = slot.try_emplace(r, visits.size());
            if (inserted) visits.emplace_back(r, 0);
            ++visits[it->second].second;
        }
    }

    BonusEval out;
    out.gradient = LogitGradient::like(policy);
    const double denom = aggregation_denominator(batch, batch.step_count(), aggregation);
    const int n = policy.action_count();
    const bool keep_all = clamp.mode == ClampMode::count && retained_count(clamp.p, n) == static_cast<std::size_t>(n);
    const auto everything = keep_all ? all_actions(n) : std::vector<int>{};

    for (const auto& [r, count] : visits) {
        const auto logits = policy.row(r);
        std::vector<int> computed;
        std::span<const int> retained;
        if (frozen) {
            retained = frozen->at(r);
        } else if (keep_all) {
            retained = everything;
        } else {
            computed = clamped_set(logits, clamp);
            retained = computed;
        }
        const auto d = clamped_softmax(logits, retained);
        const double weight = static_cast<double>(count) / denom;
        out.value += weight * d.entropy();
        const auto g = clamped_entropy_grad_row(logits, retained);
        auto dst = out.gradient.row(r);
        for (int a = 0; a < n; ++a) dst[a] += weight * g[a];
    }
    return out;
}

SurrogateEval aent_objective(const SoftmaxPolicy& policy, const TrajectoryBatch& batch,
                             const AdvantageBatch& advantages, const ClipConfig& clip,
                             const ClampConfig& clamp, double lambda, Aggregation aggregation,
                             const RetainedSets* frozen) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("entropy coefficient must be non-negative");
    auto eval = ppo_clip_objective(policy, batch, advantages, clip, aggregation);
    auto bonus = clamped_entropy_bonus(policy, batch, clamp, aggregation, frozen);
    eval.value += lambda * bonus.value;
    eval.gradient.add_scaled(bonus.gradient, lambda);
    eval.entropy_bonus_value = bonus.value;
    eval.entropy_bonus_gradient = std::move(bonus.gradient);
    return eval;
}

LogitGradient reinforce_gradient_estimate(const SoftmaxPolicy& policy,
                                          const TrajectoryBatch& on_policy_batch) {
    ScoreAccumulator acc;
    const double n = static_cast<double>(std::max<std::size_t>(on_policy_batch.trajectories.size(), 1));
    for (const auto& tr : on_policy_batch.trajectories) {
        double to_go = std::accumulate(tr.rewards.begin(), tr.rewards.end(), 0.0);
        for (std::size_t t = 0; t < tr.actions.size(); ++t) {
            acc.add(require_row(policy, tr.state_at(t)), tr.actions[t], to_go / n);
            to_go -= tr.rewards[t];
        }
    }
    return acc.finish(policy);
}

LogitGradient sampled_entropy_gradient_estimate(const SoftmaxPolicy& policy,
                                                const TrajectoryBatch& on_policy_batch) {
    LogPartition lp(policy);
    ScoreAccumulator acc;
    const double n = static_cast<double>(std::max<std::size_t>(on_policy_batch.trajectories.size(), 1));
    for (const auto& tr : on_policy_batch.trajectories) {
        const std::size_t len = tr.actions.size();
        std::vector<std::size_t> rows(len);
        std::vector<double> tail(len + 1, 0.0);
        for (std::size_t t = 0; t < len; ++t) rows[t] = require_row(policy, tr.state_at(t));
        for (std::size_t t = len; t-- > 0;) tail[t] = tail[t + 1] + lp.log_prob(rows[t], tr.actions[t]);
        for (std::size_t h = 0; h < len; ++h) acc.add(rows[h], tr.actions[h], -tail[h] / n);
    }
    return acc.finish(policy);
}

}  // namespace aent
