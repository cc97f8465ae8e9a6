#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "aent/softmax_policy.h"
#include "aent/token_mdp.h"

namespace aent {

/// Exact value, Q and advantage tables of one policy on an enumerable MDP,
/// plain and entropy-regularized at coefficient `lambda`. Node indices refer
/// to the per-query ExactTree.
struct QueryTables {
    ExactTree tree;
    std::vector<double> reach;      ///< P_t(s | s_0) per node
    std::vector<double> probs;      ///< pi(a|s), node-major
    std::vector<double> log_probs;  ///< log pi(a|s), node-major
    std::vector<double> v;          ///< V_t(s)
    std::vector<double> q;          ///< Q_t(s, a), node-major
    std::vector<double> v_reg;      ///< V_{t,lambda}(s)
    std::vector<double> q_reg;      ///< Q_{t,lambda}(s, a), node-major

    double advantage(std::size_t node, int a) const;
    /// Q_lambda - lambda log pi - V_lambda
    double reg_advantage(std::size_t node, int a, double lambda) const;
};

struct ValueTables {
    double lambda = 0.0;
    int action_count = 0;
    std::vector<QueryTables> queries;

    static ValueTables compute(const TokenMdp& mdp, const SoftmaxPolicy& policy, double lambda);

    /// V(D), V_lambda(D), and H(pi) over D.
    double value() const;
    double reg_value() const;
    double entropy() const;
};

/// Entry (s, a) = sum_t P_t(s) pi(a|s) A_{t,lambda}(s, a) with P_t including
/// the 1/|D| query draw. Every reachable state needs a policy row.
LogitGradient exact_policy_gradient(const TokenMdp& mdp, const SoftmaxPolicy& policy, double lambda);

/// H(pi) = -E[sum_t log pi(a_t|s_t)] over D, computed from the state marginals.
double exact_entropy(const TokenMdp& mdp, const SoftmaxPolicy& policy);

struct EntropyAndGradient {
    double entropy = 0.0;
    LogitGradient gradient;
};

/// Entropy and -E[sum_h grad log pi(a_h|s_h) sum_{t>=h} log pi(a_t|s_t)],
/// both by summing over every action sequence.
EntropyAndGradient exact_entropy_and_grad(const TokenMdp& mdp, const SoftmaxPolicy& policy);

struct OptimalResponses {
    std::vector<std::vector<int>> sequences;
    double value = 0.0;  ///< V^{pi*}(s_0)
};

inline constexpr double kOptimalityTolerance = 1e-9;

/// Action sequences whose return is within kOptimalityTolerance of the best.
OptimalResponses optimal_response_set(const TokenMdp& mdp, int query);

struct BoundEntry {
    std::string name;
    double lhs = 0.0;
    double rhs = 0.0;
    bool vacuous = false;

    double slack() const { return rhs - lhs; }
    bool pass(double tolerance) const { return vacuous || slack() >= -tolerance; }
};

struct BoundReport {
    double grad_norm = 0.0;
    double entropy = 0.0;
    double suboptimality = 0.0;
    double c_factor = 0.0;
    double c_lambda = 0.0;
    double c_d = 0.0;
    std::size_t optimal_set_size = 0;
    double bias_term = 0.0;
    std::vector<BoundEntry> inequalities;
};

/// ||grad V(D)|| <= 2 H(pi).
BoundReport check_prop1_gradient_entropy_bound(const TokenMdp& mdp, const SoftmaxPolicy& policy);

/// V*(s_0) - V(s_0) <= ||grad V(D)|| / C(s_0), with
/// C(s_0) = max over optimal responses of prod_t pi(a_t|s_t) / (sqrt(H) |D|).
/// Vacuous when C underflows to 0.
BoundReport check_prop1_suboptimality(const TokenMdp& mdp, const SoftmaxPolicy& policy, int query);

struct SoftOptimal {
    SoftmaxPolicy policy;   ///< logits Q_lambda / lambda
    ValueTables tables;     ///< tables of that policy at the same lambda
};

/// Log-sum-exp backward induction for the entropy-regularized optimum.
SoftOptimal soft_optimal_policy(const TokenMdp& mdp, double lambda);

/// V*(s_0) - V(s_0) <= ||grad V_lambda(D)||^2 / (2 lambda C_lambda) + bias.
BoundReport check_prop2_bound(const TokenMdp& mdp, const SoftmaxPolicy& policy, int query,
                              double lambda);

struct PerformanceDifference {
    double lhs = 0.0;  ///< V^a(s_0) - V^b(s_0)
    double rhs = 0.0;  ///< E_a[sum_t A^b_t(s_t, a_t)]
    bool pass = false; ///< |lhs - rhs| <= 1e-9
};

PerformanceDifference check_performance_difference(const TokenMdp& mdp, const SoftmaxPolicy& policy_a,
                                                   const SoftmaxPolicy& policy_b, int query);

/// max over enumerated (t, s) of |sum_a pi(a|s) A_{t,lambda}(s, a)|.
double max_advantage_mean(const ValueTables& tables);

/// Central finite differences of `objective` over every stored logit.
LogitGradient finite_difference_gradient(const SoftmaxPolicy& policy,
                                         const std::function<double(const SoftmaxPolicy&)>& objective,
                                         double step = 1e-5);

/// V(D) + lambda H(pi), the objective whose gradient exact_policy_gradient returns.
double regularized_objective(const TokenMdp& mdp, const SoftmaxPolicy& policy, double lambda);

/// Entries below `floor` in magnitude are compared against `floor`, which makes
/// the check absolute (floor * tolerance) near zero.
inline constexpr double kRelativeErrorFloor = 1e-4;

/// max over entries of |a - b| / max(|a|, |b|, floor).
double max_relative_error(const LogitGradient& a, const LogitGradient& b,
                          double floor = kRelativeErrorFloor);

/// `steps` iterations of theta += learn_rate * grad V_lambda(D), exact gradient.
SoftmaxPolicy exact_gradient_ascent(const TokenMdp& mdp, SoftmaxPolicy policy, double lambda,
                                    int steps, double learn_rate);

// ---------------------------------------------------------------------------
// Audit driver
// ---------------------------------------------------------------------------

struct AuditRow {
    std::uint64_t instance_id = 0;
    std::string inequality_name;
    double lhs = 0.0;
    double rhs = 0.0;
    double slack = 0.0;
    bool pass = false;
    bool vacuous = false;
};

struct AuditOptions {
    RandomMdpSpec mdp;
    double logit_stddev = 1.5;
    double lambda = 0.1;
    int ascent_steps = 500;         ///< exact-gradient ascent before the two suboptimality checks
    double ascent_learn_rate = 1.0;
    /// Test hook: scale the exact gradient before comparing it with finite
    /// differences. 1 leaves it untouched.
    double gradient_corruption = 1.0;
};

/// Every check on one random instance: gradient vs finite differences at
/// lambda = 0 and lambda = options.lambda, entropy gradient vs finite
/// differences, advantage zero-mean, the gradient-entropy bound, both
/// suboptimality bounds, and the performance-difference identity. Bound checks report the worst query.
std::vector<AuditRow> audit_instance(std::uint64_t instance_id, std::mt19937_64& rng,
                                     const AuditOptions& options);

inline constexpr std::size_t kAuditChecksPerInstance = 8;

}  // namespace aent
