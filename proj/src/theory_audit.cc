#include "aent/theory_audit.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <utility>

namespace aent {

double QueryTables::advantage(std::size_t node, int a) const {
    const std::size_t n = probs.size() / tree.nodes.size();
    return q[node * n + a] - v[node];
}

double QueryTables::reg_advantage(std::size_t node, int a, double lambda) const {
    const std::size_t n = probs.size() / tree.nodes.size();
    return q_reg[node * n + a] - lambda * log_probs[node * n + a] - v_reg[node];
}

ValueTables ValueTables::compute(const TokenMdp& mdp, const SoftmaxPolicy& policy, double lambda) {
    mdp.require_enumerable("ValueTables::compute");
    ValueTables out;
    out.lambda = lambda;
    out.action_count = mdp.action_count();
    const std::size_t n = static_cast<std::size_t>(mdp.action_count());
    std::vector<double> scratch;
    for (int query = 0; query < mdp.query_count(); ++query) {
        QueryTables qt;
        qt.tree = ExactTree::build(mdp, query);
        const std::size_t nodes = qt.tree.nodes.size();
        qt.reach.assign(nodes, 0.0);
        qt.probs.resize(nodes * n);
        qt.log_probs.resize(nodes * n);
        for (std::size_t i = 0; i < nodes; ++i) {
            const auto logits = policy.logits(qt.tree.nodes[i].state, scratch);
            const auto lp = log_softmax(logits);
            const auto p = softmax(logits);
            std::copy(lp.begin(), lp.end(), qt.log_probs.begin() + i * n);
            std::copy(p.begin(), p.end(), qt.probs.begin() + i * n);
        }
        // Parents precede children in breadth-first order.
        qt.reach[0] = 1.0;
        for (std::size_t i = 1; i < nodes; ++i) {
            const auto& node = qt.tree.nodes[i];
            qt.reach[i] = qt.reach[node.parent] * qt.probs[node.parent * n + node.via_action];
        }
        qt.v.assign(nodes, 0.0);
        qt.v_reg.assign(nodes, 0.0);
        qt.q.assign(nodes * n, 0.0);
        qt.q_reg.assign(nodes * n, 0.0);
        for (std::size_t i = nodes; i-- > 0;) {
            const auto& state = qt.tree.nodes[i].state;
            double v = 0.0, v_reg = 0.0;
            for (std::size_t a = 0; a < n; ++a) {
                const double r = mdp.reward(state, static_cast<int>(a));
                double q = r, q_reg = r;
                if (!qt.tree.is_leaf_level(i)) {
                    const std::size_t c = qt.tree.child(i, static_cast<int>(a));
                    q += qt.v[c];
                    q_reg += qt.v_reg[c];
                }
                qt.q[i * n + a] = q;
                qt.q_reg[i * n + a] = q_reg;
                const double p = qt.probs[i * n + a];
                if (p > 0.0) {
                    v += p * q;
                    v_reg += p * (q_reg - lambda * qt.log_probs[i * n + a]);
                }
            }
            qt.v[i] = v;
            qt.v_reg[i] = v_reg;
        }
        out.queries.push_back(std::move(qt));
    }
    return out;
}

double ValueTables::value() const {
    double s = 0.0;
    for (const auto& q : queries) s += q.v[0];
    return s / static_cast<double>(queries.size());
}

double ValueTables::reg_value() const {
    double s = 0.0;
    for (const auto& q : queries) s += q.v_reg[0];
    return s / static_cast<double>(queries.size());
}

double ValueTables::entropy() const {
    const std::size_t n = static_cast<std::size_t>(action_count);
    double total = 0.0;
    for (const auto& qt : queries) {
        for (std::size_t i = 0; i < qt.tree.nodes.size(); ++i) {
            double h = 0.0;
            for (std::size_t a = 0; a < n; ++a) {
                const double p = qt.probs[i * n + a];
                if (p > 0.0) h -= p * qt.log_probs[i * n + a];
            }
            total += qt.reach[i] * h;
        }
    }
    return total / static_cast<double>(queries.size());
}

namespace {

std::size_t require_row(const SoftmaxPolicy& policy, const TokenState& s) {
    auto r = policy.find(s);
    if (!r) throw std::invalid_argument("exact gradient needs a policy row for every reachable state");
    return *r;
}

// Calls fn(node path, actions) for every action sequence from the query root.
template <typename Fn>
void for_each_sequence(const ExactTree& tree, Fn&& fn) {
    const int h = tree.horizon;
    std::vector<int> actions(h, 0);
    std::vector<std::size_t> path(h, 0);
    while (true) {
        for (int t = 1; t < h; ++t) path[t] = tree.child(path[t - 1], actions[t - 1]);
        fn(std::as_const(path), std::as_const(actions));
        int t = h - 1;
        while (t >= 0 && ++actions[t] == tree.action_count) actions[t--] = 0;
        if (t < 0) break;
    }
}

double sequence_return(const TokenMdp& mdp, const ExactTree& tree, const std::vector<std::size_t>& path,
                       const std::vector<int>& actions) {
    double g = 0.0;
    for (std::size_t t = 0; t < actions.size(); ++t) g += mdp.reward(tree.nodes[path[t]].state, actions[t]);
    return g;
}

double euclidean(const LogitGradient& g) { return g.norm(); }

}  // namespace

LogitGradient exact_policy_gradient(const TokenMdp& mdp, const SoftmaxPolicy& policy, double lambda) {
    const auto tables = ValueTables::compute(mdp, policy, lambda);
    auto grad = LogitGradient::like(policy);
    const double inv_d = 1.0 / mdp.query_count();
    const int n = mdp.action_count();
    for (const auto& qt : tables.queries) {
        for (std::size_t i = 0; i < qt.tree.nodes.size(); ++i) {
            const std::size_t r = require_row(policy, qt.tree.nodes[i].state);
            auto out = grad.row(r);
            for (int a = 0; a < n; ++a) {
                const double p = qt.probs[i * n + a];
                if (p == 0.0) continue;
                out[a] += inv_d * qt.reach[i] * p * qt.reg_advantage(i, a, lambda);
            }
        }
    }
    return grad;
}

double exact_entropy(const TokenMdp& mdp, const SoftmaxPolicy& policy) {
    return ValueTables::compute(mdp, policy, 0.0).entropy();
}

EntropyAndGradient exact_entropy_and_grad(const TokenMdp& mdp, const SoftmaxPolicy& policy) {
    mdp.require_enumerable("exact_entropy_and_grad");
    EntropyAndGradient out;
    out.gradient = LogitGradient::like(policy);
    const double inv_d = 1.0 / mdp.query_count();
    const int n = mdp.action_count();
    std::vector<double> scratch;
    for (int query = 0; query < mdp.query_count(); ++query) {
        const auto tree = ExactTree::build(mdp, query);
        std::vector<std::vector<double>> lp(tree.nodes.size());
        std::vector<std::size_t> rows(tree.nodes.size());
        for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
            lp[i] = log_softmax(policy.logits(tree.nodes[i].state, scratch));
            rows[i] = require_row(policy, tree.nodes[i].state);
        }
        // Coefficient c on grad log pi(a|s) = e_a - pi(.|s): collect the e_a
        // part per (node, action) and the pi part per node.
        std::vector<double> point(tree.nodes.size() * n, 0.0);
        std::vector<double> total(tree.nodes.size(), 0.0);
        std::vector<double> tail(tree.horizon + 1);
        for_each_sequence(tree, [&](const std::vector<std::size_t>& path, const std::vector<int>& actions) {
            const int h = tree.horizon;
            double log_prob = 0.0;
            tail[h] = 0.0;
            for (int t = h; t-- > 0;) {
                const double l = lp[path[t]][actions[t]];
                tail[t] = tail[t + 1] + l;
                log_prob += l;
            }
            const double prob = std::exp(log_prob);
            if (prob == 0.0) return;
            out.entropy -= inv_d * prob * log_prob;
            for (int t = 0; t < h; ++t) {
                const double c = -inv_d * prob * tail[t];
                point[path[t] * n + actions[t]] += c;
                total[path[t]] += c;
            }
        });
        for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
            auto g = out.gradient.row(rows[i]);
            for (int a = 0; a < n; ++a) g[a] += point[i * n + a] - total[i] * std::exp(lp[i][a]);
        }
    }
    return out;
}

OptimalResponses optimal_response_set(const TokenMdp& mdp, int query) {
    mdp.require_enumerable("optimal_response_set");
    const auto tree = ExactTree::build(mdp, query);
    std::vector<double> returns;
    std::vector<std::vector<int>> seqs;
    double best = -std::numeric_limits<double>::infinity();
    for_each_sequence(tree, [&](const std::vector<std::size_t>& path, const std::vector<int>& actions) {
        const double g = sequence_return(mdp, tree, path, actions);
        best = std::max(best, g);
        returns.push_back(g);
        seqs.push_back(actions);
    });
    OptimalResponses out;
    out.value = best;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        if (returns[i] >= best - kOptimalityTolerance) out.sequences.push_back(std::move(seqs[i]));
    }
    return out;
}

BoundReport check_prop1_gradient_entropy_bound(const TokenMdp& mdp, const SoftmaxPolicy& policy) {
    BoundReport rep;
    rep.grad_norm = euclidean(exact_policy_gradient(mdp, policy, 0.0));
    rep.entropy = exact_entropy(mdp, policy);
    rep.inequalities.push_back(BoundEntry{"gradient_entropy_bound", rep.grad_norm, 2.0 * rep.entropy, false});
    return rep;
}

BoundReport check_prop1_suboptimality(const TokenMdp& mdp, const SoftmaxPolicy& policy, int query) {
    BoundReport rep;
    rep.grad_norm = euclidean(exact_policy_gradient(mdp, policy, 0.0));
    rep.entropy = exact_entropy(mdp, policy);
    const auto opt = optimal_response_set(mdp, query);
    rep.optimal_set_size = opt.sequences.size();
    rep.suboptimality = opt.value - exact_value(mdp, policy, query);

    const auto tree = ExactTree::build(mdp, query);
    std::vector<double> scratch;
    double best = 0.0;
    for (const auto& seq : opt.sequences) {
        double log_prob = 0.0;
        std::size_t node = 0;
        for (std::size_t t = 0; t < seq.size(); ++t) {
            const auto lp = log_softmax(policy.logits(tree.nodes[node].state, scratch));
            log_prob += lp[seq[t]];
            if (t + 1 < seq.size()) node = tree.child(node, seq[t]);
        }
        best = std::max(best, std::exp(log_prob));
    }
    rep.c_factor = best / (std::sqrt(static_cast<double>(mdp.horizon())) * mdp.query_count());

    BoundEntry e{"suboptimality_bound", rep.suboptimality, 0.0, false};
    if (rep.c_factor > 0.0) {
        e.rhs = rep.grad_norm / rep.c_factor;
        e.vacuous = !std::isfinite(e.rhs);
    } else {
        e.rhs = std::numeric_limits<double>::infinity();
        e.vacuous = true;
    }
    rep.inequalities.push_back(e);
    return rep;
}

SoftOptimal soft_optimal_policy(const TokenMdp& mdp, double lambda) {
    if (!(lambda > 0.0)) throw std::invalid_argument("soft-optimal policy needs lambda > 0");
    mdp.require_enumerable("soft_optimal_policy");
    const int n = mdp.action_count();
    SoftmaxPolicy policy(n);
    for (int query = 0; query < mdp.query_count(); ++query) {
        const auto tree = ExactTree::build(mdp, query);
        std::vector<double> v(tree.nodes.size(), 0.0);
        std::vector<std::vector<double>> rows(tree.nodes.size());
        for (std::size_t i = tree.nodes.size(); i-- > 0;) {
            std::vector<double> scaled(n);
            for (int a = 0; a < n; ++a) {
                double q = mdp.reward(tree.nodes[i].state, a);
                if (!tree.is_leaf_level(i)) q += v[tree.child(i, a)];
                scaled[a] = q / lambda;
            }
            const double lse = log_sum_exp(scaled);
            v[i] = lambda * lse;
            for (double& x : scaled) x -= lse;
            rows[i] = std::move(scaled);
        }
        for (std::size_t i = 0; i < tree.nodes.size(); ++i) policy.set_row(tree.nodes[i].state, rows[i]);
    }
    auto tables = ValueTables::compute(mdp, policy, lambda);
    return SoftOptimal{std::move(policy), std::move(tables)};
}

BoundReport check_prop2_bound(const TokenMdp& mdp, const SoftmaxPolicy& policy, int query,
                              double lambda) {
    if (!(lambda > 0.0)) throw std::invalid_argument("regularized bound needs lambda > 0");
    BoundReport rep;
    rep.grad_norm = euclidean(exact_policy_gradient(mdp, policy, lambda));
    rep.entropy = exact_entropy(mdp, policy);
    const auto opt = optimal_response_set(mdp, query);
    rep.optimal_set_size = opt.sequences.size();
    rep.suboptimality = opt.value - exact_value(mdp, policy, query);

    const auto own = ValueTables::compute(mdp, policy, lambda);
    const auto soft = soft_optimal_policy(mdp, lambda);
    const auto& mine = own.queries[query];
    const auto& star = soft.tables.queries[query];
    const std::size_t nodes = mine.tree.nodes.size();
    const std::size_t n = static_cast<std::size_t>(mdp.action_count());
    rep.c_d = 1.0 / std::sqrt(static_cast<double>(nodes));

    double m = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < nodes; ++i) {
        if (!(star.reach[i] > 1e-300)) continue;
        const double p_min = *std::min_element(mine.probs.begin() + i * n, mine.probs.begin() + (i + 1) * n);
        const double x = mine.reach[i] / mdp.query_count() * p_min;
        m = std::min(m, x * x / star.reach[i]);
    }
    rep.c_lambda = rep.c_d * rep.c_d * m;

    const double h = mdp.horizon();
    rep.bias_term = lambda * (h * std::log(static_cast<double>(n)) -
                              std::log(static_cast<double>(rep.optimal_set_size)));

    BoundEntry e{"regularized_suboptimality_bound", rep.suboptimality, 0.0, false};
    if (rep.c_lambda > 0.0) {
        e.rhs = rep.grad_norm * rep.grad_norm / (2.0 * lambda * rep.c_lambda) + rep.bias_term;
        e.vacuous = !std::isfinite(e.rhs);
    } else {
        e.rhs = std::numeric_limits<double>::infinity();
        e.vacuous = true;
    }
    rep.inequalities.push_back(e);
    return rep;
}

PerformanceDifference check_performance_difference(const TokenMdp& mdp, const SoftmaxPolicy& policy_a,
                                                   const SoftmaxPolicy& policy_b, int query) {
    const auto ta = ValueTables::compute(mdp, policy_a, 0.0);
    const auto tb = ValueTables::compute(mdp, policy_b, 0.0);
    const auto& a = ta.queries[query];
    const auto& b = tb.queries[query];
    const int n = mdp.action_count();
    PerformanceDifference out;
    out.lhs = a.v[0] - b.v[0];
    for (std::size_t i = 0; i < a.tree.nodes.size(); ++i) {
        for (int act = 0; act < n; ++act) {
            const double p = a.probs[i * n + act];
            if (p > 0.0) out.rhs += a.reach[i] * p * b.advantage(i, act);
        }
    }
    out.pass = std::abs(out.lhs - out.rhs) <= 1e-9;
    return out;
}

double max_advantage_mean(const ValueTables& tables) {
    const int n = tables.action_count;
    double worst = 0.0;
    for (const auto& qt : tables.queries) {
        for (std::size_t i = 0; i < qt.tree.nodes.size(); ++i) {
            double s = 0.0;
            for (int a = 0; a < n; ++a) {
                const double p = qt.probs[i * n + a];
                if (p > 0.0) s += p * qt.reg_advantage(i, a, tables.lambda);
            }
            worst = std::max(worst, std::abs(s));
        }
    }
    return worst;
}

LogitGradient finite_difference_gradient(const SoftmaxPolicy& policy,
                                         const std::function<double(const SoftmaxPolicy&)>& objective,
                                         double step) {
    SoftmaxPolicy probe = policy;
    auto grad = LogitGradient::like(policy);
    auto theta = probe.table();
    auto out = grad.values();
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double saved = theta[i];
        theta[i] = saved + step;
        const double up = objective(probe);
        theta[i] = saved - step;
        const double down = objective(probe);
        theta[i] = saved;
        out[i] = (up - down) / (2.0 * step);
    }
    return grad;
}

double regularized_objective(const TokenMdp& mdp, const SoftmaxPolicy& policy, double lambda) {
    const double v = exact_value(mdp, policy);
    return lambda == 0.0 ? v : v + lambda * exact_entropy(mdp, policy);
}

double max_relative_error(const LogitGradient& a, const LogitGradient& b, double floor) {
    if (a.values().size() != b.values().size()) throw std::invalid_argument("gradient shapes differ");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.values().size(); ++i) {
        const double x = a.values()[i], y = b.values()[i];
        const double scale = std::max({std::abs(x), std::abs(y), floor});
        worst = std::max(worst, std::abs(x - y) / scale);
    }
    return worst;
}

SoftmaxPolicy exact_gradient_ascent(const TokenMdp& mdp, SoftmaxPolicy policy, double lambda,
                                    int steps, double learn_rate) {
    materialize_rows(mdp, policy);
    for (int k = 0; k < steps; ++k) {
        const auto g = exact_policy_gradient(mdp, policy, lambda);
        auto theta = policy.table();
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] += learn_rate * g.values()[i];
    }
    return policy;
}

namespace {

AuditRow tolerance_row(std::uint64_t id, std::string name, double error, double tolerance) {
    AuditRow row{id, std::move(name), error, tolerance, tolerance - error, false, false};
    row.pass = error <= tolerance;
    return row;
}

// Worst (lowest slack) non-vacuous query, or the first vacuous one when all are.
template <typename Check>
AuditRow worst_query(std::uint64_t id, const TokenMdp& mdp, Check&& check) {
    std::optional<BoundEntry> worst;
    for (int q = 0; q < mdp.query_count(); ++q) {
        const BoundEntry e = check(q).inequalities.front();
        if (!worst || (worst->vacuous && !e.vacuous) ||
            (worst->vacuous == e.vacuous && e.slack() < worst->slack())) {
            worst = e;
        }
    }
    AuditRow row{id, worst->name, worst->lhs, worst->rhs, worst->slack(), false, worst->vacuous};
    row.pass = worst->pass(1e-7);
    return row;
}

}  // namespace

std::vector<AuditRow> audit_instance(std::uint64_t instance_id, std::mt19937_64& rng,
                                     const AuditOptions& options) {
    const TokenMdp mdp = random_token_mdp(options.mdp, rng);
    const SoftmaxPolicy policy = random_policy(mdp, options.logit_stddev, rng);
    const SoftmaxPolicy other = random_policy(mdp, options.logit_stddev, rng);
    const double lambda = options.lambda;
    std::vector<AuditRow> rows;

    for (double lam : {0.0, lambda}) {
        auto exact = exact_policy_gradient(mdp, policy, lam);
        for (double& x : exact.values()) x *= options.gradient_corruption;
        const auto fd = finite_difference_gradient(
            policy, [&](const SoftmaxPolicy& p) { return regularized_objective(mdp, p, lam); });
        rows.push_back(tolerance_row(instance_id, lam == 0.0 ? "gradient_fd" : "reg_gradient_fd",
                                     max_relative_error(exact, fd), 1e-5));
    }
    {
        auto eg = exact_entropy_and_grad(mdp, policy);
        for (double& x : eg.gradient.values()) x *= options.gradient_corruption;
        const auto fd =
            finite_difference_gradient(policy, [&](const SoftmaxPolicy& p) { return exact_entropy(mdp, p); });
        rows.push_back(tolerance_row(instance_id, "entropy_gradient_fd", max_relative_error(eg.gradient, fd), 1e-5));
    }
    rows.push_back(tolerance_row(instance_id, "advantage_zero_mean",
                                 max_advantage_mean(ValueTables::compute(mdp, policy, lambda)), 1e-10));
    {
        const auto e = check_prop1_gradient_entropy_bound(mdp, policy).inequalities.front();
        AuditRow row{instance_id, e.name, e.lhs, e.rhs, e.slack(), e.pass(1e-9), false};
        rows.push_back(row);
    }

    const SoftmaxPolicy ascended =
        exact_gradient_ascent(mdp, policy, 0.0, options.ascent_steps, options.ascent_learn_rate);
    rows.push_back(worst_query(instance_id, mdp,
                               [&](int q) { return check_prop1_suboptimality(mdp, ascended, q); }));
    const SoftmaxPolicy ascended_reg =
        exact_gradient_ascent(mdp, policy, lambda, options.ascent_steps, options.ascent_learn_rate);
    rows.push_back(worst_query(instance_id, mdp,
                               [&](int q) { return check_prop2_bound(mdp, ascended_reg, q, lambda); }));

    double residual = 0.0;
    for (int q = 0; q < mdp.query_count(); ++q) {
        const auto pd = check_performance_difference(mdp, policy, other, q);
        residual = std::max(residual, std::abs(pd.lhs - pd.rhs));
    }
    rows.push_back(tolerance_row(instance_id, "performance_difference", residual, 1e-9));
    return rows;
}

}  // namespace aent
