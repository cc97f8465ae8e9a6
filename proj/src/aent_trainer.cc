#include "aent/aent_trainer.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

namespace aent {

void CoefficientScheduler::validate() const {
    if (!(beta > 0.0)) throw std::invalid_argument("coefficient learning rate beta must be positive");
    if (!(h_low < h_high)) throw std::invalid_argument("entropy band needs h_low < h_high");
    if (!(lambda_low <= lambda_high)) throw std::invalid_argument("coefficient box needs lambda_low <= lambda_high");
    if (lambda_low < 0.0) throw std::invalid_argument("coefficient box must be non-negative");
    if (warmup_steps < 0) throw std::invalid_argument("warmup_steps must be non-negative");
}

double update_lambda(const CoefficientScheduler& sched, double h_measured, long step) {
    if (step < sched.warmup_steps) return sched.lambda;
    const double raised = -sched.beta * std::min(h_measured - sched.h_low, 0.0);
    const double lowered = sched.beta * std::min(sched.h_high - h_measured, 0.0);
    return std::clamp(sched.lambda + raised + lowered, sched.lambda_low, sched.lambda_high);
}

void TrainConfig::validate() const {
    if (steps < 0) throw std::invalid_argument("steps must be non-negative");
    if (queries_per_batch <= 0 || group_size <= 0 || mini_epochs <= 0) {
        throw std::invalid_argument("batch counts and mini_epochs must be positive");
    }
    if (!(learn_rate > 0.0)) throw std::invalid_argument("learn_rate must be positive");
    if (entropy_ema_window < 0 || checkpoint_every < 0) {
        throw std::invalid_argument("entropy_ema_window and checkpoint_every must be non-negative");
    }
    clamp.validate();
    clip.validate();
    if (adaptive) {
        scheduler.validate();
    } else if (!(scheduler.lambda >= 0.0)) {
        throw std::invalid_argument("entropy coefficient must be non-negative");
    }
}

namespace {

class Optimizer {
public:
    explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

    void step(SoftmaxPolicy& policy, const LogitGradient& grad) {
        auto theta = policy.table();
        const auto g = grad.values();
        if (cfg_.optimizer == OptimizerKind::sgd) {
            for (std::size_t i = 0; i < g.size(); ++i) theta[i] += cfg_.learn_rate * g[i];
            return;
        }
        const auto& a = cfg_.adam;
        if (m_.size() < theta.size()) {
            m_.resize(theta.size(), 0.0);
            v_.resize(theta.size(), 0.0);
        }
        ++t_;
        const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < g.size(); ++i) {
            m_[i] = a.beta1 * m_[i] + (1.0 - a.beta1) * g[i];
            v_[i] = a.beta2 * v_[i] + (1.0 - a.beta2) * g[i] * g[i];
            theta[i] += cfg_.learn_rate * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + a.eps);
        }
    }

private:
    const TrainConfig& cfg_;
    std::vector<double> m_, v_;
    long t_ = 0;
};

TrajectoryBatch sample_batch(const TokenMdp& mdp, const SoftmaxPolicy& policy,
                             const TrainConfig& cfg, long step) {
    const std::uint64_t step_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(step));
    auto query_rng = make_stream(step_seed, 0);
    std::uniform_int_distribution<int> pick(0, mdp.query_count() - 1);

    RolloutSampler sampler(mdp, policy);
    TrajectoryBatch batch;
    batch.group_size = static_cast<std::size_t>(cfg.group_size);
    std::uint64_t index = 1;
    for (int g = 0; g < cfg.queries_per_batch; ++g) {
        const int query = pick(query_rng);
        for (int j = 0; j < cfg.group_size; ++j) {
            auto rng = make_stream(step_seed, index++);
            batch.trajectories.push_back(sampler.sample(query, rng));
        }
    }
    return batch;
}

}  // namespace

TrainResult train(const TokenMdp& mdp, SoftmaxPolicy policy, const TrainConfig& cfg) {
    cfg.validate();
    if (mdp.action_count() != policy.action_count()) {
        throw std::invalid_argument("policy and MDP disagree on |A|");
    }
    if (cfg.checkpoint_every > 0) std::filesystem::create_directories(cfg.checkpoint_dir);

    CoefficientScheduler sched = cfg.scheduler;
    Optimizer optimizer(cfg);
    std::vector<StepRecord> records;
    records.reserve(static_cast<std::size_t>(cfg.steps));
    std::optional<double> ema;
    // p small enough to keep every action: the clamped entropy is the full one.
    const bool keep_all = cfg.clamp.mode == ClampMode::count &&
                          retained_count(cfg.clamp.p, static_cast<std::size_t>(mdp.action_count())) ==
                              static_cast<std::size_t>(mdp.action_count());
    const double ema_alpha = cfg.entropy_ema_window > 0 ? 2.0 / (cfg.entropy_ema_window + 1.0) : 1.0;

    for (long k = 0; k < cfg.steps; ++k) {
        const auto started = std::chrono::steady_clock::now();
        // pi_b is the current policy; trajectories keep its log-probs.
        TrajectoryBatch batch = sample_batch(mdp, policy, cfg, k);

        StepRecord rec;
        rec.step = k;
        rec.lambda = sched.lambda;
        std::vector<std::size_t> visited;
        for (const auto& tr : batch.trajectories) {
            rec.mean_return += tr.total_return();
            for (std::size_t t = 0; t < tr.actions.size(); ++t) {
                visited.push_back(policy.ensure_row(tr.state_at(t)));
            }
        }
        rec.mean_return /= static_cast<double>(batch.trajectories.size());

        // Entropies of pi_b at the visited states; each distinct row once.
        {
            std::unordered_map<std::size_t, std::pair<double, double>> cache;
            double full_sum = 0.0, clamped_sum = 0.0;
            for (std::size_t r : visited) {
                auto it = cache.find(r);
                if (it == cache.end()) {
                    const auto logits = policy.row(r);
                    const double full = entropy_of_logits(logits);
                    it = cache.emplace(r, std::make_pair(full, keep_all ? full : clamped_softmax(logits, cfg.clamp).entropy()))
                             .first;
                }
                full_sum += it->second.first;
                clamped_sum += it->second.second;
            }
            const double steps = static_cast<double>(std::max<std::size_t>(visited.size(), 1));
            rec.entropy_token_mean = full_sum / steps;
            rec.entropy_traj_sum = full_sum / static_cast<double>(batch.trajectories.size());
            rec.clamped_entropy = clamped_sum / steps;
        }

        const auto advantages = grpo_advantages(batch.grouped_returns(), cfg.normalization);
        std::optional<RetainedSets> frozen;
        if (cfg.freeze_retained_set) frozen = capture_retained_sets(policy, batch, cfg.clamp);

        for (int epoch = 0; epoch < cfg.mini_epochs; ++epoch) {
            // A zero coefficient skips the bonus entirely, so lambda = 0 runs
            // are bit-identical to the plain GRPO surrogate.
            SurrogateEval eval =
                sched.lambda > 0.0
                    ? aent_objective(policy, batch, advantages, cfg.clip, cfg.clamp, sched.lambda,
                                     cfg.aggregation, frozen ? &*frozen : nullptr)
                    : ppo_clip_objective(policy, batch, advantages, cfg.clip, cfg.aggregation);
            if (!eval.gradient.all_finite()) {
                std::ostringstream msg;
                msg << "non-finite surrogate gradient at step " << k << ", mini-epoch " << epoch
                    << " (lambda " << sched.lambda << ", mean return " << rec.mean_return << ")";
                records.push_back(rec);
                throw TrainingAborted(msg.str(), std::move(records));
            }
            rec.grad_norm = eval.gradient.norm();
            optimizer.step(policy, eval.gradient);
            const auto theta = policy.table();
            if (!std::all_of(theta.begin(), theta.end(), [](double x) { return std::isfinite(x); })) {
                std::ostringstream msg;
                msg << "non-finite logits after step " << k << ", mini-epoch " << epoch
                    << " (learn rate " << cfg.learn_rate << ")";
                records.push_back(rec);
                throw TrainingAborted(msg.str(), std::move(records));
            }
        }

        if (cfg.adaptive) {
            ema = ema ? *ema + ema_alpha * (rec.clamped_entropy - *ema) : rec.clamped_entropy;
            sched.lambda = update_lambda(sched, *ema, k);
        }

        if (cfg.checkpoint_every > 0 && (k + 1) % cfg.checkpoint_every == 0) {
            save_checkpoint(policy, cfg.checkpoint_dir / ("policy_step" + std::to_string(k + 1) + ".bin"));
        }
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        records.push_back(rec);
    }
    return TrainResult{std::move(policy), std::move(records)};
}

std::string_view to_string(Variant v) {
    switch (v) {
        case Variant::none: return "none";
        case Variant::entropy: return "entropy";
        case Variant::clamped: return "clamped";
        case Variant::clamped_adaptive: return "clamped_adaptive";
    }
    return "unknown";
}

std::optional<Variant> parse_variant(std::string_view name) {
    for (Variant v : all_variants()) {
        if (to_string(v) == name) return v;
    }
    return std::nullopt;
}

const std::vector<Variant>& all_variants() {
    static const std::vector<Variant> variants{Variant::none, Variant::entropy, Variant::clamped,
                                               Variant::clamped_adaptive};
    return variants;
}

TrainConfig variant_config(Variant variant, TrainConfig cfg) {
    switch (variant) {
        case Variant::none:
            cfg.adaptive = false;
            cfg.scheduler.lambda = 0.0;
            cfg.scheduler.lambda_low = 0.0;
            cfg.scheduler.lambda_high = 0.0;
            break;
        case Variant::entropy:
            cfg.adaptive = false;
            cfg.clamp.p = 0.0;
            cfg.clamp.mode = ClampMode::count;
            break;
        case Variant::clamped:
            cfg.adaptive = false;
            break;
        case Variant::clamped_adaptive:
            cfg.adaptive = true;
            break;
    }
    return cfg;
}

TrainResult run_variant(const TokenMdp& mdp, SoftmaxPolicy policy, Variant variant,
                        const TrainConfig& cfg) {
    return train(mdp, std::move(policy), variant_config(variant, cfg));
}

}  // namespace aent
