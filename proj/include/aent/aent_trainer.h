#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "aent/softmax_policy.h"
#include "aent/surrogates.h"
#include "aent/token_mdp.h"

namespace aent {

/// Adaptive entropy coefficient: lambda is raised while the measured clamped
/// entropy sits below [h_low, h_high], lowered above it, and projected onto
/// [lambda_low, lambda_high].
struct CoefficientScheduler {
    double lambda = 0.002;
    double beta = 0.002;
    double h_low = 0.15;
    double h_high = 0.24;
    double lambda_low = 0.0006;
    double lambda_high = 0.009;
    int warmup_steps = 0;

    void validate() const;
};

/// New coefficient after observing entropy `h_measured` at global step `step`.
/// Steps before warmup_steps leave lambda unchanged.
double update_lambda(const CoefficientScheduler& sched, double h_measured, long step);

enum class OptimizerKind { sgd, adam };

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    int steps = 2000;            ///< global steps K
    int queries_per_batch = 1;
    int group_size = 64;         ///< rollouts per query
    int mini_epochs = 1;
    double learn_rate = 0.02;
    OptimizerKind optimizer = OptimizerKind::sgd;
    AdamConfig adam;
    ClampConfig clamp;
    ClipConfig clip;
    CoefficientScheduler scheduler;
    bool adaptive = false;       ///< apply update_lambda after each step
    AdvantageNormalization normalization = AdvantageNormalization::mean_std;
    Aggregation aggregation = Aggregation::token_mean;
    bool freeze_retained_set = false;  ///< use A(s) from sampling time in every mini-epoch
    int entropy_ema_window = 0;  ///< 0: raw batch entropy drives lambda
    std::uint64_t seed = 0;
    int checkpoint_every = 0;    ///< 0 disables checkpoints
    std::filesystem::path checkpoint_dir;

    void validate() const;
};

struct StepRecord {
    long step = 0;
    double mean_return = 0.0;
    double entropy_token_mean = 0.0;  ///< mean full entropy over visited states
    double entropy_traj_sum = 0.0;    ///< per-trajectory sum of state entropies, averaged
    double clamped_entropy = 0.0;     ///< token-mean clamped entropy (drives lambda)
    double lambda = 0.0;              ///< coefficient used at this step
    double grad_norm = 0.0;           ///< surrogate gradient norm, last mini-epoch
    double wall_seconds = 0.0;
};

struct TrainResult {
    SoftmaxPolicy policy;
    std::vector<StepRecord> records;
};

/// Thrown when a surrogate gradient or the updated logits turn non-finite. Carries the records
/// completed so far and a description of the failing step.
class TrainingAborted : public std::runtime_error {
public:
    TrainingAborted(const std::string& what, std::vector<StepRecord> records)
        : std::runtime_error(what), records_(std::move(records)) {}
    const std::vector<StepRecord>& records() const { return records_; }

private:
    std::vector<StepRecord> records_;
};

/// Runs the sample / optimize / adjust-lambda loop for cfg.steps global steps.
/// Results depend only on the inputs and cfg.seed.
TrainResult train(const TokenMdp& mdp, SoftmaxPolicy policy, const TrainConfig& cfg);

enum class Variant { none, entropy, clamped, clamped_adaptive };

std::string_view to_string(Variant v);
std::optional<Variant> parse_variant(std::string_view name);
const std::vector<Variant>& all_variants();

/// Specializes `cfg` for a variant. Only the entropy bonus differs:
///   none:             lambda pinned to 0.
///   entropy:          full entropy (p = 0), fixed lambda.
///   clamped:          clamped entropy, fixed lambda.
///   clamped_adaptive: clamped entropy, lambda adapted each step.
TrainConfig variant_config(Variant variant, TrainConfig cfg);

TrainResult run_variant(const TokenMdp& mdp, SoftmaxPolicy policy, Variant variant,
                        const TrainConfig& cfg);

}  // namespace aent
