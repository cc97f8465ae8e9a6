#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "aent/token_state.h"

namespace aent {

// ---------------------------------------------------------------------------
// Clamping configuration
// ---------------------------------------------------------------------------

/// How the retained token set A(s) is chosen.
///   count: the ceil((1 - p) |A|) most probable tokens.
///   mass:  the smallest prefix of the probability-sorted tokens whose mass
///          reaches 1 - p (nucleus-style; kept for ablations).
enum class ClampMode { count, mass };

struct ClampConfig {
    double p = 0.0;  ///< clamping percentage in [0, 1)
    ClampMode mode = ClampMode::count;

    /// Throws std::invalid_argument when p is outside [0, 1).
    void validate() const;
};

/// Number of tokens kept by count-mode clamping, always in [1, action_count].
std::size_t retained_count(double p, std::size_t action_count);

// ---------------------------------------------------------------------------
// Tabular policy
// ---------------------------------------------------------------------------

/// Tabular softmax policy pi(a|s) = exp(theta[s,a]) / sum_b exp(theta[s,b]).
///
/// Rows are created lazily: each distinct TokenState gets a dense row index
/// the first time ensure_row() sees it. Read-only queries on states that have
/// no row yet fall back to the row initializer without storing anything, so a
/// const policy can be shared across sampling threads.
class SoftmaxPolicy {
public:
    /// Fills a fresh logit row for a state. Must be a pure function of the state.
    using RowInitializer = std::function<void(const TokenState&, std::span<double>)>;

    explicit SoftmaxPolicy(int action_count, RowInitializer initializer = {});

    int action_count() const { return action_count_; }
    std::size_t state_count() const { return states_.size(); }

    std::optional<std::size_t> find(const TokenState& state) const;
    std::size_t ensure_row(const TokenState& state);
    const TokenState& state(std::size_t row) const { return states_[row]; }

    std::span<const double> row(std::size_t index) const;
    std::span<double> row(std::size_t index);

    /// Stored row for `state`, or the initializer's row written into `scratch`.
    std::span<const double> logits(const TokenState& state, std::vector<double>& scratch) const;

    /// Replaces (creating if needed) the row of `state`. Rejects non-finite logits.
    void set_row(const TokenState& state, std::span<const double> logits);

    /// Whole logit table, row-major in row-index order.
    std::span<const double> table() const { return logits_; }
    std::span<double> table() { return logits_; }

    /// Throws std::domain_error if any stored logit is NaN or infinite.
    void check_finite() const;

private:
    int action_count_;
    RowInitializer initializer_;
    std::vector<TokenState> states_;
    std::unordered_map<TokenState, std::size_t, TokenStateHash> index_;
    std::vector<double> logits_;
};

// ---------------------------------------------------------------------------
// Row-level math
// ---------------------------------------------------------------------------

double log_sum_exp(std::span<const double> values);

/// Max-subtracted softmax.
std::vector<double> softmax(std::span<const double> logits);

/// log softmax, exact for saturated rows (no log of an underflowed probability).
std::vector<double> log_softmax(std::span<const double> logits);

/// Shannon entropy in nats of softmax(logits), using 0 log 0 = 0.
double entropy_of_logits(std::span<const double> logits);

/// Retained set A(s) ordered by decreasing probability; ties go to the lower index.
std::vector<int> clamped_set(std::span<const double> logits, const ClampConfig& clamp);

/// Re-normalized policy on a retained set.
struct ClampedDistribution {
    std::vector<int> actions;        ///< A(s), same order as clamped_set()
    std::vector<double> probs;       ///< pi~(a|s) for each retained action
    std::vector<double> log_probs;   ///< log pi~(a|s)

    double entropy() const;
};

ClampedDistribution clamped_softmax(std::span<const double> logits, std::span<const int> retained);
ClampedDistribution clamped_softmax(std::span<const double> logits, const ClampConfig& clamp);

/// d/dtheta of the clamped entropy with A(s) held fixed. Dense over the row;
/// zero outside the retained set.
std::vector<double> clamped_entropy_grad_row(std::span<const double> logits,
                                             std::span<const int> retained);

/// d/dtheta log pi(action | s) = e_action - pi(. | s).
std::vector<double> grad_log_prob_row(std::span<const double> logits, int action);

// ---------------------------------------------------------------------------
// State-level API
// ---------------------------------------------------------------------------

std::vector<double> probs(const SoftmaxPolicy& policy, const TokenState& state);
std::vector<int> clamped_set(const SoftmaxPolicy& policy, const TokenState& state,
                             const ClampConfig& clamp);
ClampedDistribution clamped_probs(const SoftmaxPolicy& policy, const TokenState& state,
                                  const ClampConfig& clamp);
double state_entropy(const SoftmaxPolicy& policy, const TokenState& state);
double clamped_state_entropy(const SoftmaxPolicy& policy, const TokenState& state,
                             const ClampConfig& clamp);
std::vector<double> grad_log_prob(const SoftmaxPolicy& policy, const TokenState& state,
                                  int action);
std::vector<double> clamped_entropy_grad(const SoftmaxPolicy& policy, const TokenState& state,
                                         const ClampConfig& clamp);

struct EntropyReport {
    double full_entropy = 0.0;      ///< mean of per-state full entropies
    double clamped_entropy = 0.0;   ///< mean of per-state clamped entropies
    std::size_t retained_count = 0; ///< |A(s)| of the last state examined
    std::vector<double> per_state;  ///< full entropy of each input state
};

EntropyReport entropy_report(const SoftmaxPolicy& policy, std::span<const TokenState> states,
                             const ClampConfig& clamp);

// ---------------------------------------------------------------------------
// Gradients over the logit table
// ---------------------------------------------------------------------------

/// Dense gradient with the same row layout as a SoftmaxPolicy.
class LogitGradient {
public:
    LogitGradient() = default;
    LogitGradient(std::size_t rows, int action_count)
        : rows_(rows), action_count_(action_count),
          values_(rows * static_cast<std::size_t>(action_count), 0.0) {}

    /// Zero gradient shaped like `policy`.
    static LogitGradient like(const SoftmaxPolicy& policy) {
        return LogitGradient(policy.state_count(), policy.action_count());
    }

    std::size_t rows() const { return rows_; }
    int action_count() const { return action_count_; }

    std::span<double> row(std::size_t r) {
        return {values_.data() + r * action_count_, static_cast<std::size_t>(action_count_)};
    }
    std::span<const double> row(std::size_t r) const {
        return {values_.data() + r * action_count_, static_cast<std::size_t>(action_count_)};
    }
    double& at(std::size_t r, int a) { return values_[r * action_count_ + a]; }
    double at(std::size_t r, int a) const { return values_[r * action_count_ + a]; }

    std::span<const double> values() const { return values_; }
    std::span<double> values() { return values_; }

    double norm() const;
    bool all_finite() const;

    /// this += scale * other (shapes must match).
    void add_scaled(const LogitGradient& other, double scale);

private:
    std::size_t rows_ = 0;
    int action_count_ = 0;
    std::vector<double> values_;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Binary checkpoint: u64 |A|, u64 state count, row-major f64 logits, then one
/// key per row (i64 query, u64 prefix length, i64 actions...). Native endianness.
void save_checkpoint(const SoftmaxPolicy& policy, const std::filesystem::path& path);
SoftmaxPolicy load_checkpoint(const std::filesystem::path& path);

}  // namespace aent
