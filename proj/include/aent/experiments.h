#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "aent/aent_trainer.h"
#include "aent/theory_audit.h"
#include "aent/token_mdp.h"

namespace aent {

/// Bad config file, unknown key, or unparsable value. The CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    SyntheticTaskSpec task;
    TrainConfig train;
    Variant variant = Variant::clamped;
    int n_seeds = 20;
    std::uint64_t base_seed = 0;
    std::filesystem::path output_dir = "aent_out";

    void validate() const;
};

/// Sets one "section.key" value (e.g. "scheduler.lambda", "task.n_optimal").
/// Throws ConfigError on an unknown key or a malformed value.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

/// Every key accepted by set_config_value, in documentation order.
const std::vector<std::string>& config_keys();

struct CellOverride {
    Variant variant;
    int n_optimal;
    std::vector<std::pair<std::string, std::string>> values;
};

struct ExperimentMatrix {
    RunConfig base;
    std::vector<int> n_optimal{15, 10, 5, 1};
    std::vector<Variant> variants = all_variants();
    /// Applied in order after `base`, when variant and n_optimal match.
    std::vector<CellOverride> overrides;

    RunConfig cell_config(Variant variant, int n_optimal) const;
    void validate() const;

    /// Toy defaults: lr 0.02, batch 64, |A| = 1e5, 500 suboptimal actions,
    /// 20 seeds, and the per-n_optimal coefficient and clamping table.
    static ExperimentMatrix toy_defaults();
};

struct GridSpec {
    Variant variant = Variant::clamped;
    int n_optimal = 5;
    /// Cartesian product over these keys.
    std::vector<std::pair<std::string, std::vector<std::string>>> axes;
    std::string objective = "final_return";  ///< or "auc"

    void validate() const;
};

/// Parsed config file: matrix (its base holds [task], [train], [scheduler],
/// [run]), optional [grid].
struct ConfigFile {
    ExperimentMatrix matrix;
    GridSpec grid;
};

/// INI with sections [task], [train], [scheduler], [run], [matrix], [grid] and
/// [override <variant> <n_optimal>]. Missing keys keep the toy defaults.
ConfigFile load_config(const std::filesystem::path& path);
ConfigFile parse_config(std::istream& in);

// ---------------------------------------------------------------------------
// Seeds
// ---------------------------------------------------------------------------

/// Training stream of one run: base_seed xor a hash of (variant, n_optimal, seed_index).
std::uint64_t run_seed(std::uint64_t base_seed, Variant variant, int n_optimal, int seed_index);
/// Task and initial logits of one run; shared by every variant so the
/// comparison between variants is paired.
std::uint64_t task_seed(std::uint64_t base_seed, int n_optimal, int seed_index);

// ---------------------------------------------------------------------------
// Runs and CSV output
// ---------------------------------------------------------------------------

struct RunOutcome {
    std::vector<StepRecord> records;
    double final_return = 0.0;
    std::string error;  ///< empty on success
};

/// Builds the task for (cfg.task, seed_index), trains, and scores the final
/// policy by its exact expected return (mean return of the last 100 steps when
/// the task is too large to enumerate).
RunOutcome execute_run(const RunConfig& cfg, int seed_index, SoftmaxPolicy* final_policy = nullptr);

/// Mean of return_mean over all steps.
double curve_auc(const std::vector<StepRecord>& records);

inline constexpr const char* kCurveHeader =
    "step,return_mean,entropy_token_mean,entropy_traj_sum,clamped_entropy,lambda,grad_norm";
inline constexpr const char* kFinalsHeader = "variant,n_optimal,seed_index,run_seed,final_return,status";
inline constexpr const char* kSummaryHeader =
    "variant,n_optimal,n_seeds,n_failed,mean_final_return,stderr_final_return";
inline constexpr const char* kAuditHeader = "instance_id,inequality_name,lhs,rhs,slack,pass,vacuous";
inline constexpr const char* kGridHeader = "rank,point,mean_objective,stderr_objective,n_seeds,n_failed";

/// Shortest decimal form that parses back to the same double.
std::string format_double(double x);

void write_curve_csv(const std::filesystem::path& path, const std::vector<StepRecord>& records);
std::vector<StepRecord> read_curve_csv(const std::filesystem::path& path);

struct FinalRow {
    std::string variant;
    int n_optimal = 0;
    int seed_index = 0;
    std::uint64_t run_seed = 0;
    double final_return = 0.0;
    bool ok = true;
};

struct SummaryRow {
    std::string variant;
    int n_optimal = 0;
    int n_seeds = 0;
    int n_failed = 0;
    double mean = 0.0;
    double stderr_ = 0.0;  ///< sample std / sqrt(n); 0 for n < 2
};

/// Groups finals by (variant, n_optimal) in first-appearance order.
std::vector<SummaryRow> summarize(const std::vector<FinalRow>& finals);

void write_finals_csv(const std::filesystem::path& path, const std::vector<FinalRow>& rows);
std::vector<FinalRow> read_finals_csv(const std::filesystem::path& path);
void write_summary_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows);
std::vector<SummaryRow> read_summary_csv(const std::filesystem::path& path);

void write_audit_csv(const std::filesystem::path& path, const std::vector<AuditRow>& rows);

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// AENT_LAB_WORKERS if set, else `requested`, else hardware concurrency.
int resolve_workers(std::optional<int> requested);

struct ToyReport {
    std::vector<FinalRow> finals;
    std::vector<SummaryRow> summary;
    std::size_t failed_runs = 0;
};

/// Every (variant, n_optimal, seed) run of the matrix. Writes
/// out/curves/<variant>_nopt<n>_seed<i>.csv, out/finals.csv and out/summary.csv.
ToyReport cmd_reproduce_toy(const ExperimentMatrix& matrix, int workers,
                            std::ostream* progress = nullptr);

struct AuditReport {
    std::vector<AuditRow> rows;
    std::size_t failures = 0;        ///< non-vacuous rows that failed
    std::size_t vacuous = 0;
};

/// `instances` random instances, instance i drawn from make_stream(seed, i).
/// Writes the rows to `csv` unless it is empty.
AuditReport cmd_audit(std::size_t instances, std::uint64_t seed, const AuditOptions& options,
                      const std::filesystem::path& csv, int workers);

struct GridPoint {
    std::vector<std::pair<std::string, std::string>> assignment;
    double mean = 0.0;
    double stderr_ = 0.0;
    int n_seeds = 0;
    int n_failed = 0;

    std::string label() const;  ///< "key=value;key=value"
};

/// Evaluates each grid point with base.n_seeds runs and ranks by mean
/// objective, best first (ties keep grid order). Writes out/grid.csv.
std::vector<GridPoint> cmd_grid_search(const ExperimentMatrix& matrix, const GridSpec& grid, int workers);

/// One run of matrix.base (its variant and task) at seed index 0; writes
/// out/curve.csv and out/policy.bin.
RunOutcome cmd_train(const RunConfig& cfg);

}  // namespace aent
