// aent_lab: toy reproduction, theory audit, grid search and single training runs.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aent/experiments.h"

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<int> workers;
    std::optional<int> steps;
    std::vector<std::string> sets;
};

aent::ConfigFile load(const Common& c) {
    aent::ConfigFile cfg;
    if (c.config.empty()) {
        cfg.matrix = aent::ExperimentMatrix::toy_defaults();
        cfg.grid.variant = cfg.matrix.base.variant;
        cfg.grid.n_optimal = cfg.matrix.base.task.n_optimal;
    } else {
        cfg = aent::load_config(c.config);
    }
    auto& base = cfg.matrix.base;
    for (const auto& s : c.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw aent::ConfigError("--set expects key=value, got '" + s + "'");
        aent::set_config_value(base, s.substr(0, eq), s.substr(eq + 1));
    }
    if (c.seed) base.base_seed = *c.seed;
    if (!c.out.empty()) base.output_dir = c.out;
    if (c.steps) base.train.steps = *c.steps;
    return cfg;
}

void print_summary(const std::vector<aent::SummaryRow>& rows) {
    std::cout << "variant            n_opt  seeds  mean_final_return  stderr\n";
    for (const auto& r : rows) {
        std::printf("%-18s %5d  %5d  %17.6f  %.6f%s\n", r.variant.c_str(), r.n_optimal, r.n_seeds, r.mean,
                    r.stderr_, r.n_failed ? "  (failed runs present)" : "");
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"AEnt token-MDP laboratory"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&common](CLI::App* sub) {
        sub->add_option("--config", common.config, "INI run config");
        sub->add_option("--seed", common.seed, "base seed");
        sub->add_option("--out", common.out, "output directory");
        sub->add_option("--workers", common.workers, "worker threads (AENT_LAB_WORKERS overrides)");
        sub->add_option("--steps", common.steps, "training steps per run");
        sub->add_option("--set", common.sets, "extra key=value config override (repeatable)");
    };

    auto* toy = app.add_subcommand("reproduce-toy", "run the sparse-optimality toy matrix");
    add_common(toy);

    auto* audit = app.add_subcommand("audit", "check the gradient identities and bounds on random MDPs");
    add_common(audit);
    std::size_t instances = 1000;
    aent::AuditOptions audit_options;
    audit->add_option("--instances", instances, "random instances");
    audit->add_option("--lambda", audit_options.lambda, "entropy coefficient for the regularized checks");
    audit->add_option("--ascent-steps", audit_options.ascent_steps, "exact-gradient ascent steps before bound checks");
    audit->add_option("--corrupt-gradient", audit_options.gradient_corruption,
                      "scale exact gradients before the finite-difference comparison (negative control)");

    auto* grid = app.add_subcommand("grid-search", "rank the points of the [grid] section");
    add_common(grid);
    std::string objective;
    grid->add_option("--objective", objective, "final_return or auc");

    auto* train = app.add_subcommand("train", "one training run");
    add_common(train);
    std::string variant_name;
    std::optional<int> n_optimal;
    train->add_option("--variant", variant_name, "none, entropy, clamped or clamped_adaptive");
    train->add_option("--n-optimal", n_optimal, "number of optimal actions");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const aent::ConfigFile cfg = load(common);
        const int workers = aent::resolve_workers(common.workers);

        if (*toy) {
            const auto report = aent::cmd_reproduce_toy(cfg.matrix, workers, &std::cerr);
            print_summary(report.summary);
            std::cout << "wrote " << (cfg.matrix.base.output_dir / "summary.csv").string() << '\n';
            return report.failed_runs == 0 ? 0 : 1;
        }
        if (*audit) {
            const auto csv = cfg.matrix.base.output_dir / "audit.csv";
            const auto report = aent::cmd_audit(instances, cfg.matrix.base.base_seed, audit_options, csv, workers);
            std::cout << report.rows.size() << " checks, " << report.failures << " failed, " << report.vacuous
                      << " vacuous; wrote " << csv.string() << '\n';
            return report.failures == 0 ? 0 : 1;
        }
        if (*grid) {
            aent::GridSpec spec = cfg.grid;
            if (!objective.empty()) spec.objective = objective;
            const auto points = aent::cmd_grid_search(cfg.matrix, spec, workers);
            for (std::size_t i = 0; i < points.size(); ++i) {
                std::printf("%3zu  %-40s  %.6f +- %.6f\n", i + 1, points[i].label().c_str(), points[i].mean,
                            points[i].stderr_);
            }
            for (const auto& p : points) {
                if (p.n_failed) return 1;
            }
            return 0;
        }
        if (*train) {
            aent::RunConfig run = cfg.matrix.base;
            if (!variant_name.empty()) {
                auto v = aent::parse_variant(variant_name);
                if (!v) throw aent::ConfigError("unknown variant '" + variant_name + "'");
                run.variant = *v;
            }
            if (n_optimal) run.task.n_optimal = *n_optimal;
            run = [&] {
                // Cell overrides (coefficient, clamping) apply to single runs too.
                aent::RunConfig r = cfg.matrix.cell_config(run.variant, run.task.n_optimal);
                r.train.steps = run.train.steps;
                r.base_seed = run.base_seed;
                r.output_dir = run.output_dir;
                return r;
            }();
            const auto r = aent::cmd_train(run);
            if (!r.error.empty()) {
                std::cerr << "training failed: " << r.error << '\n';
                return 1;
            }
            std::cout << "final_return " << aent::format_double(r.final_return) << "; wrote "
                      << (run.output_dir / "curve.csv").string() << '\n';
            return 0;
        }
    } catch (const aent::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
