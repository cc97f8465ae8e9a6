#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "aent/experiments.h"

using namespace aent;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("aent_experiments_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

ExperimentMatrix tiny_matrix(const fs::path& out) {
    auto m = ExperimentMatrix::toy_defaults();
    m.base.task.action_count = 200;
    m.base.task.n_suboptimal = 10;
    m.base.train.steps = 15;
    m.base.train.group_size = 8;
    m.base.n_seeds = 2;
    m.base.output_dir = out;
    m.n_optimal = {2, 1};
    m.overrides.clear();
    return m;
}

}  // namespace

TEST_CASE("config parsing sets values, sections and overrides") {
    std::istringstream in(R"(
# comment
[task]
action_count = 300
n_optimal = 3
n_suboptimal = 20
elevated = independent
[train]
steps = 7
learn_rate = 0.5
optimizer = sgd
clamp_p = 0.9
normalization = mean_only
[scheduler]
lambda = 0.003
[run]
n_seeds = 4
base_seed = 17
variant = entropy
[matrix]
n_optimal = 3, 2
variants = none, clamped
clear_overrides = true
[override clamped 2]
scheduler.lambda = 0.01
train.clamp_p = 0.5
[grid]
variant = clamped
n_optimal = 2
objective = auc
scheduler.lambda = 0.001, 0.002
train.clamp_p = 0.9,0.95,0.99
)");
    const auto cfg = parse_config(in);
    const auto& b = cfg.matrix.base;
    CHECK(b.task.action_count == 300);
    CHECK(b.task.elevated == ElevatedSet::independent);
    CHECK(b.train.steps == 7);
    CHECK(b.train.learn_rate == 0.5);
    CHECK(b.train.optimizer == OptimizerKind::sgd);
    CHECK(b.train.clamp.p == 0.9);
    CHECK(b.train.normalization == AdvantageNormalization::mean_only);
    CHECK(b.train.scheduler.lambda == 0.003);
    CHECK(b.n_seeds == 4);
    CHECK(b.base_seed == 17);
    CHECK(b.variant == Variant::entropy);
    CHECK(cfg.matrix.n_optimal == std::vector<int>{3, 2});
    CHECK(cfg.matrix.variants == std::vector<Variant>{Variant::none, Variant::clamped});
    REQUIRE(cfg.matrix.overrides.size() == 1);

    const auto cell = cfg.matrix.cell_config(Variant::clamped, 2);
    CHECK(cell.train.scheduler.lambda == 0.01);
    CHECK(cell.train.clamp.p == 0.5);
    CHECK(cell.task.n_optimal == 2);
    const auto other = cfg.matrix.cell_config(Variant::clamped, 3);
    CHECK(other.train.scheduler.lambda == 0.003);

    CHECK(cfg.grid.variant == Variant::clamped);
    CHECK(cfg.grid.objective == "auc");
    REQUIRE(cfg.grid.axes.size() == 2);
    CHECK(cfg.grid.axes[1].second == std::vector<std::string>{"0.9", "0.95", "0.99"});
}

TEST_CASE("config errors") {
    auto parse = [](const char* text) {
        std::istringstream in(text);
        return parse_config(in);
    };
    CHECK_THROWS_AS(parse("[train]\nno_such_key = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse("[bogus]\nx = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse("[train]\nsteps = many\n"), ConfigError);
    CHECK_THROWS_AS(parse("[train]\nclamp_p = 1.5\n"), ConfigError);
    CHECK_THROWS_AS(parse("[override nobody 5]\ntrain.steps = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse("[task]\naction_count = 10\nn_optimal = 20\n"), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/aent.ini"), ConfigError);

    RunConfig cfg;
    CHECK_THROWS_AS(set_config_value(cfg, "train.nope", "1"), ConfigError);
    CHECK_NOTHROW(set_config_value(cfg, "train.steps", "12"));
    CHECK(cfg.train.steps == 12);
    for (const auto& key : config_keys()) CHECK(key.find('.') != std::string::npos);
}

TEST_CASE("empty config reproduces the toy defaults") {
    std::istringstream in("");
    const auto cfg = parse_config(in);
    const auto def = ExperimentMatrix::toy_defaults();
    CHECK(cfg.matrix.base.train.learn_rate == 0.02);
    CHECK(cfg.matrix.base.train.group_size == 64);
    CHECK(cfg.matrix.base.task.action_count == 100000);
    CHECK(cfg.matrix.base.n_seeds == 20);
    CHECK(cfg.matrix.n_optimal == def.n_optimal);
    CHECK(cfg.matrix.overrides.size() == def.overrides.size());
    CHECK(def.cell_config(Variant::entropy, 1).train.scheduler.lambda == 0.0007);
    CHECK(def.cell_config(Variant::entropy, 15).train.scheduler.lambda == 0.0005);
    CHECK(def.cell_config(Variant::clamped, 1).train.clamp.p == 0.997);
    CHECK(def.cell_config(Variant::clamped, 5).train.clamp.p == 0.985);
    CHECK(def.cell_config(Variant::clamped, 10).train.clamp.p == 0.98);
    CHECK(def.cell_config(Variant::clamped, 10).train.scheduler.lambda == 0.0008);
}

TEST_CASE("seeds are distinct across runs and paired across variants") {
    std::set<std::uint64_t> seen;
    for (Variant v : all_variants()) {
        for (int n : {15, 10, 5, 1}) {
            for (int i = 0; i < 20; ++i) CHECK(seen.insert(run_seed(0, v, n, i)).second);
        }
    }
    CHECK(run_seed(0, Variant::none, 5, 3) == run_seed(0, Variant::none, 5, 3));
    CHECK(run_seed(1, Variant::none, 5, 3) != run_seed(0, Variant::none, 5, 3));
    CHECK(task_seed(0, 5, 3) != task_seed(0, 5, 4));
    CHECK(task_seed(0, 5, 3) != task_seed(0, 1, 3));
}

TEST_CASE("format_double round-trips") {
    for (double x : {0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0, 0.2 + 0.1}) {
        CHECK(std::stod(format_double(x)) == x);
    }
    CHECK(format_double(0.5) == "0.5");
}

TEST_CASE("curve and finals CSV round trips are exact") {
    const auto dir = scratch_dir("csv");
    std::vector<StepRecord> recs(3);
    for (int i = 0; i < 3; ++i) {
        recs[i].step = i;
        recs[i].mean_return = 0.1 * i + 1.0 / 3.0;
        recs[i].entropy_token_mean = std::exp(-i);
        recs[i].entropy_traj_sum = 2 * std::exp(-i);
        recs[i].clamped_entropy = 0.5 / (i + 1);
        recs[i].lambda = 0.0008;
        recs[i].grad_norm = std::sqrt(i + 2.0);
    }
    write_curve_csv(dir / "c.csv", recs);
    CHECK(slurp(dir / "c.csv").rfind(std::string(kCurveHeader) + "\n", 0) == 0);
    const auto back = read_curve_csv(dir / "c.csv");
    REQUIRE(back.size() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(back[i].step == recs[i].step);
        CHECK(back[i].mean_return == recs[i].mean_return);
        CHECK(back[i].entropy_token_mean == recs[i].entropy_token_mean);
        CHECK(back[i].clamped_entropy == recs[i].clamped_entropy);
        CHECK(back[i].grad_norm == recs[i].grad_norm);
    }

    std::vector<FinalRow> finals{{"none", 5, 0, 11, 0.2, true},
                                 {"none", 5, 1, 12, 1.0 / 7.0, true},
                                 {"clamped", 5, 0, 13, 0.9, true},
                                 {"clamped", 5, 1, 14, 0.0, false}};
    write_finals_csv(dir / "f.csv", finals);
    const auto fb = read_finals_csv(dir / "f.csv");
    REQUIRE(fb.size() == 4);
    CHECK(fb[1].final_return == finals[1].final_return);
    CHECK(fb[3].ok == false);
    CHECK(fb[2].run_seed == 13);

    // Re-aggregating the written finals reproduces the summary exactly.
    const auto summary = summarize(finals);
    write_summary_csv(dir / "s.csv", summary);
    const auto sb = read_summary_csv(dir / "s.csv");
    const auto again = summarize(fb);
    REQUIRE(sb.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(sb[i].mean == again[i].mean);
        CHECK(sb[i].stderr_ == again[i].stderr_);
        CHECK(sb[i].n_failed == again[i].n_failed);
    }
    CHECK(summary[0].variant == "none");
    CHECK(summary[0].mean == (0.2 + 1.0 / 7.0) / 2);
    CHECK(summary[0].stderr_ == doctest::Approx(std::abs(0.2 - 1.0 / 7.0) / 2));
    CHECK(summary[1].n_seeds == 1);
    CHECK(summary[1].n_failed == 1);
    fs::remove_all(dir);
}

TEST_CASE("tiny toy matrix is deterministic and worker-count independent") {
    const auto d1 = scratch_dir("toy1");
    const auto d2 = scratch_dir("toy2");
    const auto r1 = cmd_reproduce_toy(tiny_matrix(d1), 1);
    const auto r2 = cmd_reproduce_toy(tiny_matrix(d2), 3);
    CHECK(r1.failed_runs == 0);
    CHECK(r1.finals.size() == 4 * 2 * 2);
    CHECK(r1.summary.size() == 4 * 2);
    CHECK(slurp(d1 / "finals.csv") == slurp(d2 / "finals.csv"));
    CHECK(slurp(d1 / "summary.csv") == slurp(d2 / "summary.csv"));
    CHECK(slurp(d1 / "curves" / "clamped_nopt2_seed1.csv") == slurp(d2 / "curves" / "clamped_nopt2_seed1.csv"));
    CHECK(read_curve_csv(d1 / "curves" / "none_nopt1_seed0.csv").size() == 15);
    for (const auto& f : r1.finals) {
        CHECK(f.final_return >= 0.0);
        CHECK(f.final_return <= 1.0);
    }
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST_CASE("single runs match the matrix cell") {
    const auto dir = scratch_dir("train");
    auto m = tiny_matrix(dir);
    const auto cell = m.cell_config(Variant::clamped, 2);
    const auto a = execute_run(cell, 1);
    const auto b = execute_run(cell, 1);
    CHECK(a.error.empty());
    CHECK(a.final_return == b.final_return);
    CHECK(a.records.size() == 15);
    CHECK(curve_auc(a.records) >= 0.0);

    auto one = cell;
    one.output_dir = dir / "single";
    const auto t = cmd_train(one);
    CHECK(t.error.empty());
    CHECK(fs::exists(dir / "single" / "curve.csv"));
    CHECK(fs::exists(dir / "single" / "policy.bin"));
    fs::remove_all(dir);
}

TEST_CASE("failed runs are recorded, not fatal") {
    const auto dir = scratch_dir("fail");
    auto m = tiny_matrix(dir);
    m.base.train.learn_rate = 1e308;
    m.base.train.optimizer = OptimizerKind::adam;
    m.variants = {Variant::none};
    m.n_optimal = {2};
    const auto r = cmd_reproduce_toy(m, 1);
    CHECK(r.failed_runs == 2);
    CHECK(r.summary.at(0).n_failed == 2);
    fs::remove_all(dir);
}

TEST_CASE("audit command") {
    const auto dir = scratch_dir("audit");
    const auto none = cmd_audit(0, 1, AuditOptions{}, dir / "empty.csv", 1);
    CHECK(none.rows.empty());
    CHECK(slurp(dir / "empty.csv") == std::string(kAuditHeader) + "\n");

    const auto a = cmd_audit(4, 1, AuditOptions{}, dir / "a.csv", 1);
    const auto b = cmd_audit(4, 1, AuditOptions{}, dir / "b.csv", 2);
    CHECK(a.rows.size() == 4 * kAuditChecksPerInstance);
    CHECK(a.failures == 0);
    CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
    fs::remove_all(dir);
}

TEST_CASE("grid search over one point equals the single configuration") {
    const auto dir = scratch_dir("grid");
    auto m = tiny_matrix(dir);
    GridSpec g;
    g.variant = Variant::clamped;
    g.n_optimal = 2;
    g.axes = {{"scheduler.lambda", {"0.0008"}}};
    const auto pts = cmd_grid_search(m, g, 1);
    REQUIRE(pts.size() == 1);
    CHECK(pts[0].label() == "scheduler.lambda=0.0008");
    CHECK(pts[0].n_seeds == 2);

    auto cell = m.cell_config(Variant::clamped, 2);
    cell.train.scheduler.lambda = 0.0008;
    const double expect = (execute_run(cell, 0).final_return + execute_run(cell, 1).final_return) / 2;
    CHECK(pts[0].mean == doctest::Approx(expect).epsilon(1e-15));
    CHECK(fs::exists(dir / "grid.csv"));

    g.axes = {{"scheduler.lambda", {"0.0", "0.05"}}, {"train.clamp_p", {"0.5", "0.9"}}};
    const auto four = cmd_grid_search(m, g, 2);
    CHECK(four.size() == 4);
    for (std::size_t i = 1; i < four.size(); ++i) CHECK(four[i - 1].mean >= four[i].mean);
    fs::remove_all(dir);
}

TEST_CASE("worker resolution") {
    CHECK(resolve_workers(3) >= 1);
    CHECK(resolve_workers(std::nullopt) >= 1);
}
