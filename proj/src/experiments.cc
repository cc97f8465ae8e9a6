#include "aent/experiments.h"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>
#include <unordered_map>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace aent {

namespace {

std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) out.push_back(trim(cur));
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    const std::string s = trim(text);
    T value{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
        throw ConfigError("bad value for " + key + ": '" + text + "'");
    }
    return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
    const std::string s = trim(text);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("bad value for " + key + ": '" + text + "' (expected true or false)");
}

Variant parse_variant_or_throw(const std::string& key, const std::string& text) {
    auto v = parse_variant(trim(text));
    if (!v) throw ConfigError("bad value for " + key + ": unknown variant '" + text + "'");
    return *v;
}

template <typename Enum>
Enum parse_choice(const std::string& key, const std::string& text,
                  std::initializer_list<std::pair<const char*, Enum>> choices) {
    const std::string s = trim(text);
    for (const auto& [name, value] : choices) {
        if (s == name) return value;
    }
    std::string names;
    for (const auto& c : choices) names += std::string(names.empty() ? "" : ", ") + c.first;
    throw ConfigError("bad value for " + key + ": '" + text + "' (one of " + names + ")");
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

const std::vector<std::pair<std::string, Setter>>& setters() {
    static const std::vector<std::pair<std::string, Setter>> table = [] {
        std::vector<std::pair<std::string, Setter>> t;
        auto add = [&t](std::string key, Setter fn) { t.emplace_back(std::move(key), std::move(fn)); };
        auto as_int = [](const std::string& k, const std::string& v) { return parse_number<int>(k, v); };
        auto as_double = [](const std::string& k, const std::string& v) { return parse_number<double>(k, v); };

        add("task.action_count", [=](RunConfig& c, auto& k, auto& v) { c.task.action_count = as_int(k, v); });
        add("task.n_optimal", [=](RunConfig& c, auto& k, auto& v) { c.task.n_optimal = as_int(k, v); });
        add("task.n_suboptimal", [=](RunConfig& c, auto& k, auto& v) { c.task.n_suboptimal = as_int(k, v); });
        add("task.reward_optimal", [=](RunConfig& c, auto& k, auto& v) { c.task.reward_optimal = as_double(k, v); });
        add("task.reward_suboptimal",
            [=](RunConfig& c, auto& k, auto& v) { c.task.reward_suboptimal = as_double(k, v); });
        add("task.reward_other", [=](RunConfig& c, auto& k, auto& v) { c.task.reward_other = as_double(k, v); });
        add("task.horizon", [=](RunConfig& c, auto& k, auto& v) { c.task.horizon = as_int(k, v); });
        add("task.elevated_init_mean",
            [=](RunConfig& c, auto& k, auto& v) { c.task.elevated_init_mean = as_double(k, v); });
        add("task.base_init_mean", [=](RunConfig& c, auto& k, auto& v) { c.task.base_init_mean = as_double(k, v); });
        add("task.init_stddev", [=](RunConfig& c, auto& k, auto& v) { c.task.init_stddev = as_double(k, v); });
        add("task.elevated", [](RunConfig& c, auto& k, auto& v) {
            c.task.elevated = parse_choice<ElevatedSet>(
                k, v, {{"rewarded", ElevatedSet::rewarded}, {"independent", ElevatedSet::independent}});
        });

        add("train.steps", [=](RunConfig& c, auto& k, auto& v) { c.train.steps = as_int(k, v); });
        add("train.queries_per_batch",
            [=](RunConfig& c, auto& k, auto& v) { c.train.queries_per_batch = as_int(k, v); });
        add("train.group_size", [=](RunConfig& c, auto& k, auto& v) { c.train.group_size = as_int(k, v); });
        add("train.mini_epochs", [=](RunConfig& c, auto& k, auto& v) { c.train.mini_epochs = as_int(k, v); });
        add("train.learn_rate", [=](RunConfig& c, auto& k, auto& v) { c.train.learn_rate = as_double(k, v); });
        add("train.optimizer", [](RunConfig& c, auto& k, auto& v) {
            c.train.optimizer =
                parse_choice<OptimizerKind>(k, v, {{"sgd", OptimizerKind::sgd}, {"adam", OptimizerKind::adam}});
        });
        add("train.adam_beta1", [=](RunConfig& c, auto& k, auto& v) { c.train.adam.beta1 = as_double(k, v); });
        add("train.adam_beta2", [=](RunConfig& c, auto& k, auto& v) { c.train.adam.beta2 = as_double(k, v); });
        add("train.adam_eps", [=](RunConfig& c, auto& k, auto& v) { c.train.adam.eps = as_double(k, v); });
        add("train.clamp_p", [=](RunConfig& c, auto& k, auto& v) { c.train.clamp.p = as_double(k, v); });
        add("train.clamp_mode", [](RunConfig& c, auto& k, auto& v) {
            c.train.clamp.mode = parse_choice<ClampMode>(k, v, {{"count", ClampMode::count}, {"mass", ClampMode::mass}});
        });
        add("train.clip_low", [=](RunConfig& c, auto& k, auto& v) { c.train.clip.eps_low = as_double(k, v); });
        add("train.clip_high", [=](RunConfig& c, auto& k, auto& v) { c.train.clip.eps_high = as_double(k, v); });
        add("train.normalization", [](RunConfig& c, auto& k, auto& v) {
            c.train.normalization = parse_choice<AdvantageNormalization>(
                k, v, {{"mean_std", AdvantageNormalization::mean_std}, {"mean_only", AdvantageNormalization::mean_only}});
        });
        add("train.aggregation", [](RunConfig& c, auto& k, auto& v) {
            c.train.aggregation = parse_choice<Aggregation>(
                k, v, {{"token_mean", Aggregation::token_mean}, {"trajectory_sum", Aggregation::trajectory_sum}});
        });
        add("train.freeze_retained_set",
            [](RunConfig& c, auto& k, auto& v) { c.train.freeze_retained_set = parse_bool(k, v); });
        add("train.entropy_ema_window",
            [=](RunConfig& c, auto& k, auto& v) { c.train.entropy_ema_window = as_int(k, v); });
        add("train.checkpoint_every", [=](RunConfig& c, auto& k, auto& v) { c.train.checkpoint_every = as_int(k, v); });

        add("scheduler.lambda", [=](RunConfig& c, auto& k, auto& v) { c.train.scheduler.lambda = as_double(k, v); });
        add("scheduler.beta", [=](RunConfig& c, auto& k, auto& v) { c.train.scheduler.beta = as_double(k, v); });
        add("scheduler.h_low", [=](RunConfig& c, auto& k, auto& v) { c.train.scheduler.h_low = as_double(k, v); });
        add("scheduler.h_high", [=](RunConfig& c, auto& k, auto& v) { c.train.scheduler.h_high = as_double(k, v); });
        add("scheduler.lambda_low",
            [=](RunConfig& c, auto& k, auto& v) { c.train.scheduler.lambda_low = as_double(k, v); });
        add("scheduler.lambda_high",
            [=](RunConfig& c, auto& k, auto& v) { c.train.scheduler.lambda_high = as_double(k, v); });
        add("scheduler.warmup_steps",
            [=](RunConfig& c, auto& k, auto& v) { c.train.scheduler.warmup_steps = as_int(k, v); });

        add("run.variant", [](RunConfig& c, auto& k, auto& v) { c.variant = parse_variant_or_throw(k, v); });
        add("run.n_seeds", [=](RunConfig& c, auto& k, auto& v) { c.n_seeds = as_int(k, v); });
        add("run.base_seed",
            [](RunConfig& c, auto& k, auto& v) { c.base_seed = parse_number<std::uint64_t>(k, v); });
        add("run.output_dir", [](RunConfig& c, auto&, auto& v) { c.output_dir = trim(v); });
        return t;
    }();
    return table;
}

}  // namespace

void RunConfig::validate() const {
    if (n_seeds < 1) throw ConfigError("run.n_seeds must be at least 1");
    if (output_dir.empty()) throw ConfigError("run.output_dir must not be empty");
    try {
        task.validate();
        variant_config(variant, train).validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& [name, fn] : setters()) {
        if (name == key) {
            fn(cfg, key, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto& entry : setters()) k.push_back(entry.first);
        return k;
    }();
    return keys;
}

RunConfig ExperimentMatrix::cell_config(Variant variant, int n_optimal) const {
    RunConfig cfg = base;
    cfg.variant = variant;
    cfg.task.n_optimal = n_optimal;
    for (const auto& o : overrides) {
        if (o.variant != variant || o.n_optimal != n_optimal) continue;
        for (const auto& [k, v] : o.values) set_config_value(cfg, k, v);
    }
    return cfg;
}

void ExperimentMatrix::validate() const {
    if (n_optimal.empty()) throw ConfigError("matrix.n_optimal is empty");
    if (variants.empty()) throw ConfigError("matrix.variants is empty");
    for (const auto& o : overrides) {
        RunConfig scratch = base;
        for (const auto& [k, v] : o.values) set_config_value(scratch, k, v);
    }
    for (Variant v : variants) {
        for (int n : n_optimal) cell_config(v, n).validate();
    }
}

ExperimentMatrix ExperimentMatrix::toy_defaults() {
    ExperimentMatrix m;
    RunConfig& b = m.base;
    b.task = SyntheticTaskSpec{};
    b.train.steps = 2000;
    b.train.group_size = 64;
    b.train.queries_per_batch = 1;
    b.train.learn_rate = 0.02;
    b.train.optimizer = OptimizerKind::adam;
    b.train.scheduler.lambda = 0.0008;
    b.n_seeds = 20;

    struct Row {
        int n_opt;
        const char* entropy_lambda;
        const char* clamp_p;
    };
    for (const Row& r : {Row{15, "0.0005", "0.98"}, Row{10, "0.0005", "0.98"}, Row{5, "0.0005", "0.985"},
                         Row{1, "0.0007", "0.997"}}) {
        m.overrides.push_back(CellOverride{Variant::entropy, r.n_opt, {{"scheduler.lambda", r.entropy_lambda}}});
        for (Variant v : {Variant::clamped, Variant::clamped_adaptive}) {
            m.overrides.push_back(
                CellOverride{v, r.n_opt, {{"scheduler.lambda", "0.0008"}, {"train.clamp_p", r.clamp_p}}});
        }
    }
    return m;
}

void GridSpec::validate() const {
    if (axes.empty()) throw ConfigError("grid has no axes");
    if (objective != "final_return" && objective != "auc") {
        throw ConfigError("grid.objective must be final_return or auc");
    }
    RunConfig scratch;
    for (const auto& [key, values] : axes) {
        if (values.empty()) throw ConfigError("grid axis " + key + " has no values");
        for (const auto& v : values) set_config_value(scratch, key, v);
    }
}

ConfigFile parse_config(std::istream& in) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    ConfigFile out;
    out.matrix = ExperimentMatrix::toy_defaults();
    bool grid_variant_set = false, grid_nopt_set = false;
    for (const auto& [section, body] : tree) {
        if (!body.data().empty()) throw ConfigError("config: key '" + section + "' outside a section");
        const auto words = split(section, ' ');
        std::vector<std::string> parts;
        for (const auto& w : words) {
            if (!w.empty()) parts.push_back(w);
        }
        if (parts.empty()) throw ConfigError("config: empty section name");
        const std::string& kind = parts[0];
        if (kind == "task" || kind == "train" || kind == "scheduler" || kind == "run") {
            if (parts.size() != 1) throw ConfigError("config: bad section [" + section + "]");
            for (const auto& [key, value] : body) set_config_value(out.matrix.base, kind + "." + key, value.data());
        } else if (kind == "matrix") {
            for (const auto& [key, value] : body) {
                if (key == "n_optimal") {
                    out.matrix.n_optimal.clear();
                    for (const auto& s : split(value.data(), ',')) {
                        out.matrix.n_optimal.push_back(parse_number<int>("matrix.n_optimal", s));
                    }
                } else if (key == "variants") {
                    out.matrix.variants.clear();
                    for (const auto& s : split(value.data(), ',')) {
                        out.matrix.variants.push_back(parse_variant_or_throw("matrix.variants", s));
                    }
                } else if (key == "clear_overrides") {
                    if (parse_bool("matrix.clear_overrides", value.data())) out.matrix.overrides.clear();
                } else {
                    throw ConfigError("unknown config key 'matrix." + key + "'");
                }
            }
        } else if (kind == "override") {
            if (parts.size() != 3) throw ConfigError("config: expected [override <variant> <n_optimal>]");
            CellOverride o{parse_variant_or_throw("override", parts[1]), parse_number<int>("override", parts[2]), {}};
            for (const auto& [key, value] : body) o.values.emplace_back(key, value.data());
            out.matrix.overrides.push_back(std::move(o));
        } else if (kind == "grid") {
            for (const auto& [key, value] : body) {
                if (key == "variant") {
                    out.grid.variant = parse_variant_or_throw("grid.variant", value.data());
                    grid_variant_set = true;
                } else if (key == "n_optimal") {
                    out.grid.n_optimal = parse_number<int>("grid.n_optimal", value.data());
                    grid_nopt_set = true;
                } else if (key == "objective") {
                    out.grid.objective = trim(value.data());
                } else {
                    out.grid.axes.emplace_back(key, split(value.data(), ','));
                }
            }
        } else {
            throw ConfigError("config: unknown section [" + section + "]");
        }
    }
    if (!grid_variant_set) out.grid.variant = out.matrix.base.variant;
    if (!grid_nopt_set) out.grid.n_optimal = out.matrix.base.task.n_optimal;
    out.matrix.validate();
    if (!out.grid.axes.empty()) out.grid.validate();
    return out;
}

ConfigFile load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    return parse_config(in);
}

// ---------------------------------------------------------------------------
// Seeds
// ---------------------------------------------------------------------------

namespace {

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t cell_hash(std::string_view tag, int n_optimal, int seed_index) {
    const std::string key = std::string(tag) + "|" + std::to_string(n_optimal) + "|" + std::to_string(seed_index);
    return derive_seed(fnv1a(key), 0);
}

}  // namespace

std::uint64_t run_seed(std::uint64_t base_seed, Variant variant, int n_optimal, int seed_index) {
    return base_seed ^ cell_hash(to_string(variant), n_optimal, seed_index);
}

std::uint64_t task_seed(std::uint64_t base_seed, int n_optimal, int seed_index) {
    return base_seed ^ cell_hash("task", n_optimal, seed_index);
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

RunOutcome execute_run(const RunConfig& cfg, int seed_index, SoftmaxPolicy* final_policy) {
    RunOutcome out;
    try {
        auto task = build_synthetic_task(cfg.task, task_seed(cfg.base_seed, cfg.task.n_optimal, seed_index));
        TrainConfig train = cfg.train;
        train.seed = run_seed(cfg.base_seed, cfg.variant, cfg.task.n_optimal, seed_index);
        auto result = run_variant(task.mdp, std::move(task.policy), cfg.variant, train);
        if (task.mdp.enumerable()) {
            out.final_return = exact_value(task.mdp, result.policy);
        } else {
            const std::size_t n = std::min<std::size_t>(100, result.records.size());
            double s = 0.0;
            for (std::size_t i = result.records.size() - n; i < result.records.size(); ++i) {
                s += result.records[i].mean_return;
            }
            out.final_return = n ? s / static_cast<double>(n) : 0.0;
        }
        out.records = std::move(result.records);
        if (final_policy) *final_policy = std::move(result.policy);
    } catch (const TrainingAborted& e) {
        out.records = e.records();
        out.error = e.what();
    } catch (const std::exception& e) {
        out.error = e.what();
    }
    return out;
}

double curve_auc(const std::vector<StepRecord>& records) {
    if (records.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : records) s += r.mean_return;
    return s / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

std::string format_double(double x) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

std::vector<std::vector<std::string>> read_rows(const std::filesystem::path& path, const char* header) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != header) {
        throw std::runtime_error(path.string() + ": unexpected header");
    }
    const std::size_t columns = split(header, ',').size();
    std::vector<std::vector<std::string>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = split(line, ',');
        if (cells.size() != columns) throw std::runtime_error(path.string() + ": ragged row");
        rows.push_back(std::move(cells));
    }
    return rows;
}

double cell_double(const std::string& s) {
    double x = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw std::runtime_error("bad number '" + s + "'");
    return x;
}

template <typename Int>
Int cell_int(const std::string& s) {
    Int x{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw std::runtime_error("bad integer '" + s + "'");
    return x;
}

}  // namespace

void write_curve_csv(const std::filesystem::path& path, const std::vector<StepRecord>& records) {
    auto out = open_out(path);
    out << kCurveHeader << '\n';
    for (const auto& r : records) {
        out << r.step << ',' << format_double(r.mean_return) << ',' << format_double(r.entropy_token_mean) << ','
            << format_double(r.entropy_traj_sum) << ',' << format_double(r.clamped_entropy) << ','
            << format_double(r.lambda) << ',' << format_double(r.grad_norm) << '\n';
    }
}

std::vector<StepRecord> read_curve_csv(const std::filesystem::path& path) {
    std::vector<StepRecord> out;
    for (const auto& c : read_rows(path, kCurveHeader)) {
        StepRecord r;
        r.step = cell_int<long>(c[0]);
        r.mean_return = cell_double(c[1]);
        r.entropy_token_mean = cell_double(c[2]);
        r.entropy_traj_sum = cell_double(c[3]);
        r.clamped_entropy = cell_double(c[4]);
        r.lambda = cell_double(c[5]);
        r.grad_norm = cell_double(c[6]);
        out.push_back(r);
    }
    return out;
}

std::vector<SummaryRow> summarize(const std::vector<FinalRow>& finals) {
    std::vector<SummaryRow> rows;
    std::vector<std::vector<double>> values;
    std::map<std::pair<std::string, int>, std::size_t> slot;
    for (const auto& f : finals) {
        auto [it, inserted] = slot.try_emplace({f.variant, f.n_optimal}, rows.size());
        if (inserted) {
            rows.push_back(SummaryRow{f.variant, f.n_optimal, 0, 0, 0.0, 0.0});
            values.emplace_back();
        }
        if (f.ok) {
            values[it->second].push_back(f.final_return);
        } else {
            ++rows[it->second].n_failed;
        }
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& v = values[i];
        const double n = static_cast<double>(v.size());
        rows[i].n_seeds = static_cast<int>(v.size());
        if (v.empty()) continue;
        double sum = 0.0;
        for (double x : v) sum += x;
        rows[i].mean = sum / n;
        if (v.size() > 1) {
            double ss = 0.0;
            for (double x : v) ss += (x - rows[i].mean) * (x - rows[i].mean);
            rows[i].stderr_ = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
        }
    }
    return rows;
}

void write_finals_csv(const std::filesystem::path& path, const std::vector<FinalRow>& rows) {
    auto out = open_out(path);
    out << kFinalsHeader << '\n';
    for (const auto& r : rows) {
        out << r.variant << ',' << r.n_optimal << ',' << r.seed_index << ',' << r.run_seed << ','
            << format_double(r.final_return) << ',' << (r.ok ? "ok" : "failed") << '\n';
    }
}

std::vector<FinalRow> read_finals_csv(const std::filesystem::path& path) {
    std::vector<FinalRow> out;
    for (const auto& c : read_rows(path, kFinalsHeader)) {
        out.push_back(FinalRow{c[0], cell_int<int>(c[1]), cell_int<int>(c[2]), cell_int<std::uint64_t>(c[3]),
                               cell_double(c[4]), c[5] == "ok"});
    }
    return out;
}

void write_summary_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows) {
    auto out = open_out(path);
    out << kSummaryHeader << '\n';
    for (const auto& r : rows) {
        out << r.variant << ',' << r.n_optimal << ',' << r.n_seeds << ',' << r.n_failed << ','
            << format_double(r.mean) << ',' << format_double(r.stderr_) << '\n';
    }
}

std::vector<SummaryRow> read_summary_csv(const std::filesystem::path& path) {
    std::vector<SummaryRow> out;
    for (const auto& c : read_rows(path, kSummaryHeader)) {
        out.push_back(SummaryRow{c[0], cell_int<int>(c[1]), cell_int<int>(c[2]), cell_int<int>(c[3]),
                                 cell_double(c[4]), cell_double(c[5])});
    }
    return out;
}

void write_audit_csv(const std::filesystem::path& path, const std::vector<AuditRow>& rows) {
    auto out = open_out(path);
    out << kAuditHeader << '\n';
    for (const auto& r : rows) {
        out << r.instance_id << ',' << r.inequality_name << ',' << format_double(r.lhs) << ','
            << format_double(r.rhs) << ',' << format_double(r.slack) << ',' << (r.pass ? 1 : 0) << ','
            << (r.vacuous ? 1 : 0) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

int resolve_workers(std::optional<int> requested) {
    if (const char* env = std::getenv("AENT_LAB_WORKERS"); env && *env) {
        int n = 0;
        const std::string s = env;
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
        if (ec != std::errc() || ptr != s.data() + s.size() || n < 1) {
            throw ConfigError("AENT_LAB_WORKERS must be a positive integer");
        }
        return n;
    }
    if (requested) {
        if (*requested < 1) throw ConfigError("--workers must be positive");
        return *requested;
    }
    return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

namespace {

/// Jobs run on `workers` threads; collect() only ever runs on the caller's
/// thread, so it may write files without locking.
template <typename Result>
void run_pool(std::size_t count, int workers, const std::function<Result(std::size_t)>& job,
              const std::function<void(std::size_t, Result&&)>& collect) {
    if (count == 0) return;
    const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), count);
    if (threads == 1) {
        for (std::size_t i = 0; i < count; ++i) collect(i, job(i));
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::condition_variable ready;
    std::deque<std::pair<std::size_t, Result>> done;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) {
                Result r = job(i);
                {
                    std::lock_guard lock(mu);
                    done.emplace_back(i, std::move(r));
                }
                ready.notify_one();
            }
        });
    }
    for (std::size_t received = 0; received < count; ++received) {
        std::unique_lock lock(mu);
        ready.wait(lock, [&] { return !done.empty(); });
        auto item = std::move(done.front());
        done.pop_front();
        lock.unlock();
        collect(item.first, std::move(item.second));
    }
    for (auto& th : pool) th.join();
}

}  // namespace

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

ToyReport cmd_reproduce_toy(const ExperimentMatrix& matrix, int workers, std::ostream* progress) {
    matrix.validate();
    struct Job {
        RunConfig cfg;
        int seed_index;
    };
    std::vector<Job> jobs;
    for (Variant v : matrix.variants) {
        for (int n : matrix.n_optimal) {
            const RunConfig cfg = matrix.cell_config(v, n);
            for (int s = 0; s < cfg.n_seeds; ++s) jobs.push_back(Job{cfg, s});
        }
    }
    const auto out_dir = matrix.base.output_dir;
    std::filesystem::create_directories(out_dir / "curves");

    ToyReport report;
    report.finals.resize(jobs.size());
    std::size_t finished = 0;
    run_pool<RunOutcome>(
        jobs.size(), workers, [&](std::size_t i) { return execute_run(jobs[i].cfg, jobs[i].seed_index); },
        [&](std::size_t i, RunOutcome&& r) {
            const auto& job = jobs[i];
            const std::string name = std::string(to_string(job.cfg.variant)) + "_nopt" +
                                     std::to_string(job.cfg.task.n_optimal) + "_seed" + std::to_string(job.seed_index);
            write_curve_csv(out_dir / "curves" / (name + ".csv"), r.records);
            report.finals[i] = FinalRow{std::string(to_string(job.cfg.variant)), job.cfg.task.n_optimal,
                                        job.seed_index,
                                        run_seed(job.cfg.base_seed, job.cfg.variant, job.cfg.task.n_optimal,
                                                 job.seed_index),
                                        r.final_return, r.error.empty()};
            ++finished;
            if (progress) {
                *progress << "[" << finished << "/" << jobs.size() << "] " << name;
                if (r.error.empty()) {
                    *progress << " final_return=" << format_double(r.final_return) << '\n';
                } else {
                    *progress << " FAILED: " << r.error << '\n';
                }
            }
        });
    for (const auto& f : report.finals) report.failed_runs += f.ok ? 0 : 1;
    report.summary = summarize(report.finals);
    write_finals_csv(out_dir / "finals.csv", report.finals);
    write_summary_csv(out_dir / "summary.csv", report.summary);
    return report;
}

AuditReport cmd_audit(std::size_t instances, std::uint64_t seed, const AuditOptions& options,
                      const std::filesystem::path& csv, int workers) {
    std::vector<std::vector<AuditRow>> per_instance(instances);
    run_pool<std::vector<AuditRow>>(
        instances, workers,
        [&](std::size_t i) {
            auto rng = make_stream(seed, i);
            return audit_instance(i, rng, options);
        },
        [&](std::size_t i, std::vector<AuditRow>&& rows) { per_instance[i] = std::move(rows); });
    AuditReport report;
    for (auto& rows : per_instance) {
        for (auto& r : rows) {
            if (r.vacuous) {
                ++report.vacuous;
            } else if (!r.pass) {
                ++report.failures;
            }
            report.rows.push_back(std::move(r));
        }
    }
    if (!csv.empty()) write_audit_csv(csv, report.rows);
    return report;
}

std::string GridPoint::label() const {
    std::string s;
    for (const auto& [k, v] : assignment) s += (s.empty() ? "" : ";") + k + "=" + v;
    return s;
}

std::vector<GridPoint> cmd_grid_search(const ExperimentMatrix& matrix, const GridSpec& grid, int workers) {
    grid.validate();
    // Cartesian product, last axis fastest.
    std::vector<GridPoint> points(1);
    for (const auto& [key, values] : grid.axes) {
        std::vector<GridPoint> next;
        for (const auto& p : points) {
            for (const auto& v : values) {
                GridPoint q = p;
                q.assignment.emplace_back(key, v);
                next.push_back(std::move(q));
            }
        }
        points = std::move(next);
    }
    std::vector<RunConfig> configs;
    for (const auto& p : points) {
        RunConfig cfg = matrix.cell_config(grid.variant, grid.n_optimal);
        for (const auto& [k, v] : p.assignment) set_config_value(cfg, k, v);
        cfg.validate();
        configs.push_back(std::move(cfg));
    }
    const int seeds = matrix.base.n_seeds;
    const std::size_t count = points.size() * static_cast<std::size_t>(seeds);
    std::vector<std::optional<double>> scores(count);
    const bool auc = grid.objective == "auc";
    run_pool<std::optional<double>>(
        count, workers,
        [&](std::size_t i) -> std::optional<double> {
            const auto r = execute_run(configs[i / seeds], static_cast<int>(i % seeds));
            if (!r.error.empty()) return std::nullopt;
            return auc ? curve_auc(r.records) : r.final_return;
        },
        [&](std::size_t i, std::optional<double>&& s) { scores[i] = s; });

    for (std::size_t p = 0; p < points.size(); ++p) {
        std::vector<FinalRow> rows;
        for (int s = 0; s < seeds; ++s) {
            const auto& v = scores[p * seeds + s];
            rows.push_back(FinalRow{"grid", 0, s, 0, v.value_or(0.0), v.has_value()});
        }
        const auto summary = summarize(rows).front();
        points[p].mean = summary.mean;
        points[p].stderr_ = summary.stderr_;
        points[p].n_seeds = summary.n_seeds;
        points[p].n_failed = summary.n_failed;
    }
    std::stable_sort(points.begin(), points.end(),
                     [](const GridPoint& a, const GridPoint& b) { return a.mean > b.mean; });

    auto out = open_out(matrix.base.output_dir / "grid.csv");
    out << kGridHeader << '\n';
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto& p = points[i];
        out << i + 1 << ',' << p.label() << ',' << format_double(p.mean) << ',' << format_double(p.stderr_) << ','
            << p.n_seeds << ',' << p.n_failed << '\n';
    }
    return points;
}

RunOutcome cmd_train(const RunConfig& cfg) {
    cfg.validate();
    SoftmaxPolicy policy(cfg.task.action_count);
    auto r = execute_run(cfg, 0, &policy);
    write_curve_csv(cfg.output_dir / "curve.csv", r.records);
    if (r.error.empty()) save_checkpoint(policy, cfg.output_dir / "policy.bin");
    return r;
}

}  // namespace aent
