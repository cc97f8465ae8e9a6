#include "aent/softmax_policy.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace aent {

void ClampConfig::validate() const {
    if (!(p >= 0.0 && p < 1.0)) {
        throw std::invalid_argument("clamping percentage p must lie in [0, 1), got " +
                                    std::to_string(p));
    }
}

std::size_t retained_count(double p, std::size_t action_count) {
    // (1 - 0.98) * 1e5 evaluates to 2000.0000000000018; the slack keeps the
    // count at the intended integer.
    const double raw = (1.0 - p) * static_cast<double>(action_count);
    const auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
    return std::clamp<std::size_t>(k, 1, action_count);
}

// ---------------------------------------------------------------------------
// SoftmaxPolicy
// ---------------------------------------------------------------------------

SoftmaxPolicy::SoftmaxPolicy(int action_count, RowInitializer initializer)
    : action_count_(action_count), initializer_(std::move(initializer)) {
    if (action_count <= 0) throw std::invalid_argument("action_count must be positive");
}

std::optional<std::size_t> SoftmaxPolicy::find(const TokenState& state) const {
    auto it = index_.find(state);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::size_t SoftmaxPolicy::ensure_row(const TokenState& state) {
    if (auto found = find(state)) return *found;
    const std::size_t r = states_.size();
    states_.push_back(state);
    index_.emplace(state, r);
    logits_.resize(logits_.size() + action_count_, 0.0);
    if (initializer_) {
        initializer_(state, row(r));
        for (double v : row(r)) {
            if (!std::isfinite(v)) throw std::domain_error("row initializer produced a non-finite logit");
        }
    }
    return r;
}

std::span<const double> SoftmaxPolicy::row(std::size_t index) const {
    return {logits_.data() + index * action_count_, static_cast<std::size_t>(action_count_)};
}

std::span<double> SoftmaxPolicy::row(std::size_t index) {
    return {logits_.data() + index * action_count_, static_cast<std::size_t>(action_count_)};
}

std::span<const double> SoftmaxPolicy::logits(const TokenState& state,
                                              std::vector<double>& scratch) const {
    if (auto r = find(state)) return row(*r);
    scratch.assign(action_count_, 0.0);
    if (initializer_) initializer_(state, scratch);
    return scratch;
}

void SoftmaxPolicy::set_row(const TokenState& state, std::span<const double> values) {
    if (values.size() != static_cast<std::size_t>(action_count_)) {
        throw std::invalid_argument("logit row has wrong length");
    }
    for (double v : values) {
        if (!std::isfinite(v)) throw std::domain_error("logit rows must be finite");
    }
    const std::size_t r = ensure_row(state);
    std::copy(values.begin(), values.end(), row(r).begin());
}

void SoftmaxPolicy::check_finite() const {
    for (double v : logits_) {
        if (!std::isfinite(v)) throw std::domain_error("policy holds a non-finite logit");
    }
}

// ---------------------------------------------------------------------------
// Row math
// ---------------------------------------------------------------------------

double log_sum_exp(std::span<const double> values) {
    if (values.empty()) return -std::numeric_limits<double>::infinity();
    const double m = *std::max_element(values.begin(), values.end());
    double sum = 0.0;
    for (double v : values) sum += std::exp(v - m);
    return m + std::log(sum);
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> out(logits.size());
    if (logits.empty()) return out;
    const double m = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

std::vector<double> log_softmax(std::span<const double> logits) {
    const double lse = log_sum_exp(logits);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

namespace {

// q log q with the 0 log 0 = 0 convention; log q is taken from the exact
// log-softmax, clamped at log(1e-300) for saturated entries.
constexpr double kLogFloor = -690.7755278982137;  // log(1e-300)

double plogp(double q, double log_q) {
    if (q <= 0.0) return 0.0;
    return q * std::max(log_q, kLogFloor);
}

bool ranks_before(std::span<const double> logits, int a, int b) {
    if (logits[a] != logits[b]) return logits[a] > logits[b];
    return a < b;
}

}  // namespace

double entropy_of_logits(std::span<const double> logits) {
    const double lse = log_sum_exp(logits);
    double h = 0.0;
    for (double z : logits) {
        const double lq = z - lse;
        h -= plogp(std::exp(lq), lq);
    }
    return std::max(h, 0.0);
}

std::vector<int> clamped_set(std::span<const double> logits, const ClampConfig& clamp) {
    clamp.validate();
    const std::size_t n = logits.size();
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    auto cmp = [&](int a, int b) { return ranks_before(logits, a, b); };

    if (clamp.mode == ClampMode::count) {
        const std::size_t k = retained_count(clamp.p, n);
        if (k < n) {
            std::nth_element(order.begin(), order.begin() + (k - 1), order.end(), cmp);
            order.resize(k);
        }
        std::sort(order.begin(), order.end(), cmp);
        return order;
    }

    std::sort(order.begin(), order.end(), cmp);
    const auto p = softmax(logits);
    const double target = 1.0 - clamp.p;
    double mass = 0.0;
    std::size_t k = 0;
    while (k < n) {
        mass += p[order[k]];
        ++k;
        if (mass >= target - 1e-12) break;
    }
    order.resize(std::max<std::size_t>(k, 1));
    return order;
}

double ClampedDistribution::entropy() const {
    double h = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) h -= plogp(probs[i], log_probs[i]);
    return std::max(h, 0.0);
}

ClampedDistribution clamped_softmax(std::span<const double> logits, std::span<const int> retained) {
    ClampedDistribution d;
    d.actions.assign(retained.begin(), retained.end());
    std::vector<double> sub(retained.size());
    for (std::size_t i = 0; i < retained.size(); ++i) sub[i] = logits[retained[i]];
    const double lse = log_sum_exp(sub);
    d.probs.resize(sub.size());
    d.log_probs.resize(sub.size());
    for (std::size_t i = 0; i < sub.size(); ++i) {
        d.log_probs[i] = sub[i] - lse;
        d.probs[i] = std::exp(d.log_probs[i]);
    }
    return d;
}

ClampedDistribution clamped_softmax(std::span<const double> logits, const ClampConfig& clamp) {
    const auto retained = clamped_set(logits, clamp);
    return clamped_softmax(logits, retained);
}

std::vector<double> clamped_entropy_grad_row(std::span<const double> logits,
                                             std::span<const int> retained) {
    const auto d = clamped_softmax(logits, retained);
    const double h = d.entropy();
    std::vector<double> g(logits.size(), 0.0);
    for (std::size_t i = 0; i < d.actions.size(); ++i) {
        const double lq = std::max(d.log_probs[i], kLogFloor);
        g[d.actions[i]] = -d.probs[i] * (lq + h);
    }
    return g;
}

std::vector<double> grad_log_prob_row(std::span<const double> logits, int action) {
    auto g = softmax(logits);
    for (double& v : g) v = -v;
    g[action] += 1.0;
    return g;
}

// ---------------------------------------------------------------------------
// State-level wrappers
// ---------------------------------------------------------------------------

std::vector<double> probs(const SoftmaxPolicy& policy, const TokenState& state) {
    std::vector<double> scratch;
    return softmax(policy.logits(state, scratch));
}

std::vector<int> clamped_set(const SoftmaxPolicy& policy, const TokenState& state,
                             const ClampConfig& clamp) {
    std::vector<double> scratch;
    return clamped_set(policy.logits(state, scratch), clamp);
}

ClampedDistribution clamped_probs(const SoftmaxPolicy& policy, const TokenState& state,
                                  const ClampConfig& clamp) {
    std::vector<double> scratch;
    return clamped_softmax(policy.logits(state, scratch), clamp);
}

double state_entropy(const SoftmaxPolicy& policy, const TokenState& state) {
    std::vector<double> scratch;
    return entropy_of_logits(policy.logits(state, scratch));
}

double clamped_state_entropy(const SoftmaxPolicy& policy, const TokenState& state,
                             const ClampConfig& clamp) {
    return clamped_probs(policy, state, clamp).entropy();
}

std::vector<double> grad_log_prob(const SoftmaxPolicy& policy, const TokenState& state,
                                  int action) {
    std::vector<double> scratch;
    return grad_log_prob_row(policy.logits(state, scratch), action);
}

std::vector<double> clamped_entropy_grad(const SoftmaxPolicy& policy, const TokenState& state,
                                         const ClampConfig& clamp) {
    std::vector<double> scratch;
    const auto logits = policy.logits(state, scratch);
    const auto retained = clamped_set(logits, clamp);
    return clamped_entropy_grad_row(logits, retained);
}

EntropyReport entropy_report(const SoftmaxPolicy& policy, std::span<const TokenState> states,
                             const ClampConfig& clamp) {
    EntropyReport report;
    if (states.empty()) return report;
    std::vector<double> scratch;
    for (const auto& s : states) {
        const auto logits = policy.logits(s, scratch);
        const double h = entropy_of_logits(logits);
        const auto d = clamped_softmax(logits, clamp);
        report.per_state.push_back(h);
        report.full_entropy += h;
        report.clamped_entropy += d.entropy();
        report.retained_count = d.actions.size();
    }
    report.full_entropy /= static_cast<double>(states.size());
    report.clamped_entropy /= static_cast<double>(states.size());
    return report;
}

// ---------------------------------------------------------------------------
// LogitGradient
// ---------------------------------------------------------------------------

double LogitGradient::norm() const {
    double s = 0.0;
    for (double v : values_) s += v * v;
    return std::sqrt(s);
}

bool LogitGradient::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void LogitGradient::add_scaled(const LogitGradient& other, double scale) {
    if (other.rows_ != rows_ || other.action_count_ != action_count_) {
        throw std::invalid_argument("gradient shapes differ");
    }
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += scale * other.values_[i];
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("truncated policy checkpoint");
    return v;
}

}  // namespace

void save_checkpoint(const SoftmaxPolicy& policy, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
    put<std::uint64_t>(out, static_cast<std::uint64_t>(policy.action_count()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(policy.state_count()));
    const auto table = policy.table();
    out.write(reinterpret_cast<const char*>(table.data()),
              static_cast<std::streamsize>(table.size() * sizeof(double)));
    for (std::size_t r = 0; r < policy.state_count(); ++r) {
        const auto& s = policy.state(r);
        put<std::int64_t>(out, s.query);
        put<std::uint64_t>(out, s.prefix.size());
        for (int a : s.prefix) put<std::int64_t>(out, a);
    }
    if (!out) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

SoftmaxPolicy load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
    const auto actions = get<std::uint64_t>(in);
    const auto states = get<std::uint64_t>(in);
    if (actions == 0 || actions > static_cast<std::uint64_t>(std::numeric_limits<int>::max())) {
        throw std::runtime_error("checkpoint has an invalid action count");
    }
    std::vector<double> table(states * actions);
    in.read(reinterpret_cast<char*>(table.data()),
            static_cast<std::streamsize>(table.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated policy checkpoint");

    SoftmaxPolicy policy(static_cast<int>(actions));
    for (std::uint64_t r = 0; r < states; ++r) {
        TokenState s;
        s.query = static_cast<int>(get<std::int64_t>(in));
        const auto len = get<std::uint64_t>(in);
        s.prefix.reserve(len);
        for (std::uint64_t i = 0; i < len; ++i) s.prefix.push_back(static_cast<int>(get<std::int64_t>(in)));
        policy.set_row(s, std::span<const double>(table.data() + r * actions, actions));
    }
    return policy;
}

}  // namespace aent
