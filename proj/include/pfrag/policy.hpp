#pragma once

#include <array>
#include <vector>

#include <json.hpp>

#include "pfrag/common.hpp"
#include "pfrag/config.hpp"
#include "pfrag/monitor.hpp"
#include "pfrag/predictor.hpp"
#include "pfrag/serialize.hpp"

namespace pfrag {

enum class Action { Generate = 0, Reuse = 1, Accumulate = 2, Fetch = 3 };
constexpr std::size_t kActions = 4;

enum class Component { Predictor = 0, Sufficiency = 1, TimingClarity = 2, QueryGen = 3 };

enum class Outcome {
    Unresolved,
    QualityMaintained,
    MissedOpportunity,
    Sufficient,
    Insufficient,
    ImprovedQuery,
    ExcessiveDelay,
    QualityImproved,
    Unused,
    LateBlocking,
};

// Trigger phase decides Reuse vs. proceeding; Ready phase decides Accumulate vs. Fetch.
enum class Phase { Full, Trigger, Ready };

inline const char* to_string(Action a) {
    switch (a) {
        case Action::Generate: return "generate";
        case Action::Reuse: return "reuse";
        case Action::Accumulate: return "accumulate";
        case Action::Fetch: return "fetch";
    }
    return "?";
}

inline const char* to_string(Component c) {
    switch (c) {
        case Component::Predictor: return "predictor";
        case Component::Sufficiency: return "sufficiency";
        case Component::TimingClarity: return "timing_clarity";
        case Component::QueryGen: return "query_gen";
    }
    return "?";
}

inline const char* to_string(Outcome o) {
    switch (o) {
        case Outcome::Unresolved: return "unresolved";
        case Outcome::QualityMaintained: return "quality_maintained";
        case Outcome::MissedOpportunity: return "missed_opportunity";
        case Outcome::Sufficient: return "sufficient";
        case Outcome::Insufficient: return "insufficient";
        case Outcome::ImprovedQuery: return "improved_query";
        case Outcome::ExcessiveDelay: return "excessive_delay";
        case Outcome::QualityImproved: return "quality_improved";
        case Outcome::Unused: return "unused";
        case Outcome::LateBlocking: return "late_blocking";
    }
    return "?";
}

struct PolicyState {
    double entropy = 0.0;
    double entropy_delta = 0.0;
    double attention_entropy = 0.0;
    double value_norm_delta = 0.0;
    double topk_margin = 0.0;
    bool hedge = false;
    double p_hat = 0.0;
    double sufficiency = 0.0;
    double clarity = 0.0;
    std::size_t cache_size = 0;
    std::size_t cache_capacity = 10;
    double cache_max_cos = -1.0;
    std::size_t tokens_since_last_retrieval = 0;
    std::size_t extensions_left = 0;
    Phase phase = Phase::Full;

    static PolicyState from_frame(const SignalFrame& f) {
        PolicyState s;
        s.entropy = f.entropy;
        s.entropy_delta = f.entropy_delta;
        s.attention_entropy = f.attention_entropy;
        s.value_norm_delta = f.value_norm_delta;
        s.topk_margin = f.topk_margin;
        s.hedge = f.hedge_flag;
        return s;
    }
};

constexpr std::size_t kPolicyFeatures = 13;

inline Vec policy_features(const PolicyState& s) {
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
    require(in01(s.p_hat) && in01(s.sufficiency) && in01(s.clarity), "policy state scores must lie in [0,1]");
    double cap = static_cast<double>(std::max<std::size_t>(1, s.cache_capacity));
    return {1.0,
            s.entropy,
            s.entropy_delta,
            s.attention_entropy,
            s.value_norm_delta,
            s.topk_margin,
            s.hedge ? 1.0 : 0.0,
            s.p_hat,
            s.sufficiency,
            s.clarity,
            static_cast<double>(s.cache_size) / cap,
            s.cache_max_cos,
            std::min(1.0, static_cast<double>(s.tokens_since_last_retrieval) / 100.0)};
}

struct PolicyParams {
    Vec phi;  // 4 x kPolicyFeatures, row per action
    double lr = 1e-5;
    double gamma = 0.95;  // kept for config parity; the bandit update is single-step

    bool operator==(const PolicyParams&) const = default;

    static PolicyParams zeros(double lr = 1e-5, double gamma = 0.95) {
        return {Vec(kActions * kPolicyFeatures, 0.0), lr, gamma};
    }
    static PolicyParams from(const PolicyConfig& c) { return zeros(c.lr, c.gamma); }
};

struct Gates {
    double tau = 0.65;
    double sufficiency = 0.8;
    double clarity = 0.7;
    bool explore = false;

    static Gates from(const Config& c) {
        return {c.prediction.tau_rag, c.monitor.sufficiency_threshold, c.monitor.clarity_threshold, c.policy.explore};
    }
};

using ActionMask = std::array<bool, kActions>;

inline ActionMask action_mask(const PolicyState& s, const Gates& g) {
    if (s.p_hat <= g.tau) return {true, false, false, false};
    ActionMask m{true, s.cache_size > 0, s.extensions_left > 0, true};
    if (s.phase == Phase::Trigger) m[2] = false;
    if (s.phase == Phase::Ready) m[1] = false;
    return m;
}

inline Action cascade(const PolicyState& s, const Gates& g) {
    auto m = action_mask(s, g);
    if (s.p_hat <= g.tau) return Action::Generate;
    if (m[1] && s.sufficiency > g.sufficiency) return Action::Reuse;
    if (m[2] && s.clarity < g.clarity) return Action::Accumulate;
    return Action::Fetch;
}

inline std::array<double, kActions> logits(const PolicyParams& P, const Vec& x) {
    std::array<double, kActions> z{};
    for (std::size_t a = 0; a < kActions; ++a) z[a] = dot(std::span(&P.phi[a * kPolicyFeatures], kPolicyFeatures), x);
    return z;
}

// softmax restricted to unmasked actions; masked entries are 0
inline std::array<double, kActions> action_probs(const PolicyParams& P, const PolicyState& s, const Gates& g) {
    auto m = action_mask(s, g);
    auto z = logits(P, policy_features(s));
    double mx = -1e300;
    for (std::size_t a = 0; a < kActions; ++a)
        if (m[a]) mx = std::max(mx, z[a]);
    std::array<double, kActions> p{};
    double sum = 0.0;
    for (std::size_t a = 0; a < kActions; ++a)
        if (m[a]) sum += (p[a] = std::exp(z[a] - mx));
    for (auto& v : p) v /= sum;
    return p;
}

// Greedy mode follows the hard cascade. Explore mode samples among unmasked actions.
inline Action decide(const PolicyParams& P, const PolicyState& s, const Gates& g, Rng* rng = nullptr) {
    if (!g.explore || s.p_hat <= g.tau) return cascade(s, g);
    if (!rng) throw std::invalid_argument("decide: explore mode needs an rng");
    auto p = action_probs(P, s, g);
    double u = rng->uniform(), acc = 0.0;
    std::size_t last = 0;
    for (std::size_t a = 0; a < kActions; ++a) {
        if (p[a] == 0.0) continue;
        last = a;
        acc += p[a];
        if (u < acc) return static_cast<Action>(a);
    }
    return static_cast<Action>(last);
}

inline double log_prob(const PolicyParams& P, const PolicyState& s, Action a, const Gates& g) {
    auto p = action_probs(P, s, g);
    return std::log(p[static_cast<std::size_t>(a)]);
}

inline Vec log_prob_gradient(const PolicyParams& P, const PolicyState& s, Action a, const Gates& g) {
    auto m = action_mask(s, g);
    if (!m[static_cast<std::size_t>(a)]) throw std::invalid_argument("policy update: action is masked in this state");
    auto x = policy_features(s);
    auto p = action_probs(P, s, g);
    Vec grad(P.phi.size(), 0.0);
    for (std::size_t b = 0; b < kActions; ++b) {
        if (!m[b]) continue;
        double c = (b == static_cast<std::size_t>(a) ? 1.0 : 0.0) - p[b];
        for (std::size_t i = 0; i < kPolicyFeatures; ++i) grad[b * kPolicyFeatures + i] = c * x[i];
    }
    return grad;
}

// phi <- phi + lr * reward * grad log pi(a|s)
inline PolicyParams update(PolicyParams P, const PolicyState& s, Action a, double reward, const Gates& g) {
    auto grad = log_prob_gradient(P, s, a, g);
    if (reward == 0.0) return P;
    for (std::size_t i = 0; i < P.phi.size(); ++i) P.phi[i] += P.lr * reward * grad[i];
    return P;
}

inline double grad_check(const PolicyParams& P, const PolicyState& s, Action a, const Gates& g, double h = 1e-5) {
    auto grad = log_prob_gradient(P, s, a, g);
    double worst = 0.0;
    PolicyParams Q = P;
    for (std::size_t i = 0; i < P.phi.size(); ++i) {
        double orig = Q.phi[i];
        Q.phi[i] = orig + h;
        double up = log_prob(Q, s, a, g);
        Q.phi[i] = orig - h;
        double dn = log_prob(Q, s, a, g);
        Q.phi[i] = orig;
        double num = (up - dn) / (2.0 * h);
        double den = std::max({std::abs(num), std::abs(grad[i]), 1e-6});
        worst = std::max(worst, std::abs(num - grad[i]) / den);
    }
    return worst;
}

struct ActionOutcome {
    Action action = Action::Generate;
    Outcome outcome = Outcome::Unresolved;
};

inline double reward_of(const ActionOutcome& o, const RewardTable& t = {}) {
    using O = Outcome;
    auto bad = [&]() -> double {
        throw std::invalid_argument(std::string("reward_of: outcome '") + to_string(o.outcome) + "' does not apply to " +
                                    to_string(o.action));
    };
    if (o.outcome == O::Unresolved) throw std::invalid_argument("reward_of: unresolved outcome");
    switch (o.action) {
        case Action::Generate:
            return o.outcome == O::QualityMaintained ? t.generate_ok : o.outcome == O::MissedOpportunity ? t.generate_missed : bad();
        case Action::Reuse:
            return o.outcome == O::Sufficient ? t.reuse_ok : o.outcome == O::Insufficient ? t.reuse_insufficient : bad();
        case Action::Accumulate:
            return o.outcome == O::ImprovedQuery ? t.accumulate_ok : o.outcome == O::ExcessiveDelay ? t.accumulate_delay : bad();
        case Action::Fetch:
            switch (o.outcome) {
                case O::QualityImproved: return t.fetch_ok;
                case O::Unused: return t.fetch_unused;
                case O::LateBlocking: return t.fetch_late;
                default: return bad();
            }
    }
    return bad();
}

inline Component component_for(Action a) {
    switch (a) {
        case Action::Generate: return Component::Predictor;
        case Action::Reuse: return Component::Sufficiency;
        case Action::Accumulate: return Component::TimingClarity;
        case Action::Fetch: return Component::QueryGen;
    }
    return Component::QueryGen;
}

// Inputs the owning head needs for a pseudo-label step.
struct StateSnapshot {
    Vec predictor_x, predictor_o;
    Vec e_c;
    double cache_max_cos = -1.0;
    Vec h_c;
};

struct RewardEvent {
    std::size_t trace_id = 0;
    std::size_t token = 0;
    Action action = Action::Generate;
    Outcome outcome = Outcome::Unresolved;
    double reward = 0.0;
    Component component = Component::QueryGen;
    PolicyState state;
    StateSnapshot snapshot;
};

inline nlohmann::json to_json(const RewardEvent& e) {
    return {{"trace", e.trace_id},
            {"token", e.token},
            {"action", to_string(e.action)},
            {"outcome", to_string(e.outcome)},
            {"reward", e.reward},
            {"component", to_string(e.component)},
            {"p_hat", e.state.p_hat},
            {"sufficiency", e.state.sufficiency},
            {"clarity", e.state.clarity}};
}

// One supervised step on the head that owns the action. Returns false when the
// owner has no trainable parameters (query generation is extractive).
inline bool route(const RewardEvent& e, PredictorParams& pred, MonitorParams& mon, double lr) {
    switch (e.component) {
        case Component::Predictor: {
            if (e.snapshot.predictor_x.empty()) return false;
            PredictorInstance inst{e.snapshot.predictor_x, e.snapshot.predictor_o, e.reward < 0.0, 0, e.token};
            Vec g(pred.n_weights(), 0.0);
            accumulate_gradient(pred, inst, g);
            for (std::size_t i = 0; i < g.size(); ++i) pred.weight(i) -= lr * g[i];
            return true;
        }
        case Component::Sufficiency:
        case Component::TimingClarity: {
            LabeledInstance li;
            li.suff_context = e.snapshot.e_c;
            li.suff_max_cos = e.snapshot.cache_max_cos;
            li.sufficiency_label = e.reward > 0.0;
            li.clarity_features = e.snapshot.h_c;
            li.context_features = e.snapshot.h_c;
            // a rewarded deferral confirms the context was not yet clear
            li.clarity_score = e.reward > 0.0 ? 0.0 : 1.0;
            MonitorLossWeights w = e.component == Component::Sufficiency ? MonitorLossWeights{0.0, 1.0, 0.0}
                                                                         : MonitorLossWeights{0.0, 0.0, 1.0};
            if (li.suff_context.size() != mon.d_emb || li.clarity_features.size() != mon.d_c) return false;
            Vec g(mon.n_weights(), 0.0);
            accumulate_monitor_gradient(mon, li, w, g, 1.0);
            for (std::size_t i = 0; i < g.size(); ++i) mon.weight(i) -= lr * g[i];
            return true;
        }
        case Component::QueryGen:
            return false;
    }
    return false;
}

// Stationary contextual bandit with the runtime's reward table. Each state hides
// which action is right; the observable scores are noisy hints of it.
struct BanditEnv {
    RewardTable table;
    Gates gates;
    double hint_noise = 0.25;

    struct Draw {
        PolicyState state;
        bool need_soon = false;
        bool cache_sufficient = false;
        bool context_unclear = false;
        bool fetch_useful = false;
    };

    Draw sample(Rng& rng) const {
        Draw d;
        d.need_soon = rng.bernoulli(0.7);
        d.cache_sufficient = rng.bernoulli(0.3);
        d.context_unclear = rng.bernoulli(0.3);
        d.fetch_useful = d.need_soon && !d.cache_sufficient;
        auto hint = [&](bool v) { return clip01((v ? 0.75 : 0.25) + rng.normal(0.0, hint_noise)); };
        PolicyState& s = d.state;
        s.entropy = rng.uniform(0.5, 3.0);
        s.attention_entropy = rng.uniform(0.2, 1.5);
        s.topk_margin = rng.uniform();
        s.p_hat = gates.tau + (1.0 - gates.tau) * (d.need_soon ? rng.uniform(0.4, 1.0) : rng.uniform(0.0, 0.6));
        s.p_hat = std::min(s.p_hat, 0.999);
        s.sufficiency = hint(d.cache_sufficient);
        s.clarity = hint(!d.context_unclear);
        s.cache_size = 1 + rng.index(10);
        s.cache_max_cos = d.cache_sufficient ? rng.uniform(0.6, 1.0) : rng.uniform(-0.2, 0.6);
        s.tokens_since_last_retrieval = 50 + rng.index(100);
        s.extensions_left = 2;
        return d;
    }

    double reward(const Draw& d, Action a) const {
        switch (a) {
            case Action::Generate:
                return reward_of({a, d.need_soon ? Outcome::MissedOpportunity : Outcome::QualityMaintained}, table);
            case Action::Reuse:
                return reward_of({a, d.cache_sufficient ? Outcome::Sufficient : Outcome::Insufficient}, table);
            case Action::Accumulate:
                return reward_of({a, d.context_unclear ? Outcome::ImprovedQuery : Outcome::ExcessiveDelay}, table);
            case Action::Fetch:
                return reward_of({a, d.fetch_useful ? Outcome::QualityImproved : Outcome::Unused}, table);
        }
        return 0.0;
    }
};

// Runs n on-policy explore-mode decisions with REINFORCE updates; returns per-decision rewards.
inline std::vector<double> run_bandit(PolicyParams& P, const BanditEnv& env, std::size_t n, std::uint64_t seed) {
    Rng env_rng(derive_seed(seed, 0xe0));
    Rng act_rng(derive_seed(seed, 0xac));
    Gates g = env.gates;
    g.explore = true;
    std::vector<double> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto d = env.sample(env_rng);
        Action a = decide(P, d.state, g, &act_rng);
        double r = env.reward(d, a);
        P = update(std::move(P), d.state, a, r, g);
        out.push_back(r);
    }
    return out;
}

inline std::string serialize(const PolicyParams& P) {
    return encode_tensors(ParamKind::Policy, {Tensor{static_cast<std::uint32_t>(kActions),
                                                     static_cast<std::uint32_t>(kPolicyFeatures), P.phi},
                                              Tensor{1, 1, {P.lr}},
                                              Tensor{1, 1, {P.gamma}}});
}

inline PolicyParams deserialize_policy(const std::string& bytes) {
    auto ts = decode_tensors(ParamKind::Policy, bytes);
    if (ts.size() != 3 || ts[0].rows != kActions || ts[0].cols != kPolicyFeatures)
        throw Error("policy file: unexpected layout");
    return {ts[0].data, ts[1].data.at(0), ts[2].data.at(0)};
}

}  // namespace pfrag
