#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pfrag/common.hpp"

namespace pfrag {

enum class EventClass { Factual = 0, Reasoning = 1, Explanation = 2 };

inline const char* to_string(EventClass c) {
    switch (c) {
        case EventClass::Factual: return "factual";
        case EventClass::Reasoning: return "reasoning";
        case EventClass::Explanation: return "explanation";
    }
    return "?";
}

inline EventClass event_class_from(std::string_view s) {
    if (s == "factual") return EventClass::Factual;
    if (s == "reasoning") return EventClass::Reasoning;
    if (s == "explanation") return EventClass::Explanation;
    throw std::invalid_argument("unknown event class: " + std::string(s));
}

struct EventSpec {
    std::size_t position = 0;
    EventClass event_class = EventClass::Factual;
    int topic = -1;  // -1: drawn by the generator
    bool operator==(const EventSpec&) const = default;
};

struct SynthConfig {
    std::size_t length = 256;
    double theta = 2.5;
    bool explicit_events = false;
    std::vector<EventSpec> events;
    double event_rate = 0.02;
    std::size_t min_event_gap = 30;
    std::size_t ramp = 6;

    double entropy_base = 0.8;
    double entropy_peak = 3.2;
    double entropy_noise = 0.1;

    double attention_base = 0.3;
    double attention_amp = 0.9;
    double attention_noise = 0.12;
    std::size_t precursor_lead = 16;
    std::size_t precursor_plateau = 10;
    double strength_min = 0.6;
    double strength_max = 1.4;
    double hedge_base = 0.05;
    double hedge_elevated = 0.35;
    double value_base = 0.1;
    double value_amp = 0.3;
    double value_noise = 0.05;
    double hidden_noise = 0.4;
    double hidden_cue = 1.0;
    double decoy_rate = 0.03;
    double decoy_peak = 2.2;
    double margin_noise = 0.05;

    std::size_t d_h = 16;
    std::size_t d_emb = 64;
    std::size_t n_topics = 64;
    std::uint64_t world_seed = 20240601;
    double redundancy_rate = 0.4;
    double p_factual = 0.4;
    double p_reasoning = 0.35;

    double min_angle = 15.0;       // degrees, context-to-need angle at the class optimum
    double approach_slope = 4.5;   // degrees per token before the optimum
    double depart_slope = 12.0;    // degrees per token after the optimum
    double max_angle = 85.0;
    double angle_noise = 2.0;
    double incomplete_penalty = 10.0;
    double incomplete_rate = 0.2;
    double pre_opt_incomplete_rate = 0.7;
    double background_drift = 0.25;
    double prompt_angle = 50.0;
    double suppress_rate = 0.0;
};

struct RetrieverConfig {
    std::size_t docs_per_topic = 8;
    double doc_angle = 20.0;  // degrees, angular spread around the topic prototype
    double uncovered_fraction = 0.1;
    std::size_t k_docs = 5;
    double latency_median = 125.0;
    double latency_p95 = 180.0;
    double latency_floor = 1.0;
    double latency_fixed = 0.0;  // > 0 replaces the lognormal draw
    double failure_rate = 0.0;
    double relevance = 0.6;
};

struct PredictionConfig {
    double theta = 2.5;
    std::size_t horizon = 10;
    double tau_rag = 0.65;
    std::size_t window = 16;
};

struct TrainConfig {
    std::size_t d_z = 32;
    double lr = 1e-4;
    double momentum = 0.9;
    std::size_t batch = 32;
    std::size_t epochs = 60;
    double negative_ratio = 1.0;
    std::size_t traces = 120;
    std::uint64_t seed = 1;
};

struct MonitorConfig {
    double sufficiency_threshold = 0.8;
    double clarity_threshold = 0.7;
    std::size_t max_wait = 5;
    std::size_t max_extensions = 2;
    double beta = 0.5;
    double gamma = 0.5;
    double delta = 0.3;
    double lr = 0.05;
    double momentum = 0.9;
    std::size_t batch = 32;
    std::size_t epochs = 40;
    std::size_t traces = 600;
    std::size_t cache_events = 10;
};

struct QueryConfig {
    double high = 0.8;
    double low = 0.5;
    double angle = 15.0;
    std::size_t variants = 3;
    double blend = 0.5;
    std::uint64_t direction_seed = 7;
    std::size_t centroid_window = 32;
};

struct RewardTable {
    double generate_ok = 0.3;
    double generate_missed = -0.8;
    double reuse_ok = 1.0;
    double reuse_insufficient = -0.5;
    double accumulate_ok = 0.2;
    double accumulate_delay = -0.3;
    double fetch_ok = 1.0;
    double fetch_unused = -0.5;
    double fetch_late = -2.0;
};

struct PolicyConfig {
    double lr = 1e-5;
    double gamma = 0.95;
    bool explore = false;
    bool online = false;
    double online_lr = 1e-5;
    double bandit_lr = 0.01;  // stationary environment harness
    RewardTable rewards;
};

struct RuntimeConfig {
    double token_ms = 48.2;
    double overhead_ms = 2.7;
    double prefill_ms = 60.0;
    std::size_t workers = 2;
    std::size_t cache_capacity = 10;
    std::size_t buffer_cap = 5;
    std::size_t s_min = 50;
    std::size_t debounce = 2;
    double theta_low = 2.0;
    std::size_t hysteresis_m = 5;
    std::size_t unproductive_h = 30;
    double threshold_raise = 0.3;
    std::size_t reuse_window = 50;
    bool prompt_retrieval = true;
    std::size_t oracle_lead = 10;
};

struct BenchConfig {
    std::size_t traces = 200;
    std::size_t fixed_interval = 32;
    std::uint64_t trace_seed = 1000;
};

struct Config {
    SynthConfig synth;
    RetrieverConfig retriever;
    PredictionConfig prediction;
    TrainConfig train;
    MonitorConfig monitor;
    QueryConfig query;
    PolicyConfig policy;
    RuntimeConfig runtime;
    BenchConfig bench;
};

namespace detail {

inline std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline void parse_value(std::string_view s, double& out) {
    std::string str(s);
    char* end = nullptr;
    out = std::strtod(str.c_str(), &end);
    if (str.empty() || end != str.c_str() + str.size() || !std::isfinite(out))
        throw std::invalid_argument("expected a number, got '" + str + "'");
}

template <typename T>
    requires std::is_integral_v<T> && (!std::is_same_v<T, bool>)
inline void parse_value(std::string_view s, T& out) {
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || p != s.data() + s.size())
        throw std::invalid_argument("expected an integer, got '" + std::string(s) + "'");
}

inline void parse_value(std::string_view s, bool& out) {
    if (s == "true" || s == "1") out = true;
    else if (s == "false" || s == "0") out = false;
    else throw std::invalid_argument("expected true/false, got '" + std::string(s) + "'");
}

// events as "pos:class[:topic],..." e.g. "20:factual,80:reasoning:3"
inline void parse_value(std::string_view s, std::vector<EventSpec>& out) {
    out.clear();
    std::string str(s);
    std::stringstream ss(str);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        EventSpec e;
        auto c1 = item.find(':');
        std::string pos = item.substr(0, c1);
        parse_value(pos, e.position);
        if (c1 != std::string::npos) {
            auto c2 = item.find(':', c1 + 1);
            e.event_class = event_class_from(item.substr(c1 + 1, c2 == std::string::npos ? std::string::npos : c2 - c1 - 1));
            if (c2 != std::string::npos) parse_value(item.substr(c2 + 1), e.topic);
        }
        out.push_back(e);
    }
}

inline std::string format_value(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}
template <typename T>
    requires std::is_integral_v<T> && (!std::is_same_v<T, bool>)
inline std::string format_value(T v) { return std::to_string(v); }
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(const std::vector<EventSpec>& ev) {
    std::string s;
    for (std::size_t i = 0; i < ev.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(ev[i].position) + ":" + to_string(ev[i].event_class);
        if (ev[i].topic >= 0) s += ":" + std::to_string(ev[i].topic);
    }
    return s;
}

// Calls f(key, field) for every configurable field. Works for const and non-const Config.
template <typename C, typename F>
void visit_fields(C& c, F&& f) {
    auto& s = c.synth;
    f("synth.length", s.length);
    f("synth.theta", s.theta);
    f("synth.explicit_events", s.explicit_events);
    f("synth.events", s.events);
    f("synth.event_rate", s.event_rate);
    f("synth.min_event_gap", s.min_event_gap);
    f("synth.ramp", s.ramp);
    f("synth.entropy_base", s.entropy_base);
    f("synth.entropy_peak", s.entropy_peak);
    f("synth.entropy_noise", s.entropy_noise);
    f("synth.attention_base", s.attention_base);
    f("synth.attention_amp", s.attention_amp);
    f("synth.attention_noise", s.attention_noise);
    f("synth.precursor_lead", s.precursor_lead);
    f("synth.precursor_plateau", s.precursor_plateau);
    f("synth.strength_min", s.strength_min);
    f("synth.strength_max", s.strength_max);
    f("synth.hedge_base", s.hedge_base);
    f("synth.hedge_elevated", s.hedge_elevated);
    f("synth.value_base", s.value_base);
    f("synth.value_amp", s.value_amp);
    f("synth.value_noise", s.value_noise);
    f("synth.hidden_noise", s.hidden_noise);
    f("synth.hidden_cue", s.hidden_cue);
    f("synth.decoy_rate", s.decoy_rate);
    f("synth.decoy_peak", s.decoy_peak);
    f("synth.margin_noise", s.margin_noise);
    f("synth.d_h", s.d_h);
    f("synth.d_emb", s.d_emb);
    f("synth.n_topics", s.n_topics);
    f("synth.world_seed", s.world_seed);
    f("synth.redundancy_rate", s.redundancy_rate);
    f("synth.p_factual", s.p_factual);
    f("synth.p_reasoning", s.p_reasoning);
    f("synth.min_angle", s.min_angle);
    f("synth.approach_slope", s.approach_slope);
    f("synth.depart_slope", s.depart_slope);
    f("synth.max_angle", s.max_angle);
    f("synth.angle_noise", s.angle_noise);
    f("synth.incomplete_penalty", s.incomplete_penalty);
    f("synth.incomplete_rate", s.incomplete_rate);
    f("synth.pre_opt_incomplete_rate", s.pre_opt_incomplete_rate);
    f("synth.background_drift", s.background_drift);
    f("synth.prompt_angle", s.prompt_angle);
    f("synth.suppress_rate", s.suppress_rate);

    auto& r = c.retriever;
    f("retriever.docs_per_topic", r.docs_per_topic);
    f("retriever.doc_angle", r.doc_angle);
    f("retriever.uncovered_fraction", r.uncovered_fraction);
    f("retriever.k_docs", r.k_docs);
    f("retriever.latency_median", r.latency_median);
    f("retriever.latency_p95", r.latency_p95);
    f("retriever.latency_floor", r.latency_floor);
    f("retriever.latency_fixed", r.latency_fixed);
    f("retriever.failure_rate", r.failure_rate);
    f("retriever.relevance", r.relevance);

    auto& p = c.prediction;
    f("prediction.theta", p.theta);
    f("prediction.horizon", p.horizon);
    f("prediction.tau_rag", p.tau_rag);
    f("prediction.window", p.window);

    auto& t = c.train;
    f("train.d_z", t.d_z);
    f("train.lr", t.lr);
    f("train.momentum", t.momentum);
    f("train.batch", t.batch);
    f("train.epochs", t.epochs);
    f("train.negative_ratio", t.negative_ratio);
    f("train.traces", t.traces);
    f("train.seed", t.seed);

    auto& m = c.monitor;
    f("monitor.sufficiency_threshold", m.sufficiency_threshold);
    f("monitor.clarity_threshold", m.clarity_threshold);
    f("monitor.max_wait", m.max_wait);
    f("monitor.max_extensions", m.max_extensions);
    f("monitor.beta", m.beta);
    f("monitor.gamma", m.gamma);
    f("monitor.delta", m.delta);
    f("monitor.lr", m.lr);
    f("monitor.momentum", m.momentum);
    f("monitor.batch", m.batch);
    f("monitor.epochs", m.epochs);
    f("monitor.traces", m.traces);
    f("monitor.cache_events", m.cache_events);

    auto& q = c.query;
    f("query.high", q.high);
    f("query.low", q.low);
    f("query.angle", q.angle);
    f("query.variants", q.variants);
    f("query.blend", q.blend);
    f("query.direction_seed", q.direction_seed);
    f("query.centroid_window", q.centroid_window);

    auto& po = c.policy;
    f("policy.lr", po.lr);
    f("policy.gamma", po.gamma);
    f("policy.explore", po.explore);
    f("policy.online", po.online);
    f("policy.online_lr", po.online_lr);
    f("policy.bandit_lr", po.bandit_lr);
    f("policy.reward.generate_ok", po.rewards.generate_ok);
    f("policy.reward.generate_missed", po.rewards.generate_missed);
    f("policy.reward.reuse_ok", po.rewards.reuse_ok);
    f("policy.reward.reuse_insufficient", po.rewards.reuse_insufficient);
    f("policy.reward.accumulate_ok", po.rewards.accumulate_ok);
    f("policy.reward.accumulate_delay", po.rewards.accumulate_delay);
    f("policy.reward.fetch_ok", po.rewards.fetch_ok);
    f("policy.reward.fetch_unused", po.rewards.fetch_unused);
    f("policy.reward.fetch_late", po.rewards.fetch_late);

    auto& rt = c.runtime;
    f("runtime.token_ms", rt.token_ms);
    f("runtime.overhead_ms", rt.overhead_ms);
    f("runtime.prefill_ms", rt.prefill_ms);
    f("runtime.workers", rt.workers);
    f("runtime.cache_capacity", rt.cache_capacity);
    f("runtime.buffer_cap", rt.buffer_cap);
    f("runtime.s_min", rt.s_min);
    f("runtime.debounce", rt.debounce);
    f("runtime.theta_low", rt.theta_low);
    f("runtime.hysteresis_m", rt.hysteresis_m);
    f("runtime.unproductive_h", rt.unproductive_h);
    f("runtime.threshold_raise", rt.threshold_raise);
    f("runtime.reuse_window", rt.reuse_window);
    f("runtime.prompt_retrieval", rt.prompt_retrieval);
    f("runtime.oracle_lead", rt.oracle_lead);

    auto& b = c.bench;
    f("bench.traces", b.traces);
    f("bench.fixed_interval", b.fixed_interval);
    f("bench.trace_seed", b.trace_seed);
}

}  // namespace detail

inline void validate(const Config& c) {
    require(c.synth.length >= 1, "synth.length must be >= 1");
    require(c.synth.theta > 0.0, "synth.theta must be > 0");
    require(c.synth.d_emb >= 4 && c.synth.d_h >= 4, "embedding dimensions too small");
    require(c.prediction.horizon >= 1, "prediction.horizon must be >= 1");
    require(c.prediction.tau_rag > 0.0 && c.prediction.tau_rag < 1.0, "prediction.tau_rag must be in (0,1)");
    require(c.prediction.theta > 0.0, "prediction.theta must be > 0");
    require(c.prediction.window == 16, "prediction.window is fixed at 16");
    require(c.retriever.k_docs >= 1, "retriever.k_docs must be >= 1");
    require(c.retriever.latency_p95 > c.retriever.latency_median && c.retriever.latency_median > 0,
            "retriever latency requires p95 > median > 0");
    require(c.runtime.workers >= 1, "runtime.workers must be >= 1");
    require(c.runtime.cache_capacity >= 1, "runtime.cache_capacity must be >= 1");
    require(c.query.variants >= 2 && c.query.variants <= 3, "query.variants must be 2 or 3");
    require(c.query.low < c.query.high, "query.low must be < query.high");
}

inline void set_value(Config& c, std::string_view key, std::string_view value) {
    bool found = false;
    detail::visit_fields(c, [&](std::string_view k, auto& field) {
        if (k == key) {
            detail::parse_value(value, field);
            found = true;
        }
    });
    if (!found) throw std::invalid_argument("unknown config key: " + std::string(key));
}

inline std::string get_value(const Config& c, std::string_view key) {
    std::string out;
    bool found = false;
    detail::visit_fields(c, [&](std::string_view k, const auto& field) {
        if (k == key) {
            out = detail::format_value(field);
            found = true;
        }
    });
    if (!found) throw std::invalid_argument("unknown config key: " + std::string(key));
    return out;
}

// key = value lines; '#' starts a comment
inline Config parse_config(std::istream& in) {
    Config c;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::string t = detail::trim(line);
        if (t.empty()) continue;
        auto eq = t.find('=');
        if (eq == std::string::npos) throw ParseError("expected key = value", lineno);
        std::string key = detail::trim(t.substr(0, eq));
        std::string val = detail::trim(t.substr(eq + 1));
        try {
            set_value(c, key, val);
        } catch (const std::invalid_argument& e) {
            throw ParseError(e.what(), lineno);
        }
    }
    validate(c);
    return c;
}

inline Config load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config file: " + path);
    return parse_config(in);
}

constexpr const char* kConfigEnv = "PFRAG_CONFIG";

// explicit path wins, then $PFRAG_CONFIG, then built-in defaults
inline Config resolve_config(const std::string& explicit_path) {
    if (!explicit_path.empty()) return load_config(explicit_path);
    if (const char* env = std::getenv(kConfigEnv); env && *env) return load_config(env);
    return Config{};
}

inline std::string canonical_dump(const Config& c) {
    std::vector<std::pair<std::string, std::string>> kv;
    detail::visit_fields(c, [&](std::string_view k, const auto& field) {
        kv.emplace_back(std::string(k), detail::format_value(field));
    });
    std::sort(kv.begin(), kv.end());
    std::string out;
    for (auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

inline std::string config_hash(const Config& c) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical_dump(c))));
    return buf;
}

}  // namespace pfrag
