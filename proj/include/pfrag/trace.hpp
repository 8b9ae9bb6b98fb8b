#pragma once

#include <algorithm>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfrag/common.hpp"
#include "pfrag/config.hpp"
#include "pfrag/retriever.hpp"

namespace pfrag {

struct SignalFrame {
    std::size_t token_index = 0;
    double entropy = 0.0;
    double entropy_delta = 0.0;
    double attention_entropy = 0.0;
    double value_norm_delta = 0.0;
    double topk_margin = 0.0;
    bool hedge_flag = false;
    Vec hidden_summary;
    bool operator==(const SignalFrame&) const = default;
};

struct UncertaintyEvent {
    std::size_t position = 0;
    int topic_id = 0;
    EventClass event_class = EventClass::Factual;
    Vec need_embedding;
    double gold_utility = 0.0;
    // generator internals, kept for analysis
    std::size_t k_opt = 0;
    double strength = 1.0;
    bool operator==(const UncertaintyEvent&) const = default;
};

struct Trace {
    std::vector<SignalFrame> frames;
    std::vector<UncertaintyEvent> events;
    std::vector<Vec> context_embeddings;
    std::vector<bool> complete;  // phrase completeness at each token
    std::vector<bool> suppress;  // domain suppression metadata
    Vec prompt_embedding;
    std::uint64_t seed = 0;
    double theta = 2.5;

    std::size_t size() const { return frames.size(); }
    const UncertaintyEvent* event_at(std::size_t pos) const {
        for (const auto& e : events)
            if (e.position == pos) return &e;
        return nullptr;
    }
    bool operator==(const Trace&) const = default;
};

inline std::size_t sample_k_opt(EventClass c, Rng& rng) {
    double u = rng.uniform();
    switch (c) {
        case EventClass::Factual: return u < 0.35 ? 3 : 4;
        case EventClass::Reasoning: return u < 0.5 ? 2 : 3;
        case EventClass::Explanation: return u < 0.5 ? 1 : 2;
    }
    return 0;
}

namespace detail {

inline double attention_shape(long d, std::size_t lead, std::size_t plateau) {
    // d = t - position; linear rise from -lead to -plateau, flat to the event, short decay
    long L = static_cast<long>(lead);
    long P = static_cast<long>(plateau);
    if (d < -L || d > 2) return 0.0;
    if (d <= -P) return static_cast<double>(d + L) / static_cast<double>(L - P);
    if (d <= 0) return 1.0;
    return d == 1 ? 0.6 : 0.3;
}

template <typename Events, typename Event>
double segment_weight(const Events& events, const Event& e, std::size_t t) {
    // the class cue spans the discourse segment that ends just after the event
    std::size_t end = e.position + e.k_opt + 6;
    std::size_t begin = 0;
    for (const auto& o : events)
        if (o.position < e.position) begin = o.position + o.k_opt + 7;
    return t >= begin && t <= end ? 1.0 : 0.0;
}

}  // namespace detail

inline std::vector<EventSpec> schedule_events(const SynthConfig& cfg, Rng& rng) {
    std::vector<EventSpec> out;
    if (cfg.event_rate <= 0.0) return out;
    double mean_gap = 1.0 / cfg.event_rate;
    double extra = std::max(1.0, mean_gap - static_cast<double>(cfg.min_event_gap));
    double p = static_cast<double>(cfg.ramp) + std::floor(rng.exponential(mean_gap));
    auto first = static_cast<double>(std::max(cfg.ramp, cfg.precursor_lead / 2));
    p = std::max(p, first);
    // leave room for the full wait window after the last event
    while (p + 6.0 <= static_cast<double>(cfg.length)) {
        EventSpec e;
        e.position = static_cast<std::size_t>(p);
        double u = rng.uniform();
        e.event_class = u < cfg.p_factual ? EventClass::Factual
                        : u < cfg.p_factual + cfg.p_reasoning ? EventClass::Reasoning
                                                              : EventClass::Explanation;
        out.push_back(e);
        p += static_cast<double>(cfg.min_event_gap) + std::floor(rng.exponential(extra));
    }
    return out;
}

inline Trace synth_trace(const SynthConfig& cfg, std::uint64_t seed) {
    if (cfg.length == 0) throw std::invalid_argument("synth_trace: length must be >= 1");
    if (!(cfg.theta > 0.0)) throw std::invalid_argument("synth_trace: theta must be > 0");
    const std::size_t N = cfg.length;
    Rng rng(derive_seed(seed, 0x7ace));

    std::vector<EventSpec> specs = cfg.explicit_events ? cfg.events : schedule_events(cfg, rng);
    std::sort(specs.begin(), specs.end(), [](auto& a, auto& b) { return a.position < b.position; });
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (specs[i].position >= N) throw std::invalid_argument("synth_trace: event position >= length");
        if (specs[i].position < cfg.ramp) throw std::invalid_argument("synth_trace: event position < ramp length");
        if (i && specs[i].position == specs[i - 1].position)
            throw std::invalid_argument("synth_trace: duplicate event position");
        if (i && specs[i].position - specs[i - 1].position < 2)
            throw std::invalid_argument("synth_trace: adjacent event positions");
    }

    const auto topics = make_topics(cfg.world_seed, cfg.n_topics, cfg.d_emb);
    Trace tr;
    tr.seed = seed;
    tr.theta = cfg.theta;

    for (const auto& s : specs) {
        UncertaintyEvent e;
        e.position = s.position;
        e.event_class = s.event_class;
        bool repeat = false;
        if (s.topic >= 0) {
            if (static_cast<std::size_t>(s.topic) >= cfg.n_topics) throw std::invalid_argument("synth_trace: topic out of range");
            e.topic_id = s.topic;
        } else if (!tr.events.empty() && rng.bernoulli(cfg.redundancy_rate)) {
            std::size_t back = std::min<std::size_t>(3, tr.events.size());
            e.topic_id = tr.events[tr.events.size() - 1 - rng.index(back)].topic_id;
            repeat = true;
        } else {
            int t = static_cast<int>(rng.index(cfg.n_topics));
            if (!tr.events.empty() && t == tr.events.back().topic_id && cfg.n_topics > 1)
                t = static_cast<int>((static_cast<std::size_t>(t) + 1) % cfg.n_topics);
            e.topic_id = t;
        }
        for (const auto& prev : tr.events)
            if (prev.topic_id == e.topic_id) repeat = true;
        e.gold_utility = repeat ? 0.0 : 1.0;
        e.k_opt = sample_k_opt(e.event_class, rng);
        e.strength = rng.uniform(cfg.strength_min, cfg.strength_max);
        Vec other = rng.unit_vector(cfg.d_emb);
        e.need_embedding = rotate_from(topics[static_cast<std::size_t>(e.topic_id)], other,
                                       deg2rad(std::min(3.0 * 6.0, std::abs(rng.normal()) * 6.0)));
        tr.events.push_back(std::move(e));
    }

    // decoys: precursor episodes that never reach the threshold
    struct Decoy {
        std::size_t position;
        double strength;
    };
    std::vector<Decoy> decoys;
    if (cfg.decoy_rate > 0.0) {
        for (std::size_t t = 0; t < N; ++t) {
            if (!rng.bernoulli(cfg.decoy_rate)) continue;
            bool clear = true;
            for (const auto& e : tr.events)
                if (t + 20 > e.position && t < e.position + 20) clear = false;
            for (const auto& d : decoys)
                if (t < d.position + 20) clear = false;
            if (clear) decoys.push_back({t, rng.uniform(cfg.strength_min, cfg.strength_max)});
        }
    }

    // entropy
    std::vector<double> H(N);
    const double cap = cfg.theta - 0.1;
    for (std::size_t t = 0; t < N; ++t) H[t] = cfg.entropy_base + rng.normal(0.0, cfg.entropy_noise);
    std::vector<bool> is_event(N, false);
    for (const auto& e : tr.events) {
        is_event[e.position] = true;
        const double span = cfg.entropy_peak - cfg.entropy_base;
        for (std::size_t j = 1; j < cfg.ramp && j <= e.position; ++j) {
            double v = cfg.entropy_base + span * static_cast<double>(cfg.ramp - j) / static_cast<double>(cfg.ramp);
            H[e.position - j] = std::max(H[e.position - j], v + rng.normal(0.0, cfg.entropy_noise));
        }
        H[e.position] = std::max(cfg.theta + 0.05, cfg.entropy_peak + rng.normal(0.0, cfg.entropy_noise));
        for (std::size_t j = 1; j <= 3 && e.position + j < N; ++j) {
            double v = cfg.entropy_base + span * std::pow(0.45, static_cast<double>(j));
            H[e.position + j] = std::max(H[e.position + j], v + rng.normal(0.0, cfg.entropy_noise));
        }
    }
    for (const auto& dc : decoys) {
        // near miss: uncertainty rises but stays below the threshold
        const double span = cfg.decoy_peak - cfg.entropy_base;
        for (std::size_t j = 0; j < cfg.ramp && j <= dc.position; ++j) {
            double v = cfg.entropy_base + span * static_cast<double>(cfg.ramp - j) / static_cast<double>(cfg.ramp);
            H[dc.position - j] = std::max(H[dc.position - j], v + rng.normal(0.0, cfg.entropy_noise));
        }
    }
    for (std::size_t t = 0; t < N; ++t) {
        if (!is_event[t]) H[t] = std::min(H[t], cap);
        H[t] = std::max(0.0, H[t]);
    }

    // completeness
    tr.complete.assign(N, true);
    for (std::size_t t = 0; t < N; ++t) tr.complete[t] = !rng.bernoulli(cfg.incomplete_rate);
    for (const auto& e : tr.events) {
        for (std::size_t k = 0; k < e.k_opt && e.position + k < N; ++k)
            tr.complete[e.position + k] = !rng.bernoulli(cfg.pre_opt_incomplete_rate);
        if (e.position + e.k_opt < N) tr.complete[e.position + e.k_opt] = true;
    }

    tr.suppress.assign(N, false);
    if (cfg.suppress_rate > 0.0) {
        for (std::size_t t = 0; t < N; ++t)
            if (rng.bernoulli(cfg.suppress_rate))
                for (std::size_t j = t; j < std::min(N, t + 20); ++j) tr.suppress[j] = true;
    }

    // frames
    tr.frames.resize(N);
    for (std::size_t t = 0; t < N; ++t) {
        auto& f = tr.frames[t];
        f.token_index = t;
        f.entropy = H[t];
        f.entropy_delta = t == 0 ? 0.0 : H[t] - H[t - 1];
        double att = cfg.attention_base + rng.normal(0.0, cfg.attention_noise);
        double val = cfg.value_base + std::abs(rng.normal(0.0, cfg.value_noise));
        double hedge_p = cfg.hedge_base;
        f.hidden_summary.assign(cfg.d_h, 0.0);
        for (auto& x : f.hidden_summary) x = rng.normal(0.0, cfg.hidden_noise);
        for (const auto& e : tr.events) {
            long d = static_cast<long>(t) - static_cast<long>(e.position);
            double a = detail::attention_shape(d, cfg.precursor_lead, cfg.precursor_plateau);
            att += cfg.attention_amp * e.strength * a;
            if (d >= -10 && d <= -2) val += cfg.value_amp * e.strength;
            if (d >= -8 && d <= -2) hedge_p = std::max(hedge_p, std::min(0.9, cfg.hedge_elevated * e.strength));
            double w = detail::segment_weight(tr.events, e, t);
            if (w > 0.0) {
                f.hidden_summary[static_cast<std::size_t>(e.event_class)] += cfg.hidden_cue * w;
                f.hidden_summary[3] += cfg.hidden_cue * w * (static_cast<double>(e.k_opt) - 2.5) / 1.5;
            }
            if (a > 0.0) f.hidden_summary[4] += 0.8 * a * e.strength;
        }
        for (const auto& dc : decoys) {
            long d = static_cast<long>(t) - static_cast<long>(dc.position);
            double a = detail::attention_shape(d, cfg.precursor_lead, cfg.precursor_plateau);
            att += cfg.attention_amp * dc.strength * a;
            if (d >= -10 && d <= -2) val += cfg.value_amp * dc.strength;
            if (d >= -8 && d <= -2) hedge_p = std::max(hedge_p, std::min(0.9, cfg.hedge_elevated * dc.strength));
            if (a > 0.0) f.hidden_summary[4] += 0.8 * a * dc.strength;
        }
        f.hidden_summary[cfg.d_h - 1] += tr.complete[t] ? 0.8 : -0.8;
        f.attention_entropy = std::max(0.0, att);
        f.value_norm_delta = std::max(0.0, val);
        f.hedge_flag = rng.bernoulli(hedge_p);
        f.topk_margin = clip01(0.95 - 0.25 * H[t] + rng.normal(0.0, cfg.margin_noise));
    }

    // context embeddings: slowly drifting background, pulled toward the need around each event
    tr.context_embeddings.resize(N);
    Vec bg = rng.unit_vector(cfg.d_emb);
    for (std::size_t t = 0; t < N; ++t) {
        if (t > 0) {
            Vec step = rng.unit_vector(cfg.d_emb);
            for (std::size_t i = 0; i < bg.size(); ++i) bg[i] += cfg.background_drift * step[i];
            bg = normalized(bg);
        }
        const UncertaintyEvent* active = nullptr;
        double best = 1e9;
        for (const auto& e : tr.events) {
            long d = static_cast<long>(t) - static_cast<long>(e.position);
            long k = static_cast<long>(e.k_opt);
            if (d < -20 || d > k + 4) continue;
            double ang = d <= k ? cfg.min_angle + cfg.approach_slope * static_cast<double>(k - d)
                                : cfg.min_angle + cfg.depart_slope * static_cast<double>(d - k);
            ang = std::min(ang, cfg.max_angle);
            if (ang < best) {
                best = ang;
                active = &e;
            }
        }
        double noise = rng.normal(0.0, cfg.angle_noise);
        if (!active) {
            tr.context_embeddings[t] = bg;
            continue;
        }
        double ang = best + (tr.complete[t] ? 0.0 : cfg.incomplete_penalty) + noise;
        ang = std::clamp(ang, 0.0, 90.0);
        tr.context_embeddings[t] = rotate_from(active->need_embedding, bg, deg2rad(ang));
    }

    if (tr.events.empty()) {
        tr.prompt_embedding = tr.context_embeddings[0];
    } else {
        tr.prompt_embedding = rotate_from(tr.events.front().need_embedding, tr.context_embeddings[0],
                                          deg2rad(cfg.prompt_angle));
    }
    return tr;
}

// Positions where entropy first crosses theta from below.
inline std::vector<std::size_t> crossings(const Trace& tr, double theta) {
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t < tr.size(); ++t) {
        bool above = tr.frames[t].entropy >= theta;
        bool prev = t > 0 && tr.frames[t - 1].entropy >= theta;
        if (above && !prev) out.push_back(t);
    }
    return out;
}

inline std::vector<Trace> synth_traces(const SynthConfig& cfg, std::uint64_t seed, std::size_t count) {
    std::vector<Trace> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(synth_trace(cfg, derive_seed(seed, 0x5eed, i)));
    return out;
}

// ---------------------------------------------------------------- file format

namespace detail {

template <typename T>
T field(const nlohmann::json& j, const char* name, std::size_t line) {
    auto it = j.find(name);
    if (it == j.end()) throw ParseError(std::string("missing field '") + name + "'", line);
    try {
        return it->get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ParseError(std::string("bad value for field '") + name + "'", line);
    }
}

}  // namespace detail

inline void write_traces(std::ostream& out, const std::vector<Trace>& traces) {
    using nlohmann::json;
    for (const auto& tr : traces) {
        json ev = json::array();
        for (const auto& e : tr.events)
            ev.push_back({{"position", e.position}, {"topic_id", e.topic_id}, {"class", to_string(e.event_class)},
                          {"need", e.need_embedding}, {"gold_utility", e.gold_utility}, {"k_opt", e.k_opt},
                          {"strength", e.strength}});
        json h = {{"trace", {{"seed", tr.seed}, {"theta", tr.theta}, {"n", tr.size()}, {"prompt", tr.prompt_embedding},
                             {"events", ev}}}};
        out << h.dump() << "\n";
        for (std::size_t t = 0; t < tr.size(); ++t) {
            const auto& f = tr.frames[t];
            json r = {{"t", f.token_index},
                      {"entropy", f.entropy},
                      {"entropy_delta", f.entropy_delta},
                      {"attention_entropy", f.attention_entropy},
                      {"value_norm_delta", f.value_norm_delta},
                      {"topk_margin", f.topk_margin},
                      {"hedge", f.hedge_flag},
                      {"hidden", f.hidden_summary},
                      {"ctx", tr.context_embeddings[t]},
                      {"complete", static_cast<bool>(tr.complete[t])},
                      {"suppress", static_cast<bool>(tr.suppress[t])}};
            out << r.dump() << "\n";
        }
    }
}

inline std::vector<Trace> read_traces(std::istream& in) {
    using detail::field;
    std::vector<Trace> out;
    std::string line;
    std::size_t lineno = 0;
    std::size_t expected = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("malformed record: ") + e.what(), lineno);
        }
        if (j.contains("trace")) {
            if (expected != 0) throw ParseError("trace header before previous trace completed", lineno);
            const auto& h = j["trace"];
            Trace tr;
            tr.seed = field<std::uint64_t>(h, "seed", lineno);
            tr.theta = field<double>(h, "theta", lineno);
            expected = field<std::size_t>(h, "n", lineno);
            tr.prompt_embedding = field<Vec>(h, "prompt", lineno);
            for (const auto& e : field<nlohmann::json>(h, "events", lineno)) {
                UncertaintyEvent ue;
                ue.position = field<std::size_t>(e, "position", lineno);
                ue.topic_id = field<int>(e, "topic_id", lineno);
                ue.event_class = event_class_from(field<std::string>(e, "class", lineno));
                ue.need_embedding = field<Vec>(e, "need", lineno);
                ue.gold_utility = field<double>(e, "gold_utility", lineno);
                ue.k_opt = field<std::size_t>(e, "k_opt", lineno);
                ue.strength = field<double>(e, "strength", lineno);
                tr.events.push_back(std::move(ue));
            }
            out.push_back(std::move(tr));
            if (expected == 0) throw ParseError("trace with zero frames", lineno);
            continue;
        }
        if (out.empty() || expected == 0) throw ParseError("frame record outside a trace", lineno);
        auto& tr = out.back();
        SignalFrame f;
        f.token_index = field<std::size_t>(j, "t", lineno);
        f.entropy = field<double>(j, "entropy", lineno);
        f.entropy_delta = field<double>(j, "entropy_delta", lineno);
        f.attention_entropy = field<double>(j, "attention_entropy", lineno);
        f.value_norm_delta = field<double>(j, "value_norm_delta", lineno);
        f.topk_margin = field<double>(j, "topk_margin", lineno);
        f.hedge_flag = field<bool>(j, "hedge", lineno);
        f.hidden_summary = field<Vec>(j, "hidden", lineno);
        if (f.token_index != tr.frames.size()) throw ParseError("token index out of order", lineno);
        tr.frames.push_back(std::move(f));
        tr.context_embeddings.push_back(field<Vec>(j, "ctx", lineno));
        tr.complete.push_back(field<bool>(j, "complete", lineno));
        tr.suppress.push_back(field<bool>(j, "suppress", lineno));
        --expected;
    }
    if (expected != 0) throw ParseError("truncated trace", lineno);
    return out;
}

inline void export_traces(const std::vector<Trace>& traces, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    write_traces(out, traces);
}

inline std::vector<Trace> import_traces(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read " + path);
    return read_traces(in);
}

}  // namespace pfrag
