#pragma once

#include <string>
#include <vector>

#include "pfrag/pfrag.hpp"

namespace pfrag::testing {

inline Config explicit_events(Config c, const std::vector<std::size_t>& positions, int topic = -1) {
    c.synth.explicit_events = true;
    c.synth.events.clear();
    for (auto p : positions) c.synth.events.push_back({p, EventClass::Factual, topic});
    return c;
}

// p = 0.9 when an event lies in the next `horizon` tokens
inline ScoreFn oracle_score(std::size_t horizon) {
    return [horizon](const Trace& tr, std::size_t t) {
        for (const auto& e : tr.events)
            if (e.position > t && e.position <= t + horizon) return 0.9;
        return 0.1;
    };
}

// Entropy alternates around the trigger threshold, then stays high, then drops.
inline Trace oscillating_trace(const Config& cfg, std::uint64_t seed) {
    Config c = cfg;
    c.synth.explicit_events = true;
    c.synth.events.clear();
    c.synth.length = 260;
    Trace tr = synth_trace(c.synth, seed);
    for (std::size_t t = 0; t < tr.size(); ++t) {
        double h = 1.0;
        if (t >= 20 && t < 60) h = (t % 2) ? 2.2 : 1.0;
        if (t >= 60 && t < 200) h = 2.2;
        tr.frames[t].entropy = h;
        tr.frames[t].entropy_delta = t ? h - tr.frames[t - 1].entropy : 0.0;
    }
    return tr;
}

inline ScoreFn entropy_score(double cut) {
    return [cut](const Trace& tr, std::size_t t) { return tr.frames[t].entropy > cut ? 0.9 : 0.1; };
}

// smaller training budget for unit tests
inline Config quick_config() {
    Config c;
    c.train.traces = 40;
    c.train.epochs = 20;
    c.monitor.traces = 150;
    c.monitor.epochs = 20;
    c.bench.traces = 30;
    return c;
}

inline std::size_t count_kind(const EventLog& log, const std::string& kind) {
    std::size_t n = 0;
    for (const auto& e : log) n += e.kind == kind;
    return n;
}

inline std::size_t count_enqueues(const EventLog& log, const std::string& kind) {
    std::size_t n = 0;
    for (const auto& e : log) n += e.kind == "enqueue" && e.data.at("kind") == kind;
    return n;
}

}  // namespace pfrag::testing
