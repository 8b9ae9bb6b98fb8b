#pragma once

#include <array>
#include <deque>
#include <optional>
#include <vector>

#include "pfrag/features.hpp"
#include "pfrag/retriever.hpp"
#include "pfrag/trace.hpp"

namespace pfrag {

struct LabelConfig {
    double theta = 2.5;
    std::size_t k_docs = 5;
    double relevance = 0.6;
    std::size_t cache_events = 10;
    std::size_t trigger_span = 10;  // sufficiency features are read from [p - span + 1, p]
    std::uint64_t seed = 0;

    static LabelConfig from(const Config& c) {
        LabelConfig l;
        l.theta = c.prediction.theta;
        l.k_docs = c.retriever.k_docs;
        l.relevance = c.retriever.relevance;
        l.cache_events = c.monitor.cache_events;
        l.trigger_span = c.prediction.horizon;
        return l;
    }
};

struct LabeledInstance {
    std::size_t trace_id = 0;
    std::size_t position = 0;
    bool is_positive = false;
    std::optional<std::array<double, 6>> wait_qualities;
    bool sufficiency_label = false;
    double clarity_score = 0.0;

    EventClass event_class = EventClass::Factual;
    bool has_event = false;
    Vec context_features;  // h_c at the crossing, tokens_since_trigger = 0
    Vec suff_context;      // e_c used for the sufficiency head
    double suff_max_cos = -1.0;
    Vec clarity_features;  // h_c at the crossing
};

inline std::size_t best_wait(const std::array<double, 6>& q) {
    std::size_t k = 0;
    for (std::size_t i = 1; i < q.size(); ++i)
        if (q[i] > q[k]) k = i;
    return k;
}

inline double max_cos(const Vec& e, const std::vector<Vec>& docs) {
    if (docs.empty()) return -1.0;
    double m = -1.0;
    for (const auto& d : docs) m = std::max(m, cosine(e, d));
    return m;
}

// One instance per entropy crossing. Utility follows the EM analogue:
// quality is "a relevant doc is in context", with retrieval at the event vs. without.
inline std::vector<LabeledInstance> label_oracle(const Trace& tr, const Corpus& corpus, const LabelConfig& cfg,
                                                 std::size_t trace_id = 0) {
    std::vector<LabeledInstance> out;
    std::deque<std::vector<Vec>> context;  // docs retrieved at previous events, newest last
    Rng rng(derive_seed(cfg.seed, tr.seed, 0x1abe1));
    const std::size_t N = tr.size();
    for (std::size_t p : crossings(tr, cfg.theta)) {
        LabeledInstance li;
        li.trace_id = trace_id;
        li.position = p;
        li.context_features = context_features(tr, p, 0);
        li.clarity_features = li.context_features;
        li.clarity_score = tr.complete[p] ? 1.0 : 0.0;

        std::vector<Vec> cached;
        for (const auto& batch : context) cached.insert(cached.end(), batch.begin(), batch.end());

        std::size_t span = std::max<std::size_t>(1, cfg.trigger_span);
        std::size_t back = rng.index(span);
        std::size_t sp = p >= back ? p - back : 0;
        li.suff_context = tr.context_embeddings[sp];
        li.suff_max_cos = max_cos(li.suff_context, cached);

        const UncertaintyEvent* ev = tr.event_at(p);
        if (!ev) {
            out.push_back(std::move(li));
            continue;
        }
        li.has_event = true;
        li.event_class = ev->event_class;
        const Vec& need = ev->need_embedding;

        double best_without = -1.0;
        for (const auto& d : cached) best_without = std::max(best_without, cosine(d, need));
        auto ranked = rank(corpus, {tr.context_embeddings[p]}, cfg.k_docs);
        auto fresh = doc_embeddings(corpus, ranked);
        double best_with = best_without;
        for (const auto& d : fresh) best_with = std::max(best_with, cosine(d, need));

        bool em_without = best_without >= cfg.relevance;
        bool em_with = best_with >= cfg.relevance;
        double s = (em_with ? 1.0 : 0.0) - (em_without ? 1.0 : 0.0);
        li.is_positive = s > 0.0;
        li.sufficiency_label = em_without;
        if (li.is_positive) {
            std::array<double, 6> q{};
            for (std::size_t k = 0; k < 6; ++k) {
                std::size_t t = std::min(p + k, N - 1);
                q[k] = clip01(cosine(tr.context_embeddings[t], need));
            }
            li.wait_qualities = q;
        }
        context.push_back(std::move(fresh));
        while (context.size() > cfg.cache_events) context.pop_front();
        out.push_back(std::move(li));
    }
    return out;
}

inline std::vector<LabeledInstance> label_traces(const std::vector<Trace>& traces, const Corpus& corpus,
                                                 const LabelConfig& cfg) {
    std::vector<LabeledInstance> out;
    for (std::size_t i = 0; i < traces.size(); ++i) {
        auto part = label_oracle(traces[i], corpus, cfg, i);
        out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    return out;
}

inline nlohmann::json to_json(const LabeledInstance& li) {
    nlohmann::json j = {{"trace_id", li.trace_id},
                        {"position", li.position},
                        {"is_positive", li.is_positive},
                        {"sufficiency_label", li.sufficiency_label},
                        {"clarity_score", li.clarity_score},
                        {"class", to_string(li.event_class)},
                        {"suff_max_cos", li.suff_max_cos}};
    if (li.wait_qualities) j["wait_qualities"] = *li.wait_qualities;
    return j;
}

}  // namespace pfrag
