#pragma once

#include <vector>

#include "pfrag/common.hpp"
#include "pfrag/config.hpp"
#include "pfrag/retriever.hpp"

namespace pfrag {

enum class Strategy { Focused = 0, Exploratory = 1, Broad = 2 };

inline const char* to_string(Strategy s) {
    switch (s) {
        case Strategy::Focused: return "focused";
        case Strategy::Exploratory: return "exploratory";
        case Strategy::Broad: return "broad";
    }
    return "?";
}

struct Query {
    Vec embedding;
    Strategy strategy = Strategy::Focused;
    std::size_t origin_token = 0;
    std::size_t variant_index = 0;
};

// Boundaries belong to the lower band: 0.8 is Exploratory, 0.5 is Broad.
inline Strategy strategy_for(double confidence, const QueryConfig& cfg) {
    if (confidence > cfg.high) return Strategy::Focused;
    if (confidence > cfg.low) return Strategy::Exploratory;
    return Strategy::Broad;
}

inline std::vector<Vec> perturbation_directions(const QueryConfig& cfg, std::size_t d) {
    Rng rng(derive_seed(cfg.direction_seed, 0xd1));
    std::vector<Vec> out;
    for (std::size_t i = 0; i < cfg.variants; ++i) out.push_back(rng.unit_vector(d));
    return out;
}

// Normalized mean of the trailing window of context embeddings.
inline Vec topic_centroid(const std::vector<Vec>& context, std::size_t upto, std::size_t window) {
    require(upto < context.size(), "topic_centroid: index out of range");
    Vec c(context[0].size(), 0.0);
    std::size_t lo = upto + 1 > window ? upto + 1 - window : 0;
    for (std::size_t t = lo; t <= upto; ++t)
        for (std::size_t i = 0; i < c.size(); ++i) c[i] += context[t][i];
    return normalized(c);
}

inline std::vector<Query> build_queries(const Vec& e_c, double confidence, const Vec& centroid, std::size_t origin,
                                        const QueryConfig& cfg) {
    if (!all_finite(e_c) || norm(e_c) == 0.0) throw std::invalid_argument("build_queries: non-finite context embedding");
    require(confidence >= 0.0 && confidence <= 1.0, "build_queries: confidence must be in [0,1]");
    Vec e = normalized(e_c);
    std::vector<Query> out;
    switch (strategy_for(confidence, cfg)) {
        case Strategy::Focused:
            out.push_back({e, Strategy::Focused, origin, 0});
            break;
        case Strategy::Exploratory: {
            auto dirs = perturbation_directions(cfg, e.size());
            for (std::size_t i = 0; i < dirs.size(); ++i)
                out.push_back({rotate_from(e, dirs[i], deg2rad(cfg.angle)), Strategy::Exploratory, origin, i});
            break;
        }
        case Strategy::Broad: {
            require(centroid.size() == e.size(), "build_queries: centroid size mismatch");
            Vec b(e.size());
            for (std::size_t i = 0; i < e.size(); ++i) b[i] = cfg.blend * e[i] + (1.0 - cfg.blend) * centroid[i];
            if (norm(b) == 0.0) b = e;
            out.push_back({normalized(b), Strategy::Broad, origin, 0});
            break;
        }
    }
    return out;
}

inline std::vector<Vec> query_embeddings(const std::vector<Query>& qs) {
    std::vector<Vec> out;
    for (const auto& q : qs) out.push_back(q.embedding);
    return out;
}

inline double qrs(const Vec& query, const std::vector<Vec>& docs) {
    if (docs.empty()) throw std::invalid_argument("qrs: empty document list");
    double s = 0.0;
    for (const auto& d : docs) s += cosine(query, d);
    return clip01(s / static_cast<double>(docs.size()));
}

// group score: mean over variants
inline double qrs(const std::vector<Query>& qs, const std::vector<Vec>& docs) {
    require(!qs.empty(), "qrs: empty query group");
    double s = 0.0;
    for (const auto& q : qs) s += qrs(q.embedding, docs);
    return s / static_cast<double>(qs.size());
}

}  // namespace pfrag
