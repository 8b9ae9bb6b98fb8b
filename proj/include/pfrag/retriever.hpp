#pragma once

#include <algorithm>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "pfrag/common.hpp"
#include "pfrag/config.hpp"

namespace pfrag {

struct Document {
    std::size_t doc_id = 0;
    Vec embedding;
    int topic_id = 0;
    bool operator==(const Document&) const = default;
};

struct Corpus {
    std::size_t d_emb = 0;
    std::vector<Vec> topic_prototypes;
    std::vector<int> uncovered;  // sorted topic ids with no documents
    std::vector<Document> docs;

    bool is_covered(int topic) const {
        return !std::binary_search(uncovered.begin(), uncovered.end(), topic);
    }
    bool operator==(const Corpus&) const = default;
};

// Topic prototypes are shared by the trace generator and the corpus.
inline std::vector<Vec> make_topics(std::uint64_t world_seed, std::size_t n_topics, std::size_t d_emb) {
    Rng rng(derive_seed(world_seed, 0x70b1c5));
    std::vector<Vec> out;
    out.reserve(n_topics);
    for (std::size_t i = 0; i < n_topics; ++i) out.push_back(rng.unit_vector(d_emb));
    return out;
}

inline Corpus build_corpus(const SynthConfig& s, const RetrieverConfig& r) {
    Corpus c;
    c.d_emb = s.d_emb;
    c.topic_prototypes = make_topics(s.world_seed, s.n_topics, s.d_emb);
    Rng rng(derive_seed(s.world_seed, 0xc0a905));
    std::vector<int> ids(s.n_topics);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.index(i)]);
    auto n_unc = static_cast<std::size_t>(r.uncovered_fraction * static_cast<double>(s.n_topics));
    c.uncovered.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_unc));
    std::sort(c.uncovered.begin(), c.uncovered.end());
    for (std::size_t t = 0; t < s.n_topics; ++t) {
        if (!c.is_covered(static_cast<int>(t))) continue;
        for (std::size_t j = 0; j < r.docs_per_topic; ++j) {
            double ang = std::min(std::abs(rng.normal()) * r.doc_angle, 2.5 * r.doc_angle);
            Vec other = rng.unit_vector(s.d_emb);
            Document d;
            d.doc_id = c.docs.size();
            d.topic_id = static_cast<int>(t);
            d.embedding = rotate_from(c.topic_prototypes[t], other, deg2rad(ang));
            c.docs.push_back(std::move(d));
        }
    }
    return c;
}

struct LognormalParams {
    double mu = 0.0;
    double sigma = 0.0;
};

constexpr double kZ95 = 1.6449;

inline LognormalParams fit_lognormal(double median_ms, double p95_ms) {
    if (!(p95_ms > median_ms && median_ms > 0.0))
        throw std::invalid_argument("fit_lognormal requires p95 > median > 0");
    return {std::log(median_ms), (std::log(p95_ms) - std::log(median_ms)) / kZ95};
}

struct LatencyModel {
    double median_ms = 125.0;
    double p95_ms = 180.0;
    double floor_ms = 1.0;
    double fixed_ms = 0.0;

    static LatencyModel from(const RetrieverConfig& r) {
        return {r.latency_median, r.latency_p95, r.latency_floor, r.latency_fixed};
    }

    double from_normal(double z) const {
        if (fixed_ms > 0.0) return fixed_ms;
        auto p = fit_lognormal(median_ms, p95_ms);
        return std::max(floor_ms, std::exp(p.mu + p.sigma * z));
    }
    double sample(Rng& rng) const { return from_normal(rng.normal()); }
    // keyed draw: the same key yields the same latency in every mode
    double draw(std::uint64_t seed, std::uint64_t kind, std::uint64_t key) const {
        Rng rng(derive_seed(seed, kind, key));
        return sample(rng);
    }
};

struct ScoredDoc {
    std::size_t doc_id = 0;
    double score = 0.0;
};

// Top-k documents by cosine; with several queries a doc scores its best cosine over them.
inline std::vector<ScoredDoc> rank(const Corpus& c, const std::vector<Vec>& queries, std::size_t k) {
    if (c.docs.empty()) throw Error("retrieve: empty corpus");
    require(k >= 1, "retrieve: k_docs must be >= 1");
    require(!queries.empty(), "retrieve: no queries");
    std::vector<ScoredDoc> all;
    all.reserve(c.docs.size());
    for (const auto& d : c.docs) {
        double best = -2.0;
        for (const auto& q : queries) best = std::max(best, cosine(q, d.embedding));
        all.push_back({d.doc_id, best});
    }
    auto cmp = [](const ScoredDoc& a, const ScoredDoc& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.doc_id < b.doc_id;
    };
    std::size_t kk = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(kk), all.end(), cmp);
    all.resize(kk);
    return all;
}

struct RetrievalResult {
    std::vector<ScoredDoc> docs;
    double latency_ms = 0.0;
};

inline RetrievalResult retrieve(const Corpus& c, const std::vector<Vec>& queries, std::size_t k,
                                const LatencyModel& lat, std::uint64_t seed) {
    RetrievalResult r;
    r.docs = rank(c, queries, k);
    Rng rng(seed);
    r.latency_ms = lat.sample(rng);
    return r;
}

inline RetrievalResult retrieve(const Corpus& c, const Vec& query, std::size_t k, const LatencyModel& lat,
                                std::uint64_t seed) {
    return retrieve(c, std::vector<Vec>{query}, k, lat, seed);
}

inline std::vector<Vec> doc_embeddings(const Corpus& c, const std::vector<ScoredDoc>& docs) {
    std::vector<Vec> out;
    out.reserve(docs.size());
    for (const auto& d : docs) out.push_back(c.docs.at(d.doc_id).embedding);
    return out;
}

inline void export_corpus(const Corpus& c, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    nlohmann::json h;
    h["corpus"] = {{"d_emb", c.d_emb}, {"n_topics", c.topic_prototypes.size()}, {"uncovered", c.uncovered}};
    out << h.dump() << "\n";
    for (std::size_t t = 0; t < c.topic_prototypes.size(); ++t)
        out << nlohmann::json{{"topic", t}, {"emb", c.topic_prototypes[t]}}.dump() << "\n";
    for (const auto& d : c.docs)
        out << nlohmann::json{{"doc", d.doc_id}, {"topic", d.topic_id}, {"emb", d.embedding}}.dump() << "\n";
}

inline Corpus import_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read " + path);
    Corpus c;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            if (j.contains("corpus")) {
                c.d_emb = j["corpus"].at("d_emb").get<std::size_t>();
                c.uncovered = j["corpus"].at("uncovered").get<std::vector<int>>();
            } else if (j.contains("doc")) {
                Document d;
                d.doc_id = j.at("doc").get<std::size_t>();
                d.topic_id = j.at("topic").get<int>();
                d.embedding = j.at("emb").get<Vec>();
                if (d.doc_id != c.docs.size()) throw ParseError("doc ids must be dense and ordered", lineno);
                c.docs.push_back(std::move(d));
            } else {
                c.topic_prototypes.push_back(j.at("emb").get<Vec>());
            }
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(e.what(), lineno);
        }
    }
    return c;
}

}  // namespace pfrag
