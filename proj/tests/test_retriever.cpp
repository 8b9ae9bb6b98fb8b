#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "pfrag/pfrag.hpp"

using namespace pfrag;

namespace {

const Corpus& corpus() {
    static Corpus c = build_corpus(SynthConfig{}, RetrieverConfig{});
    return c;
}

Corpus random_corpus(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Corpus c;
    c.d_emb = 16;
    for (std::size_t i = 0; i < n; ++i) c.docs.push_back({i, rng.unit_vector(16), 0});
    return c;
}

}  // namespace

TEST(Corpus, UnitEmbeddingsAndCoverage) {
    const auto& c = corpus();
    SynthConfig s;
    RetrieverConfig r;
    EXPECT_EQ(c.uncovered.size(), static_cast<std::size_t>(r.uncovered_fraction * s.n_topics));
    EXPECT_EQ(c.docs.size(), (s.n_topics - c.uncovered.size()) * r.docs_per_topic);
    std::vector<std::size_t> per_topic(s.n_topics, 0);
    for (const auto& d : c.docs) {
        EXPECT_TRUE(is_unit(d.embedding));
        ++per_topic[d.topic_id];
    }
    for (std::size_t t = 0; t < s.n_topics; ++t)
        EXPECT_EQ(per_topic[t] > 0, c.is_covered(static_cast<int>(t))) << "topic " << t;
}

TEST(Corpus, ExportImportRoundTrip) {
    auto path = std::filesystem::temp_directory_path() / "pfrag_corpus_test.jsonl";
    export_corpus(corpus(), path.string());
    EXPECT_EQ(import_corpus(path.string()), corpus());
    std::filesystem::remove(path);
}

TEST(Retrieve, ExactDocComesFirst) {
    const auto& c = corpus();
    auto r = retrieve(c, c.docs[17].embedding, 1, LatencyModel{}, 1);
    ASSERT_EQ(r.docs.size(), 1u);
    EXPECT_EQ(r.docs[0].doc_id, 17u);
    EXPECT_NEAR(r.docs[0].score, 1.0, 1e-12);
}

TEST(Retrieve, MatchesBruteForceSort) {
    auto c = random_corpus(500, 4);
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        auto q = rng.unit_vector(16);
        std::vector<ScoredDoc> all;
        for (const auto& d : c.docs) all.push_back({d.doc_id, cosine(q, d.embedding)});
        std::sort(all.begin(), all.end(), [](auto& a, auto& b) {
            return a.score != b.score ? a.score > b.score : a.doc_id < b.doc_id;
        });
        auto got = rank(c, {q}, 5);
        ASSERT_EQ(got.size(), 5u);
        for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(got[i].doc_id, all[i].doc_id);
    }
}

TEST(Retrieve, GroupRankingIsUnionReranked) {
    auto c = random_corpus(300, 5);
    Rng rng(6);
    auto q1 = rng.unit_vector(16), q2 = rng.unit_vector(16);
    auto got = rank(c, {q1, q2}, 5);
    std::vector<ScoredDoc> all;
    for (const auto& d : c.docs) all.push_back({d.doc_id, std::max(cosine(q1, d.embedding), cosine(q2, d.embedding))});
    std::sort(all.begin(), all.end(), [](auto& a, auto& b) { return a.score > b.score; });
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(got[i].doc_id, all[i].doc_id);
}

TEST(Retrieve, TiesBreakByDocId) {
    Corpus c;
    c.d_emb = 2;
    c.docs = {{0, {1, 0}, 0}, {1, {0, 1}, 0}, {2, {0, 1}, 0}};
    auto got = rank(c, {Vec{0, 1}}, 2);
    EXPECT_EQ(got[0].doc_id, 1u);
    EXPECT_EQ(got[1].doc_id, 2u);
}

TEST(Retrieve, Errors) {
    Corpus empty;
    EXPECT_THROW(retrieve(empty, Vec{1, 0}, 1, LatencyModel{}, 1), Error);
    EXPECT_THROW(rank(corpus(), {corpus().docs[0].embedding}, 0), std::invalid_argument);
}

TEST(Latency, FitLognormalClosedForm) {
    auto p = fit_lognormal(125, 180);
    EXPECT_DOUBLE_EQ(p.mu, std::log(125.0));
    EXPECT_NEAR(p.sigma, 0.2216, 1e-4);
    EXPECT_NEAR(fit_lognormal(380, 520).sigma, 0.1906, 1e-4);
    EXPECT_NEAR(fit_lognormal(100, 100.0001).sigma, 0.0, 1e-6);
    EXPECT_THROW(fit_lognormal(180, 125), std::invalid_argument);
    EXPECT_THROW(fit_lognormal(0, 10), std::invalid_argument);
}

TEST(Latency, EmpiricalQuantiles) {
    LatencyModel m;
    Rng rng(2024);
    std::vector<double> v;
    for (int i = 0; i < 10000; ++i) v.push_back(m.sample(rng));
    std::sort(v.begin(), v.end());
    EXPECT_GE(v[4999], 118.0);
    EXPECT_LE(v[4999], 132.0);
    EXPECT_GE(v[9499], 170.0);
    EXPECT_LE(v[9499], 192.0);
    EXPECT_GE(v.front(), m.floor_ms);
}

TEST(Latency, FixedAndKeyedDraws) {
    LatencyModel m;
    m.fixed_ms = 500.0;
    Rng rng(1);
    EXPECT_DOUBLE_EQ(m.sample(rng), 500.0);
    LatencyModel k;
    EXPECT_DOUBLE_EQ(k.draw(3, 2, 99), k.draw(3, 2, 99));
    EXPECT_NE(k.draw(3, 2, 99), k.draw(3, 2, 100));
}

TEST(Latency, IndependentOfQuery) {
    const auto& c = corpus();
    auto a = retrieve(c, c.docs[0].embedding, 5, LatencyModel{}, 77);
    auto b = retrieve(c, c.docs[40].embedding, 5, LatencyModel{}, 77);
    EXPECT_DOUBLE_EQ(a.latency_ms, b.latency_ms);
}
