#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace pfrag;
using namespace pfrag::testing;

namespace {

struct Fixture {
    QueryConfig cfg;
    Vec e_c, centroid;
    Fixture() {
        Rng rng(12);
        e_c = rng.unit_vector(64);
        centroid = rng.unit_vector(64);
    }
};

}  // namespace

TEST(Strategy, BoundariesGoToLowerBand) {
    QueryConfig cfg;
    EXPECT_EQ(strategy_for(0.81, cfg), Strategy::Focused);
    EXPECT_EQ(strategy_for(0.8, cfg), Strategy::Exploratory);
    EXPECT_EQ(strategy_for(0.51, cfg), Strategy::Exploratory);
    EXPECT_EQ(strategy_for(0.5, cfg), Strategy::Broad);
    EXPECT_EQ(strategy_for(0.0, cfg), Strategy::Broad);
}

TEST(BuildQueries, FocusedIsTheContext) {
    Fixture f;
    auto qs = build_queries(f.e_c, 0.9, f.centroid, 40, f.cfg);
    ASSERT_EQ(qs.size(), 1u);
    EXPECT_EQ(qs[0].strategy, Strategy::Focused);
    EXPECT_NEAR(cosine(qs[0].embedding, f.e_c), 1.0, 1e-12);
    EXPECT_EQ(qs[0].origin_token, 40u);
}

TEST(BuildQueries, ExploratoryVariantsAt15Degrees) {
    Fixture f;
    auto qs = build_queries(f.e_c, 0.65, f.centroid, 0, f.cfg);
    ASSERT_EQ(qs.size(), 3u);
    double c15 = std::cos(deg2rad(15.0));
    for (std::size_t i = 0; i < qs.size(); ++i) {
        EXPECT_TRUE(is_unit(qs[i].embedding));
        EXPECT_EQ(qs[i].variant_index, i);
        EXPECT_GE(cosine(qs[i].embedding, f.e_c), c15 - 1e-12);
        for (std::size_t j = i + 1; j < qs.size(); ++j) EXPECT_LT(cosine(qs[i].embedding, qs[j].embedding), 1.0);
    }
}

TEST(BuildQueries, BroadBlendsTowardCentroid) {
    Fixture f;
    auto qs = build_queries(f.e_c, 0.3, f.centroid, 0, f.cfg);
    ASSERT_EQ(qs.size(), 1u);
    double a = cosine(qs[0].embedding, f.e_c), b = cosine(qs[0].embedding, f.centroid);
    EXPECT_GT(a, 0.0);
    EXPECT_LT(a, 1.0);
    EXPECT_GT(b, 0.0);
    EXPECT_LT(b, 1.0);
}

TEST(BuildQueries, DeterministicAndValidated) {
    Fixture f;
    auto a = build_queries(f.e_c, 0.7, f.centroid, 3, f.cfg);
    auto b = build_queries(f.e_c, 0.7, f.centroid, 3, f.cfg);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].embedding, b[i].embedding);
    Vec bad = f.e_c;
    bad[0] = std::nan("");
    EXPECT_THROW(build_queries(bad, 0.9, f.centroid, 0, f.cfg), std::invalid_argument);
    EXPECT_THROW(build_queries(f.e_c, 1.5, f.centroid, 0, f.cfg), std::invalid_argument);
}

TEST(Qrs, IdentityAndOrthogonal) {
    Vec q{1, 0, 0};
    EXPECT_DOUBLE_EQ(qrs(q, {Vec{1, 0, 0}}), 1.0);
    EXPECT_DOUBLE_EQ(qrs(q, {Vec{0, 1, 0}}), 0.0);
    EXPECT_DOUBLE_EQ(qrs(q, {Vec{-1, 0, 0}}), 0.0);
    EXPECT_THROW(qrs(q, {}), std::invalid_argument);
}

TEST(Qrs, WaitingImprovesFactualQueries) {
    Config c;
    auto traces = synth_traces(c.synth, 0x9e5, 300);
    auto corpus = build_corpus(c.synth, c.retriever);
    double at_k3 = 0.0, at_0 = 0.0;
    std::size_t n = 0, better = 0, total = 0;
    for (const auto& tr : traces)
        for (const auto& e : tr.events) {
            if (e.position + 5 >= tr.size()) continue;
            auto score = [&](std::size_t t) {
                auto q = build_queries(tr.context_embeddings[t], 0.9, Vec{}, t, c.query);
                return qrs(q, doc_embeddings(corpus, rank(corpus, query_embeddings(q), c.retriever.k_docs)));
            };
            double q0 = score(e.position), qk = score(e.position + e.k_opt);
            ++total;
            better += qk >= q0;
            if (e.event_class != EventClass::Factual) continue;
            at_0 += q0;
            at_k3 += score(e.position + 3);
            ++n;
        }
    ASSERT_GT(n, 50u);
    EXPECT_GE(at_k3 / n - at_0 / n, 0.1);
    EXPECT_GE(static_cast<double>(better) / total, 0.8);
}
