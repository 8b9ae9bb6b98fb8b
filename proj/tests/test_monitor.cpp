#include <gtest/gtest.h>

#include "support.hpp"

using namespace pfrag;
using namespace pfrag::testing;

namespace {

const Config cfg;

const Corpus& corpus() {
    static Corpus c = build_corpus(cfg.synth, cfg.retriever);
    return c;
}

const MonitorParams& trained() {
    static MonitorParams M = train_monitor_for(cfg, corpus(), 1);
    return M;
}

const std::vector<LabeledInstance>& held_out() {
    static auto d = label_traces(synth_traces(cfg.synth, 0x3e1d, 300), corpus(), LabelConfig::from(cfg));
    return d;
}

std::size_t d_c() { return context_feature_dim(cfg.synth.d_emb, cfg.synth.d_h); }

}  // namespace

TEST(Scores, ZeroWeights) {
    auto M = MonitorParams::zeros(d_c(), cfg.synth.d_emb);
    Vec h(d_c(), 0.3);
    auto s = context_score(M, h);
    for (double v : s) EXPECT_DOUBLE_EQ(v, 0.5);
    EXPECT_EQ(best_k(s), 0u);
    Rng rng(1);
    auto e = rng.unit_vector(cfg.synth.d_emb);
    EXPECT_DOUBLE_EQ(sufficiency(M, e, {}), 0.5);
    EXPECT_DOUBLE_EQ(clarity(M, h), 0.5);
}

TEST(Scores, TieBreakTowardSmallerK) {
    EXPECT_EQ(best_k({0.2, 0.7, 0.7, 0.1, 0.7, 0.0}), 1u);
    EXPECT_EQ(best_k({0.2, 0.3, 0.4, 0.5, 0.6, 0.9}), 5u);
}

TEST(Scores, SufficiencyRejectsNonUnitContext) {
    auto M = MonitorParams::zeros(d_c(), cfg.synth.d_emb);
    Vec e(cfg.synth.d_emb, 0.0);
    e[0] = 1.1;
    EXPECT_THROW(sufficiency(M, e, {}), std::invalid_argument);
}

TEST(Scores, SufficiencyMonotoneInMaxCosine) {
    auto M = trained();
    ASSERT_GT(M.ws[M.d_emb], 0.0);
    Rng rng(2);
    auto e = rng.unit_vector(cfg.synth.d_emb);
    double prev = 0.0;
    for (double m = -1.0; m <= 1.0; m += 0.1) {
        double s = sufficiency_from(M, e, m);
        EXPECT_GE(s, prev);
        prev = s;
    }
}

TEST(Trained, WaitChoiceForFactualEvents) {
    const auto& M = trained();
    std::array<double, 3> ksum{};
    std::array<std::size_t, 3> n{};
    std::size_t factual_ok = 0;
    for (const auto& d : held_out()) {
        if (!d.wait_qualities) continue;
        auto c = static_cast<std::size_t>(d.event_class);
        auto k = best_k(context_score(M, d.context_features));
        ksum[c] += static_cast<double>(k);
        ++n[c];
        if (d.event_class == EventClass::Factual) factual_ok += k == 3 || k == 4;
    }
    ASSERT_GT(n[0], 50u);
    EXPECT_GE(static_cast<double>(factual_ok) / n[0], 0.5);
    EXPECT_LT(ksum[2] / n[2], ksum[0] / n[0]);
}

TEST(Trained, SufficiencyOnDuplicatesAndOrthogonalDocs) {
    const auto& M = trained();
    Rng rng(3);
    std::size_t dup_ok = 0, orth_ok = 0;
    for (int i = 0; i < 100; ++i) {
        auto e = rng.unit_vector(cfg.synth.d_emb);
        dup_ok += sufficiency(M, e, {e}) > 0.8;
        auto o = orthogonal_unit(rng.unit_vector(cfg.synth.d_emb), e);
        orth_ok += sufficiency(M, e, {o}) < 0.5;
    }
    EXPECT_EQ(dup_ok, 100u);
    EXPECT_EQ(orth_ok, 100u);
}

TEST(Trained, SufficiencyHeldOutAuroc) {
    const auto& M = trained();
    std::vector<double> s;
    std::vector<bool> l;
    for (const auto& d : held_out()) {
        s.push_back(sufficiency_from(M, d.suff_context, d.suff_max_cos));
        l.push_back(d.sufficiency_label);
    }
    EXPECT_GE(auroc(s, l), 0.8);
}

TEST(Trained, ClaritySeparatesCompleteContexts) {
    const auto& M = trained();
    double c_sum = 0.0, m_sum = 0.0;
    std::size_t c_n = 0, m_n = 0;
    for (const auto& d : held_out()) {
        double s = clarity(M, d.clarity_features);
        if (d.clarity_score > 0.5) {
            c_sum += s;
            ++c_n;
        } else {
            m_sum += s;
            ++m_n;
        }
    }
    ASSERT_GT(c_n, 0u);
    ASSERT_GT(m_n, 0u);
    EXPECT_GE(c_sum / c_n, 0.7);
    EXPECT_LT(m_sum / m_n, 0.7);
}

TEST(Trained, HeldOutWaitMse) { EXPECT_LT(wait_mse(trained(), held_out()), 0.05); }

TEST(Train, LossDecreasesAndIsDeterministic) {
    Config c = quick_config();
    auto data = label_traces(synth_traces(c.synth, 77, 80), corpus(), LabelConfig::from(c));
    c.monitor.epochs = 5;
    auto lw = MonitorLossWeights::from(c.monitor);
    auto a = train_monitor(data, c.monitor, 4);
    auto zero = MonitorParams::zeros(data[0].context_features.size(), data[0].suff_context.size());
    EXPECT_LT(monitor_loss(a, data, lw), monitor_loss(zero, data, lw));
    EXPECT_EQ(serialize(a), serialize(train_monitor(data, c.monitor, 4)));
}

TEST(Train, ZeroLossWeightsLeaveParamsUnchanged) {
    Config c = quick_config();
    auto data = label_traces(synth_traces(c.synth, 78, 20), corpus(), LabelConfig::from(c));
    c.monitor.beta = c.monitor.gamma = c.monitor.delta = 0.0;
    c.monitor.epochs = 3;
    auto P = train_monitor(data, c.monitor, 1);
    EXPECT_EQ(P, MonitorParams::zeros(data[0].context_features.size(), data[0].suff_context.size()));
    EXPECT_THROW(train_monitor({}, c.monitor, 1), std::invalid_argument);
}

TEST(Gradient, MatchesFiniteDifferences) {
    auto data = label_traces(synth_traces(cfg.synth, 0x96, 6), corpus(), LabelConfig::from(cfg));
    auto M = MonitorParams::zeros(data[0].context_features.size(), data[0].suff_context.size());
    Rng rng(8);
    for (std::size_t j = 0; j < M.n_weights(); ++j) M.weight(j) = rng.normal(0.0, 0.1);
    auto lw = MonitorLossWeights::from(cfg.monitor);
    auto g = monitor_gradient(M, data, lw);
    const double h = 1e-5;
    for (int i = 0; i < 100; ++i) {
        std::size_t j = rng.index(M.n_weights());
        double o = M.weight(j);
        M.weight(j) = o + h;
        double up = monitor_loss(M, data, lw);
        M.weight(j) = o - h;
        double dn = monitor_loss(M, data, lw);
        M.weight(j) = o;
        double num = (up - dn) / (2 * h);
        EXPECT_LT(std::abs(num - g[j]) / std::max({std::abs(num), std::abs(g[j]), 1e-6}), 1e-4) << "coord " << j;
    }
}

TEST(Serialization, RoundTripIsBitExact) {
    EXPECT_EQ(deserialize_monitor(serialize(trained())), trained());
}
