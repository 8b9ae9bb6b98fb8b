#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace pfrag;
using namespace pfrag::testing;

namespace {

const Config cfg;

const PredictorParams& trained() {
    static PredictorParams P = train_predictor(cfg, 1);
    return P;
}

const std::vector<Trace>& held_out() {
    static std::vector<Trace> t = synth_traces(cfg.synth, 0x7e57, 150);
    return t;
}

}  // namespace

TEST(Predict, ZeroParamsGiveHalf) {
    auto P = PredictorParams::zeros(kWindow * frame_dim(cfg.synth.d_h), cfg.train.d_z);
    SignalFrame neutral;
    neutral.hidden_summary.assign(cfg.synth.d_h, 0.0);
    std::vector<SignalFrame> frames(kWindow, neutral);
    EXPECT_DOUBLE_EQ(predict(P, frames, Vec{0, 0, 0}), 0.5);
}

TEST(Predict, PadsEarlyWindowsWithNeutralFrames) {
    auto tr = synth_trace(cfg.synth, 2);
    auto w = window_frames(tr, 3);
    ASSERT_EQ(w.size(), kWindow);
    for (std::size_t i = 0; i < kWindow - 4; ++i) {
        EXPECT_DOUBLE_EQ(w[i].entropy, 0.0);
        EXPECT_FALSE(w[i].hedge_flag);
    }
    EXPECT_EQ(w.back(), tr.frames[3]);
}

TEST(Predict, RejectsNonFiniteFeatures) {
    const auto& P = trained();
    auto d = make_instance(held_out()[0], 30, false, 0);
    d.x[5] = std::nan("");
    EXPECT_THROW(predict(P, d.x, d.o), std::invalid_argument);
    d = make_instance(held_out()[0], 30, false, 0);
    d.o[0] = INFINITY;
    EXPECT_THROW(predict(P, d.x, d.o), std::invalid_argument);
}

TEST(MakeLabel, WindowArithmetic) {
    Config c = explicit_events(cfg, {20});
    c.synth.length = 100;
    auto tr = synth_trace(c.synth, 1);
    EXPECT_TRUE(make_label(tr, 12, 2.5, 10));
    EXPECT_FALSE(make_label(tr, 5, 2.5, 10));
    EXPECT_FALSE(make_label(tr, 20, 2.5, 10));
    EXPECT_THROW(make_label(tr, 95, 2.5, 10), std::out_of_range);
    Config none = explicit_events(cfg, {});
    none.synth.length = 100;
    auto quiet = synth_trace(none.synth, 1);
    for (std::size_t t = 0; t + 10 < 100; ++t) EXPECT_FALSE(make_label(quiet, t, 2.5, 10));
}

TEST(Auroc, SmallExamples) {
    EXPECT_DOUBLE_EQ(auroc({0.9, 0.1}, {true, false}), 1.0);
    EXPECT_DOUBLE_EQ(auroc({0.5, 0.5}, {true, false}), 0.5);
    EXPECT_DOUBLE_EQ(auroc({0.1, 0.9}, {true, false}), 0.0);
    EXPECT_THROW(auroc({0.1, 0.2}, {true, true}), std::invalid_argument);
}

TEST(Auroc, MatchesBruteForce) {
    Rng rng(31);
    std::vector<double> s(200);
    std::vector<bool> l(200);
    for (std::size_t i = 0; i < 200; ++i) {
        s[i] = std::round(rng.uniform() * 30.0);
        l[i] = rng.bernoulli(0.3);
    }
    l[0] = true;
    l[1] = false;
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < 200; ++i)
        for (std::size_t j = 0; j < 200; ++j)
            if (l[i] && !l[j]) {
                pairs += 1;
                wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
            }
    EXPECT_NEAR(auroc(s, l), wins / pairs, 1e-12);
}

TEST(Train, RejectsSingleClass) {
    auto data = make_predictor_instances(synth_traces(cfg.synth, 5, 3), 2.5, 10, 1.0, 1);
    for (auto& d : data) d.label = true;
    EXPECT_THROW(train_supervised(data, cfg.train), std::invalid_argument);
}

TEST(Train, LowersLossAndIsDeterministic) {
    Config c = quick_config();
    c.train.traces = 20;
    c.train.epochs = 5;
    auto data = make_predictor_instances(synth_traces(c.synth, 6, 20), 2.5, 10, 1.0, 2);
    auto zero = PredictorParams::zeros(data[0].x.size(), c.train.d_z);
    fit_standardization(zero, data);
    auto a = train_supervised(data, c.train);
    auto b = train_supervised(data, c.train);
    EXPECT_LT(mean_bce(a, data), mean_bce(zero, data));
    EXPECT_EQ(serialize(a), serialize(b));
}

TEST(Train, HeldOutQuality) {
    const auto& P = trained();
    auto data = make_predictor_instances(held_out(), cfg.prediction.theta, cfg.prediction.horizon, 1.0, 3);
    std::vector<double> s, e;
    std::vector<bool> l;
    for (const auto& d : data) {
        s.push_back(predict(P, d.x, d.o));
        e.push_back(d.o[0]);
        l.push_back(d.label);
    }
    double learned = auroc(s, l);
    EXPECT_GE(learned, 0.75);
    EXPECT_LE(auroc(e, l), learned - 0.05);
}

TEST(Train, FiresBeforeEventsAndStaysQuietElsewhere) {
    const auto& P = trained();
    std::size_t before = 0, above = 0;
    double quiet_sum = 0.0;
    std::size_t quiet_n = 0;
    for (const auto& tr : held_out()) {
        std::vector<bool> near(tr.size(), false);
        for (const auto& ev : tr.events) {
            if (ev.position < 5) continue;
            ++before;
            above += predict_at(P, tr, ev.position - 5) > cfg.prediction.tau_rag;
            for (long t = static_cast<long>(ev.position) - 20; t <= static_cast<long>(ev.position) + 10; ++t)
                if (t >= 0 && t < static_cast<long>(tr.size())) near[t] = true;
        }
        for (std::size_t t = 0; t < tr.size(); ++t)
            if (!near[t] && !make_label(tr, std::min(t, tr.size() - 11), cfg.prediction.theta, 10)) {
                quiet_sum += predict_at(P, tr, t);
                ++quiet_n;
            }
    }
    EXPECT_GE(static_cast<double>(above) / before, 0.7);
    EXPECT_LT(quiet_sum / quiet_n, 0.35);
}

TEST(Train, ShuffledLabelsGiveChance) {
    Config c = quick_config();
    auto train = make_predictor_instances(synth_traces(c.synth, 41, 40), 2.5, 10, 1.0, 4);
    auto test = make_predictor_instances(synth_traces(c.synth, 42, 40), 2.5, 10, 1.0, 5);
    Rng rng(6);
    for (auto* set : {&train, &test})
        for (std::size_t i = set->size(); i > 1; --i) {
            std::size_t j = rng.index(i);
            bool tmp = (*set)[i - 1].label;
            (*set)[i - 1].label = (*set)[j].label;
            (*set)[j].label = tmp;
        }
    c.train.epochs = 10;
    auto P = train_supervised(train, c.train);
    std::vector<double> s;
    std::vector<bool> l;
    for (const auto& d : test) {
        s.push_back(predict(P, d.x, d.o));
        l.push_back(d.label);
    }
    double a = auroc(s, l);
    EXPECT_GE(a, 0.45);
    EXPECT_LE(a, 0.55);
}

TEST(Train, MeanPredictionTracksPositiveRate) {
    const auto& P = trained();
    auto data = make_predictor_instances(synth_traces(cfg.synth, derive_seed(1, 0x7a1), cfg.train.traces), cfg.prediction.theta,
                                         cfg.prediction.horizon, cfg.train.negative_ratio, derive_seed(1, 0x7a2));
    double mp = 0.0, rate = 0.0;
    for (const auto& d : data) {
        mp += predict(P, d.x, d.o);
        rate += d.label;
    }
    EXPECT_NEAR(mp / data.size(), rate / data.size(), 0.1);
}

TEST(Head, MonotoneInPositiveWeights) {
    auto P = PredictorParams::zeros(8, 4);
    P.wp = {0.5, -0.3, 0.0, 1.2, 0.7, -0.1, 0.2};
    Vec z{0.1, 0.2, 0.3, 0.4}, on{0.0, 0.5, -0.5};
    double base = head(P, z, on);
    for (std::size_t i = 0; i < 4; ++i) {
        if (P.wp[i] <= 0.0) continue;
        Vec z2 = z;
        z2[i] += 0.5;
        EXPECT_GT(head(P, z2, on), base);
    }
    Vec on2 = on;
    on2[0] += 0.5;
    EXPECT_GT(head(P, z, on2), base);
}

TEST(Gradient, MatchesFiniteDifferences) {
    auto data = make_predictor_instances(synth_traces(cfg.synth, 0x96, 3), 2.5, 10, 1.0, 3);
    data.resize(48);
    auto P = init_params(data[0].x.size(), 8, 9);
    fit_standardization(P, data);
    auto g = bce_gradient(P, data);
    Rng rng(10);
    const double h = 1e-5;
    for (int i = 0; i < 100; ++i) {
        std::size_t j = rng.index(P.n_weights());
        double o = P.weight(j);
        P.weight(j) = o + h;
        double up = mean_bce(P, data);
        P.weight(j) = o - h;
        double dn = mean_bce(P, data);
        P.weight(j) = o;
        double num = (up - dn) / (2 * h);
        EXPECT_LT(std::abs(num - g[j]) / std::max({std::abs(num), std::abs(g[j]), 1e-6}), 1e-4) << "coord " << j;
    }
}

TEST(Serialization, RoundTripIsBitExact) {
    const auto& P = trained();
    EXPECT_EQ(deserialize_predictor(serialize(P)), P);
    auto bytes = serialize(P);
    EXPECT_THROW(deserialize_monitor(bytes), Error);
}
