#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "support.hpp"

using namespace pfrag;
using namespace pfrag::testing;

namespace {

SynthConfig small(std::size_t n, std::vector<EventSpec> events) {
    SynthConfig s;
    s.length = n;
    s.explicit_events = true;
    s.events = std::move(events);
    return s;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= a.size();
    mb /= b.size();
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST(Synth, NoEventsStaysBelowTheta) {
    auto tr = synth_trace(small(100, {}), 1);
    ASSERT_EQ(tr.size(), 100u);
    for (const auto& f : tr.frames) EXPECT_LT(f.entropy, 2.5);
    EXPECT_TRUE(crossings(tr, 2.5).empty());
}

TEST(Synth, SingleEventCrossesAtPositionWithPrecursor) {
    auto tr = synth_trace(small(100, {{20, EventClass::Factual, -1}}), 7);
    EXPECT_LT(tr.frames[19].entropy, 2.5);
    EXPECT_GE(tr.frames[20].entropy, 2.5);
    EXPECT_GT(tr.frames[12].attention_entropy, tr.frames[8].attention_entropy);
    ASSERT_EQ(tr.events.size(), 1u);
    EXPECT_EQ(tr.events[0].position, 20u);
    EXPECT_EQ(crossings(tr, 2.5), std::vector<std::size_t>{20});
}

TEST(Synth, FrameInvariants) {
    SynthConfig s;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        auto tr = synth_trace(s, seed);
        ASSERT_EQ(tr.context_embeddings.size(), tr.size());
        for (std::size_t t = 0; t < tr.size(); ++t) {
            const auto& f = tr.frames[t];
            EXPECT_EQ(f.token_index, t);
            EXPECT_GE(f.entropy, 0.0);
            EXPECT_GE(f.topk_margin, 0.0);
            EXPECT_LE(f.topk_margin, 1.0);
            EXPECT_GE(f.attention_entropy, 0.0);
            EXPECT_GE(f.value_norm_delta, 0.0);
            EXPECT_EQ(f.hidden_summary.size(), s.d_h);
            EXPECT_DOUBLE_EQ(f.entropy_delta, t ? f.entropy - tr.frames[t - 1].entropy : 0.0);
            EXPECT_TRUE(is_unit(tr.context_embeddings[t]));
        }
        for (std::size_t i = 0; i < tr.events.size(); ++i) {
            EXPECT_TRUE(is_unit(tr.events[i].need_embedding));
            if (i) {
                EXPECT_LT(tr.events[i - 1].position, tr.events[i].position);
            }
        }
    }
}

TEST(Synth, CrossingPropertyHoldsForEveryEvent) {
    SynthConfig s;
    std::size_t events = 0;
    for (std::uint64_t seed = 1; seed <= 200; ++seed) {
        auto tr = synth_trace(s, seed);
        auto cx = crossings(tr, s.theta);
        for (const auto& e : tr.events) {
            ++events;
            long lo = static_cast<long>(e.position) - static_cast<long>(s.ramp);
            std::size_t first = tr.size();
            for (std::size_t t = static_cast<std::size_t>(std::max(0L, lo)); t < tr.size(); ++t)
                if (tr.frames[t].entropy >= s.theta) {
                    first = t;
                    break;
                }
            EXPECT_EQ(first, e.position) << "seed " << seed;
        }
    }
    EXPECT_GT(events, 500u);
}

TEST(Synth, DeterministicPerSeed) {
    SynthConfig s;
    EXPECT_EQ(synth_trace(s, 5), synth_trace(s, 5));
    EXPECT_NE(synth_trace(s, 5).frames, synth_trace(s, 6).frames);
}

TEST(Synth, RejectsInvalidConfigs) {
    SynthConfig s = small(0, {});
    EXPECT_THROW(synth_trace(s, 1), std::invalid_argument);
    s = small(100, {});
    s.theta = 0.0;
    EXPECT_THROW(synth_trace(s, 1), std::invalid_argument);
    EXPECT_THROW(synth_trace(small(100, {{100, EventClass::Factual, -1}}), 1), std::invalid_argument);
    EXPECT_THROW(synth_trace(small(100, {{3, EventClass::Factual, -1}}), 1), std::invalid_argument);
}

TEST(Synth, AttentionLeadsEntropyCorrelation) {
    SynthConfig s;
    s.length = 10000;
    s.event_rate = 0.02;
    auto tr = synth_trace(s, 3);
    std::vector<double> a, e;
    for (std::size_t t = 0; t + 10 < tr.size(); ++t) {
        a.push_back(tr.frames[t].attention_entropy);
        e.push_back(tr.frames[t + 10].entropy);
    }
    double r = pearson(a, e);
    EXPECT_GE(r, 0.32);
    EXPECT_LE(r, 0.52);
}

TEST(Synth, PrecursorWindowHasHigherAttention) {
    SynthConfig s;
    double in_sum = 0.0, out_sum = 0.0;
    std::size_t in_n = 0, out_n = 0, events = 0;
    for (std::uint64_t seed = 1; events < 1000; ++seed) {
        auto tr = synth_trace(s, seed);
        std::vector<bool> near(tr.size(), false);
        for (const auto& e : tr.events) {
            ++events;
            for (std::size_t d = 1; d <= 10 && d <= e.position; ++d) {
                in_sum += tr.frames[e.position - d].attention_entropy;
                ++in_n;
            }
            for (long t = static_cast<long>(e.position) - 20; t <= static_cast<long>(e.position) + 10; ++t)
                if (t >= 0 && t < static_cast<long>(tr.size())) near[t] = true;
        }
        for (std::size_t t = 0; t < tr.size(); ++t)
            if (!near[t]) {
                out_sum += tr.frames[t].attention_entropy;
                ++out_n;
            }
    }
    EXPECT_GT(in_sum / in_n, out_sum / out_n + 0.05);
}

TEST(Synth, HedgeElevatedBeforeEvents) {
    SynthConfig s;
    std::size_t in_n = 0, in_h = 0, all_n = 0, all_h = 0;
    for (std::uint64_t seed = 1; seed <= 300; ++seed) {
        auto tr = synth_trace(s, seed);
        for (const auto& e : tr.events)
            for (std::size_t d = 2; d <= 8 && d <= e.position; ++d) {
                ++in_n;
                in_h += tr.frames[e.position - d].hedge_flag;
            }
        for (const auto& f : tr.frames) {
            ++all_n;
            all_h += f.hedge_flag;
        }
    }
    EXPECT_GT(static_cast<double>(in_h) / in_n, 2.0 * static_cast<double>(all_h) / all_n);
}

TEST(TraceFile, RoundTripIsExact) {
    SynthConfig s;
    auto traces = synth_traces(s, 17, 3);
    std::stringstream ss;
    write_traces(ss, traces);
    EXPECT_EQ(read_traces(ss), traces);
}

TEST(TraceFile, MissingFieldNamesFieldAndLine) {
    auto traces = synth_traces(small(40, {}), 1, 1);
    std::stringstream ss;
    write_traces(ss, traces);
    std::string text = ss.str();
    std::vector<std::string> lines;
    for (std::string l; std::getline(ss, l);) lines.push_back(l);
    auto j = nlohmann::json::parse(lines[5]);
    j.erase("entropy");
    lines[5] = j.dump();
    std::string broken;
    for (const auto& l : lines) broken += l + "\n";
    std::istringstream in(broken);
    try {
        read_traces(in);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 6u);
        EXPECT_NE(std::string(e.what()).find("entropy"), std::string::npos);
    }
}

TEST(TraceFile, MalformedAndTruncatedInputs) {
    std::istringstream junk("{not json\n");
    EXPECT_THROW(read_traces(junk), ParseError);
    auto traces = synth_traces(small(40, {}), 1, 1);
    std::stringstream ss;
    write_traces(ss, traces);
    std::string text = ss.str();
    std::istringstream cut(text.substr(0, text.rfind('\n', text.size() - 2) + 1));
    EXPECT_THROW(read_traces(cut), ParseError);
}

// tests/data/fixture_traces.jsonl: 10 traces from synth_traces(length 64, seed 11)
TEST(TraceFile, FixtureIsChecksumStable) {
    auto traces = import_traces(std::string(PFRAG_TEST_DATA) + "/fixture_traces.jsonl");
    ASSERT_EQ(traces.size(), 10u);
    std::ostringstream ss;
    write_traces(ss, traces);
    EXPECT_EQ(fnv1a64(ss.str()), fnv1a64(read_file(std::string(PFRAG_TEST_DATA) + "/fixture_traces.jsonl")));
    SynthConfig s;
    s.length = 64;
    EXPECT_EQ(traces, synth_traces(s, 11, 10));
    EXPECT_EQ(fnv1a64(ss.str()), 0xb29a64748e7c6574ULL) << std::hex << fnv1a64(ss.str());
}
