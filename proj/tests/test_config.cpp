#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pfrag/pfrag.hpp"

using namespace pfrag;

TEST(Config, DefaultsMatchPublishedValues) {
    Config c;
    EXPECT_DOUBLE_EQ(c.prediction.theta, 2.5);
    EXPECT_EQ(c.prediction.horizon, 10u);
    EXPECT_DOUBLE_EQ(c.prediction.tau_rag, 0.65);
    EXPECT_DOUBLE_EQ(c.runtime.token_ms, 48.2);
    EXPECT_DOUBLE_EQ(c.runtime.overhead_ms, 2.7);
    EXPECT_EQ(c.runtime.s_min, 50u);
    EXPECT_EQ(c.runtime.cache_capacity, 10u);
    EXPECT_DOUBLE_EQ(c.retriever.latency_median, 125.0);
    EXPECT_DOUBLE_EQ(c.retriever.latency_p95, 180.0);
    EXPECT_DOUBLE_EQ(c.policy.rewards.generate_ok, 0.3);
    EXPECT_DOUBLE_EQ(c.policy.gamma, 0.95);
    EXPECT_NO_THROW(validate(c));
}

TEST(Config, SetGetRoundTrip) {
    Config c;
    set_value(c, "prediction.tau_rag", "0.8");
    EXPECT_EQ(get_value(c, "prediction.tau_rag"), "0.8");
    set_value(c, "runtime.prompt_retrieval", "false");
    EXPECT_FALSE(c.runtime.prompt_retrieval);
    set_value(c, "synth.events", "20:factual, 90:explanation:3");
    ASSERT_EQ(c.synth.events.size(), 2u);
    EXPECT_EQ(c.synth.events[1].event_class, EventClass::Explanation);
    EXPECT_EQ(c.synth.events[1].topic, 3);
    Config d;
    set_value(d, "synth.events", get_value(c, "synth.events"));
    EXPECT_EQ(d.synth.events, c.synth.events);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
    Config c;
    EXPECT_THROW(set_value(c, "nope.key", "1"), std::invalid_argument);
    EXPECT_THROW(set_value(c, "prediction.horizon", "ten"), std::invalid_argument);
    EXPECT_THROW(set_value(c, "runtime.prompt_retrieval", "maybe"), std::invalid_argument);
    c.prediction.tau_rag = 1.2;
    EXPECT_THROW(validate(c), std::invalid_argument);
}

TEST(Config, ParseReportsLineNumbers) {
    std::istringstream ok("# comment\nprediction.horizon = 5  # inline\n\nruntime.s_min=40\n");
    Config c = parse_config(ok);
    EXPECT_EQ(c.prediction.horizon, 5u);
    EXPECT_EQ(c.runtime.s_min, 40u);

    std::istringstream bad("prediction.horizon = 5\nthis line is wrong\n");
    try {
        parse_config(bad);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 2u);
    }
    std::istringstream unknown("a=1\n");
    EXPECT_THROW(parse_config(unknown), ParseError);
}

TEST(Config, EnvironmentOverride) {
    auto path = std::filesystem::temp_directory_path() / "pfrag_env_test.cfg";
    std::ofstream(path) << "prediction.horizon = 7\n";
    ::setenv(kConfigEnv, path.c_str(), 1);
    EXPECT_EQ(resolve_config("").prediction.horizon, 7u);
    ::unsetenv(kConfigEnv);
    EXPECT_EQ(resolve_config("").prediction.horizon, 10u);
    EXPECT_THROW(resolve_config("/nonexistent/pfrag.cfg"), Error);
    std::filesystem::remove(path);
}

TEST(Config, HashTracksContent) {
    Config a, b;
    EXPECT_EQ(config_hash(a), config_hash(b));
    EXPECT_EQ(config_hash(a).size(), 16u);
    b.runtime.workers = 3;
    EXPECT_NE(config_hash(a), config_hash(b));
    std::istringstream in(canonical_dump(b));
    EXPECT_EQ(config_hash(parse_config(in)), config_hash(b));
}
