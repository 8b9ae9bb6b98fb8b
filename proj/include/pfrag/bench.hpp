#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfrag/config.hpp"
#include "pfrag/labels.hpp"
#include "pfrag/monitor.hpp"
#include "pfrag/predictor.hpp"
#include "pfrag/runtime.hpp"

namespace pfrag {

constexpr int kReportSchemaVersion = 1;

inline double efficiency_score(double sim_f1, double e2e_ms) {
    require(e2e_ms > 0.0, "efficiency: e2e must be > 0");
    return sim_f1 * 1000.0 / e2e_ms;
}

// e2e in seconds over the exact-match fraction; undefined when em is 0
inline std::optional<double> qal_score(double e2e_ms, double sim_em) {
    if (sim_em <= 0.0) return std::nullopt;
    return (e2e_ms / 1000.0) / (sim_em / 100.0);
}

// nearest rank on sorted values
inline double percentile(std::vector<double> v, double p) {
    require(!v.empty(), "percentile: empty sample");
    require(p > 0.0 && p <= 100.0, "percentile: p must be in (0,100]");
    std::sort(v.begin(), v.end());
    auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(v.size())));
    return v[std::max<std::size_t>(rank, 1) - 1];
}

struct BandStats {
    std::size_t triggers = 0;
    std::size_t hits = 0;
    double lead_mean = 0.0;
    double lead_median = 0.0;
    double lead_std = 0.0;
    double hit_rate = 0.0;
};

enum Band { kHigh = 0, kMedium = 1, kLow = 2 };
inline const char* band_name(std::size_t b) { return b == kHigh ? "high" : b == kMedium ? "medium" : "low"; }
inline Band band_of(double p) { return p > 0.8 ? kHigh : p > 0.5 ? kMedium : kLow; }

struct MetricsReport {
    std::string mode;
    std::size_t traces = 0;
    std::size_t tokens = 0;
    std::size_t needs = 0;
    double ttft_ms = 0.0;
    double e2e_ms = 0.0;
    double e2e_p50 = 0.0, e2e_p95 = 0.0, e2e_p99 = 0.0;
    double ret_per_1k = 0.0;
    std::size_t retrievals = 0;
    std::size_t hits = 0;
    double hit_rate = 0.0;
    double sim_em = 0.0;
    double sim_f1 = 0.0;
    double efficiency = 0.0;
    std::optional<double> qal;
    std::optional<double> auroc;
    std::size_t predictions = 0;
    std::size_t triggers = 0;
    std::size_t skips = 0;
    double skip_fraction = 0.0;
    std::size_t prefetches = 0;
    std::size_t fallbacks = 0;
    std::size_t false_positives = 0;
    double fp_rate = 0.0;
    std::size_t fp_reuse_within_50 = 0;
    std::size_t fp_never_used = 0;
    double mean_qrs = 0.0;
    double mean_lead = 0.0;
    std::array<BandStats, 3> bands{};
};

namespace detail {

inline void lead_stats(std::vector<double> v, BandStats& b) {
    if (v.empty()) return;
    double s = 0.0;
    for (double x : v) s += x;
    b.lead_mean = s / static_cast<double>(v.size());
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    b.lead_median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    double ss = 0.0;
    for (double x : v) ss += (x - b.lead_mean) * (x - b.lead_mean);
    b.lead_std = std::sqrt(ss / static_cast<double>(n));
}

}  // namespace detail

// Pure function of the log: the same log always yields the same report.
inline MetricsReport compute_metrics(const EventLog& log, const Config& cfg) {
    MetricsReport r;
    const std::size_t D = cfg.prediction.horizon;
    const std::size_t window = D + cfg.runtime.buffer_cap + cfg.monitor.max_extensions;

    struct TraceView {
        std::optional<double> first_token;
        std::optional<double> end;
        std::vector<const LogEvent*> predicts, triggers;
        std::map<std::size_t, const LogEvent*> needs;  // by token
        std::map<long, std::pair<std::uint64_t, std::size_t>> ep_request;  // ep -> (req, enqueue token)
        std::map<std::uint64_t, std::vector<std::size_t>> hits_by_req;
        std::set<std::uint64_t> started, closed;
    };
    std::map<std::size_t, TraceView> traces;
    double qrs_sum = 0.0;
    std::size_t qrs_n = 0;

    for (const auto& e : log) {
        auto& tv = traces[e.trace];
        const auto& k = e.kind;
        if (k == "token") {
            ++r.tokens;
            if (!tv.first_token) tv.first_token = e.ms;
        } else if (k == "trace_end") {
            tv.end = e.data.at("e2e_ms").get<double>();
        } else if (k == "predict") {
            tv.predicts.push_back(&e);
        } else if (k == "trigger") {
            tv.triggers.push_back(&e);
        } else if (k == "skip") {
            ++r.skips;
        } else if (k == "need") {
            tv.needs[e.token] = &e;
        } else if (k == "enqueue") {
            ++r.retrievals;
            auto kind = e.data.at("kind").get<std::string>();
            if (kind == "prefetch") {
                ++r.prefetches;
                tv.ep_request[e.data.at("ep").get<long>()] = {e.data.at("req").get<std::uint64_t>(), e.token};
            }
        } else if (k == "sync_fallback") {
            ++r.retrievals;
            if (e.data.value("why", std::string()) != "prompt" && e.data.value("why", std::string()) != "entropy") ++r.fallbacks;
        } else if (k == "cache_hit") {
            tv.hits_by_req[e.data.at("req").get<std::uint64_t>()].push_back(e.token);
        } else if (k == "retrieval_start") {
            tv.started.insert(e.data.at("req").get<std::uint64_t>());
        } else if (k == "retrieval_finish" || k == "cancel") {
            if (e.data.contains("req")) tv.closed.insert(e.data.at("req").get<std::uint64_t>());
            if (k == "retrieval_finish" && e.data.value("ok", false) && e.data.value("kind", std::string()) != "prompt") {
                qrs_sum += e.data.at("qrs").get<double>();
                ++qrs_n;
            }
        }
    }

    std::vector<double> e2e, ttft, scores;
    std::vector<bool> labels;
    double f1_sum = 0.0;
    std::size_t em = 0;
    std::array<std::vector<double>, 3> leads;
    std::vector<double> all_leads;
    for (auto& [id, tv] : traces) {
        for (auto req : tv.started)
            if (!tv.closed.count(req)) throw Error("event log: retrieval " + std::to_string(req) + " in trace " + std::to_string(id) + " never finished");
        if (!tv.end) throw Error("event log: trace " + std::to_string(id) + " has no trace_end");
        ++r.traces;
        e2e.push_back(*tv.end);
        ttft.push_back(tv.first_token.value_or(*tv.end));
        for (auto& [tok, e] : tv.needs) {
            ++r.needs;
            const auto& d = e->data;
            double b = d.at("best_cos").get<double>();
            f1_sum += clip01(b);
            em += d.at("relevant").get<bool>() ? 1 : 0;
            auto served = d.at("served").get<std::string>();
            if (served == "designated" || served == "reuse") ++r.hits;
        }
        auto need_in = [&](std::size_t lo, std::size_t hi) -> std::optional<std::size_t> {
            auto it = tv.needs.lower_bound(lo);
            if (it != tv.needs.end() && it->first <= hi) return it->first;
            return std::nullopt;
        };
        for (auto* p : tv.predicts) {
            scores.push_back(p->data.at("p").get<double>());
            labels.push_back(need_in(p->token + 1, p->token + D).has_value());
        }
        for (auto* t : tv.triggers) {
            ++r.triggers;
            long ep = t->data.at("ep").get<long>();
            double p = t->data.at("p").get<double>();
            auto first = need_in(t->token + 1, t->token + window);
            if (!first) {
                ++r.false_positives;
                bool reused = false;
                if (auto it = tv.ep_request.find(ep); it != tv.ep_request.end()) {
                    auto [req, at] = it->second;
                    if (auto h = tv.hits_by_req.find(req); h != tv.hits_by_req.end())
                        for (auto tok : h->second) reused = reused || tok <= at + cfg.runtime.reuse_window;
                }
                (reused ? r.fp_reuse_within_50 : r.fp_never_used)++;
                continue;
            }
            auto band = band_of(p);
            auto& bs = r.bands[band];
            ++bs.triggers;
            double lead = static_cast<double>(*first - t->token);
            leads[band].push_back(lead);
            all_leads.push_back(lead);
            const auto& nd = tv.needs.at(*first)->data;
            auto served = nd.at("served").get<std::string>();
            if (nd.at("ep").get<long>() == ep && (served == "designated" || served == "reuse")) ++bs.hits;
        }
    }

    r.predictions = scores.size();
    if (!e2e.empty()) {
        double s = 0.0, s2 = 0.0;
        for (double x : e2e) s += x;
        for (double x : ttft) s2 += x;
        r.e2e_ms = s / static_cast<double>(e2e.size());
        r.ttft_ms = s2 / static_cast<double>(ttft.size());
        r.e2e_p50 = percentile(e2e, 50);
        r.e2e_p95 = percentile(e2e, 95);
        r.e2e_p99 = percentile(e2e, 99);
    }
    if (r.tokens) r.ret_per_1k = 1000.0 * static_cast<double>(r.retrievals) / static_cast<double>(r.tokens);
    if (r.needs) {
        r.hit_rate = static_cast<double>(r.hits) / static_cast<double>(r.needs);
        r.sim_em = 100.0 * static_cast<double>(em) / static_cast<double>(r.needs);
        r.sim_f1 = 100.0 * f1_sum / static_cast<double>(r.needs);
    }
    if (r.e2e_ms > 0.0) r.efficiency = efficiency_score(r.sim_f1, r.e2e_ms);
    r.qal = qal_score(r.e2e_ms, r.sim_em);
    bool both = std::count(labels.begin(), labels.end(), true) > 0 && std::count(labels.begin(), labels.end(), false) > 0;
    if (both) r.auroc = pfrag::auroc(scores, labels);
    if (r.triggers) {
        r.skip_fraction = static_cast<double>(r.skips) / static_cast<double>(r.triggers);
        r.fp_rate = static_cast<double>(r.false_positives) / static_cast<double>(r.triggers);
    }
    if (qrs_n) r.mean_qrs = qrs_sum / static_cast<double>(qrs_n);
    for (std::size_t b = 0; b < 3; ++b) {
        detail::lead_stats(leads[b], r.bands[b]);
        if (r.bands[b].triggers) r.bands[b].hit_rate = static_cast<double>(r.bands[b].hits) / static_cast<double>(r.bands[b].triggers);
    }
    if (!all_leads.empty()) {
        double s = 0.0;
        for (double x : all_leads) s += x;
        r.mean_lead = s / static_cast<double>(all_leads.size());
    }
    return r;
}

inline MetricsReport compute_metrics(const EventLog& log, const Config& cfg, BaselineMode mode) {
    auto r = compute_metrics(log, cfg);
    r.mode = to_string(mode);
    return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
    using nlohmann::json;
    json bands = json::object();
    for (std::size_t b = 0; b < 3; ++b) {
        const auto& s = r.bands[b];
        bands[band_name(b)] = {{"triggers", s.triggers}, {"hits", s.hits}, {"hit_rate", s.hit_rate},
                               {"lead_mean", s.lead_mean}, {"lead_median", s.lead_median}, {"lead_std", s.lead_std}};
    }
    return {{"mode", r.mode},
            {"traces", r.traces},
            {"tokens", r.tokens},
            {"needs", r.needs},
            {"ttft_ms", r.ttft_ms},
            {"e2e_ms", r.e2e_ms},
            {"e2e_percentiles", {{"p50", r.e2e_p50}, {"p95", r.e2e_p95}, {"p99", r.e2e_p99}}},
            {"ret_per_1k", r.ret_per_1k},
            {"retrievals", r.retrievals},
            {"hits", r.hits},
            {"hit_rate", r.hit_rate},
            {"sim_em", r.sim_em},
            {"sim_f1", r.sim_f1},
            {"efficiency", r.efficiency},
            {"qal", r.qal ? json(*r.qal) : json(nullptr)},
            {"auroc", r.auroc ? json(*r.auroc) : json(nullptr)},
            {"predictions", r.predictions},
            {"triggers", r.triggers},
            {"skips", r.skips},
            {"skip_fraction", r.skip_fraction},
            {"prefetches", r.prefetches},
            {"fallbacks", r.fallbacks},
            {"false_positives", r.false_positives},
            {"fp_rate", r.fp_rate},
            {"fp_reuse_within_50", r.fp_reuse_within_50},
            {"fp_never_used", r.fp_never_used},
            {"mean_qrs", r.mean_qrs},
            {"mean_lead", r.mean_lead},
            {"lead_bands", bands}};
}

// ---------------------------------------------------------------- training and runs

inline std::vector<Trace> bench_traces(const Config& cfg, std::uint64_t seed) {
    return synth_traces(cfg.synth, derive_seed(cfg.bench.trace_seed, seed), cfg.bench.traces);
}

inline PredictorParams train_predictor(const Config& cfg, std::uint64_t seed) {
    auto traces = synth_traces(cfg.synth, derive_seed(seed, 0x7a1), cfg.train.traces);
    auto data = make_predictor_instances(traces, cfg.prediction.theta, cfg.prediction.horizon, cfg.train.negative_ratio,
                                         derive_seed(seed, 0x7a2));
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(seed, cfg.train.seed);
    return train_supervised(data, tc);
}

inline MonitorParams train_monitor_for(const Config& cfg, const Corpus& corpus, std::uint64_t seed) {
    auto traces = synth_traces(cfg.synth, derive_seed(seed, 0x3a1), cfg.monitor.traces);
    auto lc = LabelConfig::from(cfg);
    lc.seed = seed;
    return train_monitor(label_traces(traces, corpus, lc), cfg.monitor, seed);
}

inline ParamsBundle train_bundle(const Config& cfg, const Corpus& corpus, std::uint64_t seed) {
    ParamsBundle b;
    b.predictor = train_predictor(cfg, seed);
    b.monitor = train_monitor_for(cfg, corpus, seed);
    return b;
}

struct BaselineRun {
    RunResult run;
    MetricsReport report;
};

inline BaselineRun run_baseline(BaselineMode mode, const Config& cfg, const std::vector<Trace>& traces, const Corpus& corpus,
                                const ParamsBundle& params, std::uint64_t seed, ExecMode exec = ExecMode::Virtual) {
    BaselineRun out;
    out.run = run_generation(cfg, traces, corpus, params, exec, mode, seed);
    out.report = compute_metrics(out.run.log, cfg, mode);
    return out;
}

inline double reduction(double baseline, double value) { return baseline > 0.0 ? (baseline - value) / baseline : 0.0; }

struct LatencyPoint {
    double latency_ms = 0.0;
    double ttft_reduction = 0.0;
    double e2e_reduction = 0.0;
    double hit_rate = 0.0;
};

// One full benchmark per point; traces and seeds are shared across points.
inline std::vector<LatencyPoint> sweep_latency(const Config& cfg, const std::vector<double>& latencies, const Corpus& corpus,
                                               const ParamsBundle& params, std::uint64_t seed) {
    require(latencies.size() >= 3, "sweep_latency: need at least 3 points");
    auto traces = bench_traces(cfg, seed);
    std::vector<LatencyPoint> out;
    for (double lat : latencies) {
        require(lat > 0.0, "sweep_latency: latency must be > 0");
        Config c = cfg;
        // scale the distribution, keeping its spread ratio
        c.retriever.latency_p95 = cfg.retriever.latency_p95 / cfg.retriever.latency_median * lat;
        c.retriever.latency_median = lat;
        auto sync = run_baseline(BaselineMode::SyncReactive, c, traces, corpus, params, seed).report;
        auto pred = run_baseline(BaselineMode::Predictive, c, traces, corpus, params, seed).report;
        out.push_back({lat, reduction(sync.ttft_ms, pred.ttft_ms), reduction(sync.e2e_ms, pred.e2e_ms), pred.hit_rate});
    }
    return out;
}

struct HyperPoint {
    std::string param;
    double value = 0.0;
    std::optional<double> auroc;
    double hit_rate = 0.0;
    double ret_per_1k = 0.0;
    double mean_lead = 0.0;
    double e2e_ms = 0.0;
};

inline const std::vector<std::string>& hyper_params() {
    static const std::vector<std::string> names{"horizon", "tau_rag", "theta"};
    return names;
}

inline void apply_hyper(Config& c, const std::string& param, double v) {
    if (param == "tau_rag") {
        c.prediction.tau_rag = v;
    } else if (param == "horizon" || param == "delta") {
        require(v >= 1.0 && v == std::floor(v), "horizon must be a positive integer");
        c.prediction.horizon = static_cast<std::size_t>(v);
    } else if (param == "theta") {
        c.prediction.theta = v;
        c.synth.theta = v;
    } else {
        throw std::invalid_argument("unknown sweep parameter: " + param);
    }
    validate(c);
}

// Horizon and theta change the predictor's labels, so those points retrain it.
inline std::vector<HyperPoint> sweep_hyper(const Config& cfg, const std::string& param, const std::vector<double>& grid,
                                           const Corpus& corpus, const ParamsBundle& base, std::uint64_t seed) {
    require(!grid.empty(), "sweep_hyper: empty grid");
    std::vector<HyperPoint> out;
    for (double v : grid) {
        Config c = cfg;
        apply_hyper(c, param, v);
        ParamsBundle p = base;
        if (param != "tau_rag") p.predictor = train_predictor(c, seed);
        if (param == "theta") p.monitor = train_monitor_for(c, corpus, seed);
        auto traces = bench_traces(c, seed);
        auto rep = run_baseline(BaselineMode::Predictive, c, traces, corpus, p, seed).report;
        out.push_back({param, v, rep.auroc, rep.hit_rate, rep.ret_per_1k, rep.mean_lead, rep.e2e_ms});
    }
    return out;
}

// ---------------------------------------------------------------- report files

inline nlohmann::json report_header(const Config& cfg, std::uint64_t seed, const std::string& command) {
    return {{"schema_version", kReportSchemaVersion}, {"config_hash", config_hash(cfg)}, {"seed", seed}, {"command", command}};
}

inline nlohmann::json report_json(const Config& cfg, std::uint64_t seed, const std::string& command,
                                  const std::vector<MetricsReport>& reports) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : reports) runs.push_back(to_json(r));
    return {{"header", report_header(cfg, seed, command)}, {"runs", runs}};
}

inline std::string fmt(double v) {
    std::ostringstream ss;
    ss.precision(6);
    ss << v;
    return ss.str();
}
inline std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : "NA"; }

inline std::string report_tsv(const std::vector<MetricsReport>& reports) {
    std::ostringstream ss;
    ss << "mode\tttft_ms\te2e_ms\te2e_p50\te2e_p95\te2e_p99\tret_per_1k\thit_rate\tsim_em\tsim_f1\tefficiency\tqal\tauroc\t"
          "triggers\tskip_fraction\tfp_rate\tmean_qrs\n";
    for (const auto& r : reports)
        ss << r.mode << '\t' << fmt(r.ttft_ms) << '\t' << fmt(r.e2e_ms) << '\t' << fmt(r.e2e_p50) << '\t' << fmt(r.e2e_p95)
           << '\t' << fmt(r.e2e_p99) << '\t' << fmt(r.ret_per_1k) << '\t' << fmt(r.hit_rate) << '\t' << fmt(r.sim_em) << '\t'
           << fmt(r.sim_f1) << '\t' << fmt(r.efficiency) << '\t' << fmt(r.qal) << '\t' << fmt(r.auroc) << '\t' << r.triggers
           << '\t' << fmt(r.skip_fraction) << '\t' << fmt(r.fp_rate) << '\t' << fmt(r.mean_qrs) << '\n';
    return ss.str();
}

inline nlohmann::json to_json(const LatencyPoint& p) {
    return {{"latency_ms", p.latency_ms}, {"ttft_reduction", p.ttft_reduction}, {"e2e_reduction", p.e2e_reduction},
            {"hit_rate", p.hit_rate}};
}

inline nlohmann::json to_json(const HyperPoint& p) {
    return {{"param", p.param},           {"value", p.value},       {"auroc", p.auroc ? nlohmann::json(*p.auroc) : nlohmann::json(nullptr)},
            {"hit_rate", p.hit_rate},     {"ret_per_1k", p.ret_per_1k}, {"mean_lead", p.mean_lead},
            {"e2e_ms", p.e2e_ms}};
}

inline std::string latency_tsv(const std::vector<LatencyPoint>& pts) {
    std::ostringstream ss;
    ss << "latency_ms\tttft_reduction\te2e_reduction\thit_rate\n";
    for (const auto& p : pts)
        ss << fmt(p.latency_ms) << '\t' << fmt(p.ttft_reduction) << '\t' << fmt(p.e2e_reduction) << '\t' << fmt(p.hit_rate) << '\n';
    return ss.str();
}

inline std::string hyper_tsv(const std::vector<HyperPoint>& pts) {
    std::ostringstream ss;
    ss << "param\tvalue\tauroc\thit_rate\tret_per_1k\tmean_lead\te2e_ms\n";
    for (const auto& p : pts)
        ss << p.param << '\t' << fmt(p.value) << '\t' << fmt(p.auroc) << '\t' << fmt(p.hit_rate) << '\t' << fmt(p.ret_per_1k)
           << '\t' << fmt(p.mean_lead) << '\t' << fmt(p.e2e_ms) << '\n';
    return ss.str();
}

}  // namespace pfrag
