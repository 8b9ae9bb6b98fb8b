#pragma once

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <queue>
#include <set>
#include <shared_mutex>
#include <sstream>
#include <thread>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "pfrag/common.hpp"
#include "pfrag/config.hpp"
#include "pfrag/features.hpp"
#include "pfrag/monitor.hpp"
#include "pfrag/policy.hpp"
#include "pfrag/predictor.hpp"
#include "pfrag/query.hpp"
#include "pfrag/retriever.hpp"
#include "pfrag/trace.hpp"

namespace pfrag {

enum class BaselineMode { NoRetrieval, SyncReactive, EntropyThreshold, FixedInterval, StaleQuery, Predictive, OraclePrefetch };
enum class ExecMode { Virtual, Concurrent };

inline const char* to_string(BaselineMode m) {
    switch (m) {
        case BaselineMode::NoRetrieval: return "no_retrieval";
        case BaselineMode::SyncReactive: return "sync";
        case BaselineMode::EntropyThreshold: return "entropy_threshold";
        case BaselineMode::FixedInterval: return "fixed_interval";
        case BaselineMode::StaleQuery: return "stale_query";
        case BaselineMode::Predictive: return "predictive";
        case BaselineMode::OraclePrefetch: return "oracle";
    }
    return "?";
}

inline BaselineMode baseline_from(std::string_view s) {
    for (auto m : {BaselineMode::NoRetrieval, BaselineMode::SyncReactive, BaselineMode::EntropyThreshold,
                   BaselineMode::FixedInterval, BaselineMode::StaleQuery, BaselineMode::Predictive,
                   BaselineMode::OraclePrefetch})
        if (s == to_string(m)) return m;
    throw std::invalid_argument("unknown mode: " + std::string(s));
}

// ---------------------------------------------------------------- guardrails

struct GuardConfig {
    std::size_t s_min = 50;
    std::size_t debounce = 2;
    double theta_low = 2.0;
    std::size_t hysteresis_m = 5;
    std::size_t unproductive_h = 30;
    double raise = 0.3;

    static GuardConfig from(const RuntimeConfig& r) {
        return {r.s_min, r.debounce, r.theta_low, r.hysteresis_m, r.unproductive_h, r.threshold_raise};
    }
};

struct GuardrailState {
    std::size_t tokens_since_last_retrieval = std::numeric_limits<std::size_t>::max() / 2;
    std::size_t consecutive_above = 0;
    std::size_t hysteresis_below = 0;
    bool hysteresis = false;
    bool suppressed = false;
    double offset = 0.0;
    std::size_t offset_until = 0;  // token index at which the raised threshold lapses
};

inline double effective_tau(const GuardrailState& g, double tau, std::size_t t) {
    return t < g.offset_until ? tau + g.offset : tau;
}

// Per-token bookkeeping that needs no predictor: spacing and hysteresis.
inline void observe_token(GuardrailState& g, double entropy, bool suppressed, const GuardConfig& cfg) {
    if (g.tokens_since_last_retrieval < std::numeric_limits<std::size_t>::max() / 2) ++g.tokens_since_last_retrieval;
    g.suppressed = suppressed;
    if (g.hysteresis) {
        g.hysteresis_below = entropy < cfg.theta_low ? g.hysteresis_below + 1 : 0;
        if (g.hysteresis_below >= cfg.hysteresis_m) {
            g.hysteresis = false;
            g.hysteresis_below = 0;
        }
    }
}

inline void observe_prediction(GuardrailState& g, double p_hat, double tau_eff) {
    g.consecutive_above = p_hat > tau_eff ? g.consecutive_above + 1 : 0;
}

inline bool can_trigger(const GuardrailState& g, const GuardConfig& cfg) {
    return g.tokens_since_last_retrieval >= cfg.s_min && g.consecutive_above >= cfg.debounce && !g.hysteresis &&
           !g.suppressed;
}

inline void on_trigger(GuardrailState& g) {
    g.tokens_since_last_retrieval = 0;
    g.consecutive_above = 0;
    g.hysteresis = true;
    g.hysteresis_below = 0;
}

inline void raise_threshold(GuardrailState& g, std::size_t now, const GuardConfig& cfg) {
    g.offset = cfg.raise;
    g.offset_until = now + cfg.unproductive_h;
}

// ---------------------------------------------------------------- requests and queue

struct PrefetchRequest {
    std::uint64_t request_id = 0;
    std::vector<Query> queries;
    double confidence = 1.0;
    double issue_time = 0.0;
    std::size_t predicted_need_token = 0;
    double priority = 0.0;
    std::size_t issue_token = 0;
    std::string kind = "prefetch";
    long episode = -1;
};

inline double request_priority(double confidence, double expected_ms) { return confidence / expected_ms; }

// true when a should be served after b
struct RequestAfter {
    bool operator()(const PrefetchRequest& a, const PrefetchRequest& b) const {
        if (a.priority != b.priority) return a.priority < b.priority;
        if (a.issue_time != b.issue_time) return a.issue_time > b.issue_time;
        return a.request_id > b.request_id;
    }
};

class PrefetchQueue {
public:
    void push(PrefetchRequest r) {
        {
            std::lock_guard lk(mu_);
            q_.push(std::move(r));
        }
        cv_.notify_one();
    }
    std::optional<PrefetchRequest> try_pop() {
        std::lock_guard lk(mu_);
        if (q_.empty()) return std::nullopt;
        auto r = q_.top();
        q_.pop();
        return r;
    }
    // blocks until an item arrives; empty once closed and drained
    std::optional<PrefetchRequest> pop() {
        std::unique_lock lk(mu_);
        cv_.wait(lk, [&] { return closed_ || !q_.empty(); });
        if (q_.empty()) return std::nullopt;
        auto r = q_.top();
        q_.pop();
        return r;
    }
    void close() {
        {
            std::lock_guard lk(mu_);
            closed_ = true;
        }
        cv_.notify_all();
    }
    std::size_t size() const {
        std::lock_guard lk(mu_);
        return q_.size();
    }
    bool empty() const { return size() == 0; }

private:
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::priority_queue<PrefetchRequest, std::vector<PrefetchRequest>, RequestAfter> q_;
    bool closed_ = false;
};

// ---------------------------------------------------------------- cache

struct CachedResult {
    std::uint64_t request_id = 0;
    std::vector<std::size_t> doc_ids;
    std::vector<Vec> embeddings;
    double completion_ms = 0.0;
    std::size_t use_count = 0;
    std::size_t issue_token = 0;
};

// LRU by logical stamp; every put and get takes a fresh stamp.
class ResultCache {
public:
    explicit ResultCache(std::size_t capacity = 10) : capacity_(capacity) { require(capacity >= 1, "cache capacity must be >= 1"); }

    // returns the evicted id, if any
    std::optional<std::uint64_t> put(CachedResult r) {
        std::unique_lock lk(mu_);
        auto id = r.request_id;
        auto it = slots_.find(id);
        if (it != slots_.end()) {
            it->second = {std::move(r), ++stamp_};
            return std::nullopt;
        }
        std::optional<std::uint64_t> evicted;
        if (slots_.size() >= capacity_) {
            auto lru = slots_.begin();
            for (auto s = slots_.begin(); s != slots_.end(); ++s)
                if (s->second.stamp < lru->second.stamp) lru = s;
            evicted = lru->first;
            slots_.erase(lru);
        }
        slots_.emplace(id, Slot{std::move(r), ++stamp_});
        return evicted;
    }

    std::optional<CachedResult> get(std::uint64_t id) {
        std::unique_lock lk(mu_);
        auto it = slots_.find(id);
        if (it == slots_.end()) return std::nullopt;
        it->second.stamp = ++stamp_;
        ++it->second.entry.use_count;
        return it->second.entry;
    }

    bool contains(std::uint64_t id) const {
        std::shared_lock lk(mu_);
        return slots_.count(id) != 0;
    }
    std::size_t size() const {
        std::shared_lock lk(mu_);
        return slots_.size();
    }
    std::size_t capacity() const { return capacity_; }

    // entries in id order, recency untouched
    std::vector<CachedResult> peek_all() const {
        std::shared_lock lk(mu_);
        std::vector<CachedResult> out;
        for (const auto& [id, s] : slots_) out.push_back(s.entry);
        return out;
    }
    std::vector<Vec> embeddings() const {
        std::vector<Vec> out;
        for (auto& e : peek_all()) out.insert(out.end(), e.embeddings.begin(), e.embeddings.end());
        return out;
    }

private:
    struct Slot {
        CachedResult entry;
        std::uint64_t stamp = 0;
    };
    std::size_t capacity_;
    mutable std::shared_mutex mu_;
    std::map<std::uint64_t, Slot> slots_;
    std::uint64_t stamp_ = 0;
};

// ---------------------------------------------------------------- context buffer

class ContextBuffer {
public:
    ContextBuffer(std::size_t base_cap = 5, std::size_t max_extensions = 2) : cap_(base_cap), ext_(max_extensions) {}

    void open(std::uint64_t id) { slots_[id] = Slot{{}, ext_, 0}; }
    void close(std::uint64_t id) { slots_.erase(id); }
    bool has(std::uint64_t id) const { return slots_.count(id) != 0; }

    // false once the base cap plus granted extensions is reached
    bool add(std::uint64_t id, const Vec& emb) {
        auto& s = slots_.at(id);
        if (s.tokens.size() >= cap_ + s.extensions_used) return false;
        s.tokens.push_back(emb);
        return true;
    }
    bool extend(std::uint64_t id) {
        auto& s = slots_.at(id);
        if (s.extensions_left == 0) return false;
        --s.extensions_left;
        ++s.extensions_used;
        return true;
    }
    std::size_t extensions_left(std::uint64_t id) const { return slots_.at(id).extensions_left; }
    std::size_t size(std::uint64_t id) const { return slots_.at(id).tokens.size(); }
    std::size_t limit(std::uint64_t id) const { return cap_ + slots_.at(id).extensions_used; }

private:
    struct Slot {
        std::vector<Vec> tokens;
        std::size_t extensions_left = 2;
        std::size_t extensions_used = 0;
    };
    std::size_t cap_, ext_;
    std::map<std::uint64_t, Slot> slots_;
};

// ---------------------------------------------------------------- virtual scheduler

struct SchedEvent {
    enum Kind { Start, Finish } kind = Start;
    std::uint64_t id = 0;
    double time = 0.0;
    bool ok = true;
};

// W workers; a request starts when a worker frees up, highest priority first.
class VirtualScheduler {
public:
    explicit VirtualScheduler(std::size_t workers) : free_(workers) { require(workers >= 1, "need at least one worker"); }

    void submit(const PrefetchRequest& r, double latency, bool ok, std::vector<SchedEvent>& out) {
        advance_to(r.issue_time, out);
        info_[r.request_id] = {latency, ok, -1.0};
        pending_.push(r);
        dispatch(r.issue_time, out);
    }

    void advance_to(double T, std::vector<SchedEvent>& out) {
        while (!running_.empty()) {
            auto it = std::min_element(running_.begin(), running_.end());
            if (it->first > T) break;
            auto [t, id] = *it;
            running_.erase(it);
            ++free_;
            info_[id].finish = t;
            out.push_back({SchedEvent::Finish, id, t, info_[id].ok});
            dispatch(t, out);
        }
    }

    bool finished_by(std::uint64_t id, double T) const {
        auto it = info_.find(id);
        return it != info_.end() && it->second.finish >= 0.0 && it->second.finish <= T;
    }
    bool ok(std::uint64_t id) const { return info_.at(id).ok; }
    double finish_time(std::uint64_t id) const { return info_.at(id).finish; }

    // ids still queued or running, for cancellation at shutdown
    std::vector<std::uint64_t> outstanding() const {
        std::vector<std::uint64_t> out;
        for (auto& [t, id] : running_) out.push_back(id);
        for (auto& [id, inf] : info_)
            if (inf.finish < 0.0 && std::none_of(running_.begin(), running_.end(), [&](auto& r) { return r.second == id; }))
                out.push_back(id);
        std::sort(out.begin(), out.end());
        return out;
    }
    bool started(std::uint64_t id) const {
        return std::any_of(running_.begin(), running_.end(), [&](auto& r) { return r.second == id; }) ||
               info_.at(id).finish >= 0.0;
    }

private:
    void dispatch(double now, std::vector<SchedEvent>& out) {
        while (free_ > 0) {
            auto r = pending_.try_pop();
            if (!r) break;
            --free_;
            running_.emplace_back(now + info_[r->request_id].latency, r->request_id);
            out.push_back({SchedEvent::Start, r->request_id, now, true});
        }
    }

    struct Info {
        double latency = 0.0;
        bool ok = true;
        double finish = -1.0;
    };
    std::size_t free_;
    PrefetchQueue pending_;
    std::vector<std::pair<double, std::uint64_t>> running_;
    std::map<std::uint64_t, Info> info_;
};

// ---------------------------------------------------------------- event log

struct LogEvent {
    std::size_t trace = 0;
    double ms = 0.0;
    std::size_t token = 0;
    std::string kind;
    nlohmann::json data = nlohmann::json::object();
    bool operator==(const LogEvent&) const = default;
};
using EventLog = std::vector<LogEvent>;

inline nlohmann::json to_json(const LogEvent& e) {
    return {{"trace", e.trace}, {"time_ms", e.ms}, {"token_index", e.token}, {"kind", e.kind}, {"payload", e.data}};
}

inline void write_log(std::ostream& out, const EventLog& log) {
    for (const auto& e : log) out << to_json(e).dump() << "\n";
}

inline std::string log_to_string(const EventLog& log) {
    std::ostringstream ss;
    write_log(ss, log);
    return ss.str();
}

inline EventLog read_log(std::istream& in) {
    EventLog log;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            LogEvent e;
            e.trace = j.at("trace").get<std::size_t>();
            e.ms = j.at("time_ms").get<double>();
            e.token = j.at("token_index").get<std::size_t>();
            e.kind = j.at("kind").get<std::string>();
            e.data = j.at("payload");
            log.push_back(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw ParseError(ex.what(), lineno);
        }
    }
    return log;
}

// ---------------------------------------------------------------- runtime

using ScoreFn = std::function<double(const Trace&, std::size_t)>;

struct ParamsBundle {
    std::optional<PredictorParams> predictor;
    std::optional<MonitorParams> monitor;
    PolicyParams policy = PolicyParams::zeros();
    ScoreFn score_override;  // replaces the predictor, e.g. for constructed tests
};

struct RunResult {
    EventLog log;
    std::vector<RewardEvent> rewards;
    ParamsBundle params;  // after online updates
};

namespace detail {

enum LatencyKind : std::uint64_t { kPromptDraw = 1, kPrefetchDraw = 2, kFallbackDraw = 3, kBlockingDraw = 4, kFailureDraw = 5 };

// Concurrent mode: real worker threads compute rankings; the generation thread
// commits each result when its simulated completion time is reached.
class WorkerPool {
public:
    WorkerPool(std::size_t n, const Corpus& corpus, std::size_t k) : corpus_(corpus), k_(k) {
        for (std::size_t i = 0; i < n; ++i) threads_.emplace_back([this] { loop(); });
    }
    ~WorkerPool() {
        queue_.close();
        for (auto& t : threads_) t.join();
    }
    void submit(const PrefetchRequest& r) { queue_.push(r); }
    std::vector<ScoredDoc> wait(std::uint64_t id) {
        std::unique_lock lk(mu_);
        cv_.wait(lk, [&] { return done_.count(id) != 0; });
        return done_.at(id);
    }

private:
    void loop() {
        while (auto r = queue_.pop()) {
            auto docs = rank(corpus_, query_embeddings(r->queries), k_);
            {
                std::lock_guard lk(mu_);
                done_[r->request_id] = std::move(docs);
            }
            cv_.notify_all();
        }
    }
    const Corpus& corpus_;
    std::size_t k_;
    PrefetchQueue queue_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::unordered_map<std::uint64_t, std::vector<ScoredDoc>> done_;
    std::vector<std::thread> threads_;
};

enum class EpState { Waiting, Issued, Reused, Declined, Cancelled };

struct Episode {
    long id = 0;
    std::size_t trigger_token = 0;
    double p_hat = 0.0;
    EpState state = EpState::Waiting;
    std::size_t ready_at = 0;
    std::size_t k_star = 0;
    std::uint64_t request = 0;
    std::size_t issue_token = 0;
    bool consumed = false;
    bool fetch_resolved = false;
    bool decision_resolved = false;
    PolicyState decision_state;
    StateSnapshot snapshot;
    std::vector<std::pair<PolicyState, StateSnapshot>> accumulates;
};

class TraceRun {
public:
    TraceRun(const Config& cfg, const Trace& tr, std::size_t trace_id, const Corpus& corpus, ParamsBundle& params,
             ExecMode exec, BaselineMode mode, std::uint64_t seed, EventLog& log, std::vector<RewardEvent>& rewards)
        : cfg_(cfg), tr_(tr), id_(trace_id), corpus_(corpus), params_(params), exec_(exec), mode_(mode),
          seed_(derive_seed(seed, tr.seed, 0x7a11)), log_(log), rewards_(rewards), guard_cfg_(GuardConfig::from(cfg.runtime)),
          gates_(Gates::from(cfg)), latency_(LatencyModel::from(cfg.retriever)), cache_(cfg.runtime.cache_capacity),
          buffer_(cfg.runtime.buffer_cap, cfg.monitor.max_extensions), sched_(cfg.runtime.workers),
          explore_rng_(derive_seed(seed_, 0xe8)) {
        need_at_.assign(tr.size(), nullptr);
        for (const auto& e : tr.events)
            if (e.position < tr.size()) need_at_[e.position] = &e;
        miss_at_.assign(tr.size(), false);
        if (exec_ == ExecMode::Concurrent) pool_.emplace(cfg.runtime.workers, corpus, cfg.retriever.k_docs);
    }

    void run() {
        const std::size_t N = tr_.size();
        emit(0.0, 0, "trace_start", {{"n", N}, {"mode", to_string(mode_)}});
        const bool retrieves = mode_ != BaselineMode::NoRetrieval;
        const bool blocking = mode_ == BaselineMode::SyncReactive || mode_ == BaselineMode::EntropyThreshold;
        if (retrieves && cfg_.runtime.prompt_retrieval && !tr_.prompt_embedding.empty()) {
            if (blocking) {
                clock_ = cfg_.runtime.prefill_ms;
                blocking_retrieval(tr_.prompt_embedding, kPromptDraw, 0, "prompt", nullptr);
            } else {
                submit({Query{normalized(tr_.prompt_embedding), Strategy::Focused, 0, 0}}, 1.0, 0, 0, "prompt", -1);
                clock_ = cfg_.runtime.prefill_ms;
            }
        } else {
            clock_ = cfg_.runtime.prefill_ms;
        }
        if (mode_ == BaselineMode::OraclePrefetch) {
            for (const auto& e : tr_.events)
                if (e.position <= cfg_.runtime.oracle_lead) issue_oracle(e, 0.0);
        }
        for (std::size_t t = 0; t < N; ++t) step(t);
        drain(clock_);
        for (auto id : sched_.outstanding()) emit(clock_, N - 1, "cancel", {{"req", id}, {"started", sched_.started(id)}});
        finish_rewards(N);
        emit(clock_, N - 1, "trace_end", {{"e2e_ms", clock_}});
    }

private:
    void emit(double ms, std::size_t token, const char* kind, nlohmann::json data = nlohmann::json::object()) {
        log_.push_back({id_, ms, token, kind, std::move(data)});
    }

    bool predictive() const { return mode_ == BaselineMode::Predictive; }

    double score(std::size_t t) {
        if (params_.score_override) return params_.score_override(tr_, t);
        return predict_at(*params_.predictor, tr_, t);
    }

    // ---- retrieval plumbing

    std::uint64_t submit(std::vector<Query> qs, double confidence, std::size_t issue_token, std::size_t need_token,
                         const char* kind, long episode) {
        PrefetchRequest r;
        r.request_id = next_request_++;
        r.queries = std::move(qs);
        r.confidence = confidence;
        r.issue_time = clock_;
        r.issue_token = issue_token;
        r.predicted_need_token = need_token;
        r.priority = request_priority(confidence, latency_.median_ms);
        r.kind = kind;
        r.episode = episode;
        // keyed by position so every mode and sweep point sees the same draw for the same slot
        std::uint64_t draw_kind = std::string_view(kind) == "prompt" ? kPromptDraw : kPrefetchDraw;
        std::uint64_t key = (static_cast<std::uint64_t>(issue_token) << 20) | need_token;
        double lat = latency_.draw(seed_, draw_kind, key);
        bool ok = cfg_.retriever.failure_rate <= 0.0 ||
                  !Rng(derive_seed(seed_, kFailureDraw, key)).bernoulli(cfg_.retriever.failure_rate);
        drain(clock_);
        emit(clock_, issue_token, "enqueue",
             {{"req", r.request_id}, {"kind", kind}, {"ep", episode}, {"conf", confidence}, {"prio", r.priority},
              {"need_pred", need_token}, {"n_queries", r.queries.size()}});
        requests_[r.request_id] = r;
        if (pool_) pool_->submit(r);
        std::vector<SchedEvent> ev;
        sched_.submit(r, lat, ok, ev);
        handle(ev);
        return r.request_id;
    }

    void drain(double T) {
        std::vector<SchedEvent> ev;
        sched_.advance_to(T, ev);
        handle(ev);
    }

    void handle(const std::vector<SchedEvent>& ev) {
        for (const auto& e : ev) {
            const auto& r = requests_.at(e.id);
            if (e.kind == SchedEvent::Start) {
                emit(e.time, current_token_, "retrieval_start", {{"req", e.id}});
                continue;
            }
            if (!e.ok) {
                emit(e.time, current_token_, "retrieval_finish", {{"req", e.id}, {"ok", false}, {"kind", r.kind}});
                continue;
            }
            auto docs = pool_ ? pool_->wait(e.id) : rank(corpus_, query_embeddings(r.queries), cfg_.retriever.k_docs);
            CachedResult c;
            c.request_id = e.id;
            for (auto& d : docs) c.doc_ids.push_back(d.doc_id);
            c.embeddings = doc_embeddings(corpus_, docs);
            c.completion_ms = e.time;
            c.issue_token = r.issue_token;
            double q = qrs(r.queries, c.embeddings);
            emit(e.time, current_token_, "retrieval_finish", {{"req", e.id}, {"ok", true}, {"kind", r.kind}, {"qrs", q}});
            if (r.kind == "prompt") integrate(c.embeddings);
            if (auto ev_id = cache_.put(std::move(c))) emit(e.time, current_token_, "evict", {{"req", *ev_id}});
        }
    }

    void integrate(const std::vector<Vec>& docs) { integrated_.insert(integrated_.end(), docs.begin(), docs.end()); }

    double best_cos(const Vec& need) const { return max_cos(need, integrated_); }

    // Blocks generation for one full latency draw; the result is cached for later reuse.
    std::uint64_t blocking_retrieval(const Vec& q, std::uint64_t draw_kind, std::size_t token, const char* why,
                                     const Vec* need) {
        CachedResult c;
        c.request_id = next_request_++;
        auto docs = rank(corpus_, {q}, cfg_.retriever.k_docs);
        for (auto& d : docs) c.doc_ids.push_back(d.doc_id);
        c.embeddings = doc_embeddings(corpus_, docs);
        c.issue_token = token;
        double lat = latency_.draw(seed_, draw_kind, token);
        integrate(c.embeddings);
        if (need) log_need(token, *need, "fallback", -1, -1);
        emit(clock_, token, "sync_fallback", {{"why", why}, {"lat", lat}, {"qrs", qrs(q, c.embeddings)}, {"req", c.request_id}});
        clock_ += lat;
        c.completion_ms = clock_;
        auto id = c.request_id;
        if (auto ev_id = cache_.put(std::move(c))) emit(clock_, token, "evict", {{"req", *ev_id}});
        drain(clock_);
        return id;
    }

    void log_need(std::size_t p, const Vec& need, const char* served, long ep, long req) {
        double b = best_cos(need);
        const auto* e = need_at_[p];
        emit(clock_, p, "need",
             {{"served", served}, {"ep", ep}, {"req", req}, {"best_cos", b}, {"relevant", b >= cfg_.retriever.relevance},
              {"class", e ? to_string(e->event_class) : "none"}});
        if (std::string_view(served) == "fallback") miss_at_[p] = true;
    }

    bool serve_from_cache(std::size_t p, const Vec& need, std::uint64_t req, const char* via, long ep) {
        auto c = cache_.get(req);
        if (!c) return false;
        integrate(c->embeddings);
        emit(clock_, p, "cache_hit", {{"req", req}, {"via", via}});
        log_need(p, need, via, ep, static_cast<long>(req));
        used_.insert(req);
        return true;
    }

    void fallback(std::size_t p, const Vec& need, const char* why) {
        emit(clock_, p, "cache_miss", {{"why", why}});
        blocking_retrieval(tr_.context_embeddings[p], kFallbackDraw, p, why, &need);
    }

    // ---- need tokens

    Episode* active_episode(std::size_t p) {
        std::size_t horizon = cfg_.prediction.horizon + cfg_.runtime.buffer_cap + cfg_.monitor.max_extensions;
        for (auto it = episodes_.rbegin(); it != episodes_.rend(); ++it) {
            if (it->consumed) continue;
            if (p > it->trigger_token && p <= it->trigger_token + horizon) return &*it;
            if (p > it->trigger_token + horizon) break;
        }
        return nullptr;
    }

    void resolve_need(std::size_t p) {
        const Vec& need = need_at_[p]->need_embedding;
        ++needs_seen_;
        switch (mode_) {
            case BaselineMode::NoRetrieval:
                log_need(p, need, "none", -1, -1);
                return;
            case BaselineMode::SyncReactive:
                fallback(p, need, "sync");
                return;
            case BaselineMode::EntropyThreshold: {
                std::size_t horizon = cfg_.prediction.horizon + cfg_.runtime.buffer_cap + cfg_.monitor.max_extensions;
                if (last_blocking_ && p >= last_blocking_->second && p <= last_blocking_->second + horizon &&
                    serve_from_cache(p, need, last_blocking_->first, "designated", -1)) {
                    last_blocking_.reset();
                    return;
                }
                fallback(p, need, "miss");
                return;
            }
            case BaselineMode::FixedInterval:
            case BaselineMode::StaleQuery: {
                std::optional<std::uint64_t> best;
                std::size_t best_tok = 0;
                std::size_t lo = p > cfg_.bench.fixed_interval ? p - cfg_.bench.fixed_interval : 0;
                for (auto& [id, r] : requests_) {
                    if (r.kind != "interval" || r.issue_token < lo || !sched_.finished_by(id, clock_) || !sched_.ok(id)) continue;
                    if (!best || r.issue_token >= best_tok) best = id, best_tok = r.issue_token;
                }
                if (best && serve_from_cache(p, need, *best, "designated", -1)) return;
                fallback(p, need, "miss");
                return;
            }
            case BaselineMode::OraclePrefetch: {
                auto it = oracle_req_.find(p);
                if (it != oracle_req_.end() && sched_.finished_by(it->second, clock_) && sched_.ok(it->second) &&
                    serve_from_cache(p, need, it->second, "designated", -1))
                    return;
                fallback(p, need, "late");
                return;
            }
            case BaselineMode::Predictive:
                resolve_predictive(p, need);
                return;
        }
    }

    void resolve_predictive(std::size_t p, const Vec& need) {
        Episode* ep = active_episode(p);
        if (ep) {
            ep->consumed = true;
            switch (ep->state) {
                case EpState::Issued: {
                    bool ready = sched_.finished_by(ep->request, clock_) && sched_.ok(ep->request);
                    if (ready && serve_from_cache(p, need, ep->request, "designated", ep->id)) {
                        bool relevant = max_cos(need, cache_docs(ep->request)) >= cfg_.retriever.relevance;
                        resolve_fetch(*ep, p, relevant ? Outcome::QualityImproved : Outcome::Unused);
                        return;
                    }
                    fallback(p, need, "late");
                    resolve_fetch(*ep, p, Outcome::LateBlocking);
                    return;
                }
                case EpState::Reused: {
                    if (reuse(p, need, ep->id)) {
                        bool relevant = best_cos(need) >= cfg_.retriever.relevance;
                        resolve_decision(*ep, p, relevant ? Outcome::Sufficient : Outcome::Insufficient);
                        return;
                    }
                    fallback(p, need, "miss");
                    resolve_decision(*ep, p, Outcome::Insufficient);
                    return;
                }
                case EpState::Waiting:
                    emit(clock_, p, "cancel", {{"ep", ep->id}});
                    ep->state = EpState::Cancelled;
                    buffer_.close(static_cast<std::uint64_t>(ep->id));
                    resolve_accumulates(*ep, p);
                    fallback(p, need, "waiting");
                    return;
                case EpState::Declined:
                    fallback(p, need, "miss");
                    resolve_decision(*ep, p, Outcome::MissedOpportunity);
                    return;
                case EpState::Cancelled:
                    break;
            }
        }
        if (cache_.size() > 0 && params_.monitor) {
            double s = sufficiency(*params_.monitor, tr_.context_embeddings[p], cache_.embeddings());
            if (s > gates_.sufficiency && reuse(p, need, -1)) return;
        }
        fallback(p, need, "miss");
    }

    std::vector<Vec> cache_docs(std::uint64_t id) const {
        for (auto& e : cache_.peek_all())
            if (e.request_id == id) return e.embeddings;
        return {};
    }

    // serve from the cached entry closest to the current context
    bool reuse(std::size_t p, const Vec& need, long ep) {
        auto entries = cache_.peek_all();
        if (entries.empty()) return false;
        const Vec& e_c = tr_.context_embeddings[p];
        std::size_t best = 0;
        double bc = -2.0;
        for (std::size_t i = 0; i < entries.size(); ++i) {
            double m = max_cos(e_c, entries[i].embeddings);
            if (m > bc) bc = m, best = i;
        }
        return serve_from_cache(p, need, entries[best].request_id, "reuse", ep);
    }

    // ---- per-token work after emission

    void step(std::size_t t) {
        current_token_ = t;
        drain(clock_);
        if (need_at_[t]) resolve_need(t);
        clock_ += cfg_.runtime.token_ms;
        drain(clock_);
        emit(clock_, t, "token");
        switch (mode_) {
            case BaselineMode::Predictive: post_predictive(t); break;
            case BaselineMode::EntropyThreshold: post_entropy(t); break;
            case BaselineMode::FixedInterval:
            case BaselineMode::StaleQuery: post_interval(t); break;
            case BaselineMode::OraclePrefetch: post_oracle(t); break;
            default: break;
        }
    }

    void post_entropy(std::size_t t) {
        run_above_ = tr_.frames[t].entropy >= cfg_.runtime.theta_low ? run_above_ + 1 : 0;
        if (run_above_ == cfg_.runtime.debounce)
            last_blocking_ = {blocking_retrieval(tr_.context_embeddings[t], kBlockingDraw, t, "entropy", nullptr), t};
    }

    void post_interval(std::size_t t) {
        std::size_t I = cfg_.bench.fixed_interval;
        if ((t + 1) % I != 0) return;
        std::size_t src = mode_ == BaselineMode::StaleQuery ? (t >= I ? t - I : 0) : t;
        submit({Query{tr_.context_embeddings[src], Strategy::Focused, src, 0}}, 1.0, t, t + 1, "interval", -1);
    }

    void issue_oracle(const UncertaintyEvent& e, double) {
        oracle_req_[e.position] = submit({Query{e.need_embedding, Strategy::Focused, e.position, 0}}, 1.0,
                                         e.position > cfg_.runtime.oracle_lead ? e.position - cfg_.runtime.oracle_lead - 1 : 0,
                                         e.position, "oracle", -1);
    }

    void post_oracle(std::size_t t) {
        std::size_t p = t + 1 + cfg_.runtime.oracle_lead;
        if (p < tr_.size() && need_at_[p]) issue_oracle(*need_at_[p], clock_);
    }

    bool predictor_due() const {
        std::size_t need = cfg_.runtime.s_min > cfg_.runtime.debounce - 1 ? cfg_.runtime.s_min - (cfg_.runtime.debounce - 1) : 0;
        return guard_.tokens_since_last_retrieval >= need;
    }

    Episode* ready_episode(std::size_t t) {
        for (auto& e : episodes_)
            if (e.state == EpState::Waiting && e.ready_at == t) return &e;
        return nullptr;
    }

    PolicyState make_state(std::size_t t, double p_hat, double suff, double clar, std::size_t ext, Phase ph) const {
        auto s = PolicyState::from_frame(tr_.frames[t]);
        s.p_hat = p_hat;
        s.sufficiency = suff;
        s.clarity = clar;
        s.cache_size = cache_.size();
        s.cache_capacity = cache_.capacity();
        s.cache_max_cos = max_cos(tr_.context_embeddings[t], cache_.embeddings());
        s.tokens_since_last_retrieval = std::min<std::size_t>(guard_.tokens_since_last_retrieval, 1000);
        s.extensions_left = ext;
        s.phase = ph;
        return s;
    }

    StateSnapshot snapshot(std::size_t t, std::size_t since) const {
        StateSnapshot s;
        if (params_.predictor && !params_.score_override) {
            s.predictor_x = flatten_window(window_frames(tr_, t));
            s.predictor_o = output_stats(tr_.frames[t]);
        }
        s.e_c = tr_.context_embeddings[t];
        s.cache_max_cos = max_cos(s.e_c, cache_.embeddings());
        s.h_c = context_features(tr_, t, since);
        return s;
    }

    void post_predictive(std::size_t t) {
        observe_token(guard_, tr_.frames[t].entropy, tr_.suppress[t], guard_cfg_);
        Episode* ready = ready_episode(t);
        bool due = predictor_due();
        if (due || ready) {
            clock_ += cfg_.runtime.overhead_ms;
            drain(clock_);
        }
        check_unproductive(t);
        if (ready) ready_phase(*ready, t);
        else if (auto* w = waiting_episode()) buffer_.add(static_cast<std::uint64_t>(w->id), tr_.context_embeddings[t]);
        if (!due) {
            guard_.consecutive_above = 0;
        } else {
            double p = score(t);
            double tau = effective_tau(guard_, gates_.tau, t);
            emit(clock_, t, "predict", {{"p", p}, {"tau", tau}});
            observe_prediction(guard_, p, tau);
            if (can_trigger(guard_, guard_cfg_)) {
                trigger(t, p);
            } else if (p <= tau) {
                generate_pending_.push_back({t, make_state(t, p, 0.0, 0.0, 0, Phase::Full), snapshot(t, 0)});
            }
        }
        resolve_generates(t);
        resolve_expired(t);
    }

    Episode* waiting_episode() {
        for (auto& e : episodes_)
            if (e.state == EpState::Waiting) return &e;
        return nullptr;
    }

    void trigger(std::size_t t, double p) {
        on_trigger(guard_);
        Episode ep;
        ep.id = static_cast<long>(episodes_.size());
        ep.trigger_token = t;
        ep.p_hat = p;
        const MonitorParams& M = *params_.monitor;
        const Vec& e_c = tr_.context_embeddings[t];
        auto cached = cache_.embeddings();
        double suff = sufficiency(M, e_c, cached);
        Vec h = context_features(tr_, t, 0);
        double clar = clarity(M, h);
        emit(clock_, t, "trigger", {{"ep", ep.id}, {"p", p}, {"suff", suff}, {"clarity", clar}});
        Gates g = gates_;
        g.tau = effective_tau(guard_, gates_.tau, t);
        ep.decision_state = make_state(t, p, suff, clar, 0, Phase::Trigger);
        ep.snapshot = snapshot(t, 0);
        Action a = decide(params_.policy, ep.decision_state, g, &explore_rng_);
        if (a == Action::Reuse) {
            emit(clock_, t, "skip", {{"ep", ep.id}, {"suff", suff}});
            ep.state = EpState::Reused;
            episodes_.push_back(std::move(ep));
            return;
        }
        if (a == Action::Generate) {
            emit(clock_, t, "decline", {{"ep", ep.id}});
            ep.state = EpState::Declined;
            episodes_.push_back(std::move(ep));
            return;
        }
        ep.decision_resolved = true;  // proceeding to fetch is rewarded through the fetch itself
        auto scores = context_score(M, h);
        ep.k_star = std::min(best_k(scores), cfg_.monitor.max_wait);
        ep.ready_at = t + ep.k_star;
        ep.state = EpState::Waiting;
        emit(clock_, t, "wait", {{"ep", ep.id}, {"k", ep.k_star}});
        buffer_.open(static_cast<std::uint64_t>(ep.id));
        buffer_.add(static_cast<std::uint64_t>(ep.id), e_c);
        episodes_.push_back(std::move(ep));
        if (episodes_.back().k_star == 0) ready_phase(episodes_.back(), t);
    }

    void ready_phase(Episode& ep, std::size_t t) {
        auto bid = static_cast<std::uint64_t>(ep.id);
        if (t > ep.trigger_token) buffer_.add(bid, tr_.context_embeddings[t]);
        const MonitorParams& M = *params_.monitor;
        std::size_t since = t - ep.trigger_token;
        Vec h = context_features(tr_, t, since);
        double clar = clarity(M, h);
        Gates g = gates_;
        g.tau = effective_tau(guard_, gates_.tau, ep.trigger_token);
        auto st = make_state(t, ep.p_hat, 0.0, clar, buffer_.extensions_left(bid), Phase::Ready);
        Action a = decide(params_.policy, st, g, &explore_rng_);
        if (a == Action::Accumulate && buffer_.extend(bid)) {
            emit(clock_, t, "accumulate", {{"ep", ep.id}, {"clarity", clar}});
            ep.accumulates.emplace_back(st, snapshot(t, since));
            ep.ready_at = t + 1;
            return;
        }
        if (a == Action::Generate) {
            emit(clock_, t, "decline", {{"ep", ep.id}});
            ep.state = EpState::Declined;
            ep.decision_state = st;
            ep.decision_resolved = false;
            buffer_.close(bid);
            resolve_accumulates(ep, t);
            return;
        }
        Vec centroid = topic_centroid(tr_.context_embeddings, t, cfg_.query.centroid_window);
        auto qs = build_queries(tr_.context_embeddings[t], ep.p_hat, centroid, t, cfg_.query);
        ep.issue_token = t;
        ep.state = EpState::Issued;
        ep.decision_state = st;
        ep.snapshot = snapshot(t, since);
        ep.request = submit(std::move(qs), ep.p_hat, t, ep.trigger_token + cfg_.prediction.horizon, "prefetch", ep.id);
        buffer_.close(bid);
        resolve_accumulates(ep, t);
    }

    void check_unproductive(std::size_t t) {
        for (auto& ep : episodes_) {
            if (ep.state != EpState::Issued || ep.issue_token + guard_cfg_.unproductive_h != t) continue;
            bool any = false;
            for (std::size_t u = ep.issue_token + 1; u <= t && u < tr_.size(); ++u) any = any || need_at_[u];
            if (!any) {
                raise_threshold(guard_, t, guard_cfg_);
                emit(clock_, t, "raise", {{"ep", ep.id}, {"until", guard_.offset_until}});
            }
        }
    }

    // ---- rewards

    void record(std::size_t token, Action a, Outcome o, const PolicyState& st, const StateSnapshot& snap) {
        RewardEvent e;
        e.trace_id = id_;
        e.token = token;
        e.action = a;
        e.outcome = o;
        e.reward = reward_of({a, o}, cfg_.policy.rewards);
        e.component = component_for(a);
        e.state = st;
        e.snapshot = snap;
        if (cfg_.policy.online) {
            if (action_mask(st, gates_)[static_cast<std::size_t>(a)]) {
                PolicyParams P = params_.policy;
                P.lr = cfg_.policy.online_lr;
                P = update(std::move(P), st, a, e.reward, gates_);
                params_.policy.phi = P.phi;
            }
            if (params_.predictor && params_.monitor) route(e, *params_.predictor, *params_.monitor, cfg_.policy.online_lr);
        }
        rewards_.push_back(std::move(e));
    }

    void resolve_fetch(Episode& ep, std::size_t token, Outcome o) {
        if (ep.fetch_resolved) return;
        ep.fetch_resolved = true;
        record(token, Action::Fetch, o, ep.decision_state, ep.snapshot);
    }

    void resolve_decision(Episode& ep, std::size_t token, Outcome o) {
        if (ep.decision_resolved) return;
        ep.decision_resolved = true;
        Action a = ep.state == EpState::Reused ? Action::Reuse : Action::Generate;
        record(token, a, o, ep.decision_state, ep.snapshot);
    }

    void resolve_accumulates(Episode& ep, std::size_t t) {
        bool delayed = t - ep.trigger_token > cfg_.monitor.max_wait;
        for (auto& [st, snap] : ep.accumulates)
            record(t, Action::Accumulate, delayed ? Outcome::ExcessiveDelay : Outcome::ImprovedQuery, st, snap);
        ep.accumulates.clear();
    }

    void resolve_generates(std::size_t t) {
        std::size_t D = cfg_.prediction.horizon;
        while (!generate_pending_.empty() && generate_pending_.front().token + D <= t) {
            auto g = std::move(generate_pending_.front());
            generate_pending_.pop_front();
            bool missed = false;
            for (std::size_t u = g.token + 1; u <= g.token + D && u < tr_.size(); ++u) missed = missed || miss_at_[u];
            record(g.token + D, Action::Generate, missed ? Outcome::MissedOpportunity : Outcome::QualityMaintained, g.state,
                   g.snap);
        }
    }

    void resolve_expired(std::size_t t) {
        std::size_t horizon = cfg_.prediction.horizon + cfg_.runtime.buffer_cap + cfg_.monitor.max_extensions;
        for (auto& ep : episodes_) {
            if (!ep.decision_resolved && (ep.state == EpState::Reused || ep.state == EpState::Declined) &&
                t >= ep.trigger_token + horizon) {
                // nothing was needed: skipping or declining cost nothing
                resolve_decision(ep, t, ep.state == EpState::Reused ? Outcome::Sufficient : Outcome::QualityMaintained);
            }
            if (ep.state == EpState::Issued && !ep.fetch_resolved && t >= ep.issue_token + cfg_.runtime.reuse_window) {
                resolve_fetch(ep, t, used_.count(ep.request) ? Outcome::QualityImproved : Outcome::Unused);
            }
        }
    }

    void finish_rewards(std::size_t N) {
        if (!predictive()) return;
        while (!generate_pending_.empty()) {
            auto g = std::move(generate_pending_.front());
            generate_pending_.pop_front();
            bool missed = false;
            for (std::size_t u = g.token + 1; u <= g.token + cfg_.prediction.horizon && u < N; ++u) missed = missed || miss_at_[u];
            record(g.token, Action::Generate, missed ? Outcome::MissedOpportunity : Outcome::QualityMaintained, g.state, g.snap);
        }
        for (auto& ep : episodes_) {
            if (!ep.decision_resolved && (ep.state == EpState::Reused || ep.state == EpState::Declined))
                resolve_decision(ep, N - 1, ep.state == EpState::Reused ? Outcome::Sufficient : Outcome::QualityMaintained);
            if (ep.state == EpState::Issued && !ep.fetch_resolved)
                resolve_fetch(ep, N - 1, used_.count(ep.request) ? Outcome::QualityImproved : Outcome::Unused);
            if (ep.state == EpState::Waiting) resolve_accumulates(ep, N - 1);
        }
    }

    struct PendingGenerate {
        std::size_t token;
        PolicyState state;
        StateSnapshot snap;
    };

    const Config& cfg_;
    const Trace& tr_;
    std::size_t id_;
    const Corpus& corpus_;
    ParamsBundle& params_;
    ExecMode exec_;
    BaselineMode mode_;
    std::uint64_t seed_;
    EventLog& log_;
    std::vector<RewardEvent>& rewards_;
    GuardConfig guard_cfg_;
    Gates gates_;
    LatencyModel latency_;
    ResultCache cache_;
    ContextBuffer buffer_;
    VirtualScheduler sched_;
    Rng explore_rng_;
    std::optional<WorkerPool> pool_;

    GuardrailState guard_;
    double clock_ = 0.0;
    std::size_t current_token_ = 0;
    std::uint64_t next_request_ = 0;
    std::size_t needs_seen_ = 0;
    std::size_t run_above_ = 0;
    std::vector<const UncertaintyEvent*> need_at_;
    std::vector<bool> miss_at_;
    std::vector<Vec> integrated_;
    std::map<std::uint64_t, PrefetchRequest> requests_;
    std::map<std::size_t, std::uint64_t> oracle_req_;
    std::optional<std::pair<std::uint64_t, std::size_t>> last_blocking_;
    std::vector<Episode> episodes_;
    std::deque<PendingGenerate> generate_pending_;
    std::set<std::uint64_t> used_;
};

}  // namespace detail

inline void check_params(const ParamsBundle& p, BaselineMode mode) {
    if (mode != BaselineMode::Predictive) return;
    if (!p.predictor && !p.score_override) throw std::invalid_argument("predictive mode requires predictor parameters");
    if (!p.monitor) throw std::invalid_argument("predictive mode requires monitor parameters");
}

inline RunResult run_generation(const Config& cfg, const std::vector<Trace>& traces, const Corpus& corpus,
                                ParamsBundle params, ExecMode exec, BaselineMode mode, std::uint64_t seed) {
    check_params(params, mode);
    RunResult out;
    for (std::size_t i = 0; i < traces.size(); ++i) {
        detail::TraceRun run(cfg, traces[i], i, corpus, params, exec, mode, seed, out.log, out.rewards);
        run.run();
    }
    out.params = std::move(params);
    return out;
}

inline RunResult run_generation(const Config& cfg, const Trace& trace, const Corpus& corpus, ParamsBundle params,
                                ExecMode exec, BaselineMode mode, std::uint64_t seed) {
    return run_generation(cfg, std::vector<Trace>{trace}, corpus, std::move(params), exec, mode, seed);
}

}  // namespace pfrag
