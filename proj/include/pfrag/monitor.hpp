#pragma once

#include <array>
#include <numeric>
#include <optional>
#include <vector>

#include "pfrag/common.hpp"
#include "pfrag/config.hpp"
#include "pfrag/features.hpp"
#include "pfrag/labels.hpp"
#include "pfrag/serialize.hpp"

namespace pfrag {

constexpr std::size_t kWaitSlots = 6;  // k = 0..5

struct ContextState {
    std::size_t tokens_since_trigger = 0;
    Vec e_c;
    Vec h_c;
    std::optional<std::uint64_t> pending_request;
};

// Three heads: ContextScore (6 sigmoids over h_c), sufficiency over [e_c; m], clarity over h_c.
struct MonitorParams {
    std::size_t d_c = 0;
    std::size_t d_emb = 0;
    Vec Wc, bc;  // 6 x d_c, 6
    Vec ws;      // d_emb + 1
    double bs = 0.0;
    Vec wl;  // d_c
    double bl = 0.0;

    bool operator==(const MonitorParams&) const = default;

    static MonitorParams zeros(std::size_t d_c, std::size_t d_emb) {
        MonitorParams p;
        p.d_c = d_c;
        p.d_emb = d_emb;
        p.Wc.assign(kWaitSlots * d_c, 0.0);
        p.bc.assign(kWaitSlots, 0.0);
        p.ws.assign(d_emb + 1, 0.0);
        p.wl.assign(d_c, 0.0);
        return p;
    }

    std::size_t n_weights() const { return Wc.size() + bc.size() + ws.size() + 1 + wl.size() + 1; }

    double& weight(std::size_t i) {
        if (i < Wc.size()) return Wc[i];
        i -= Wc.size();
        if (i < bc.size()) return bc[i];
        i -= bc.size();
        if (i < ws.size()) return ws[i];
        i -= ws.size();
        if (i == 0) return bs;
        --i;
        if (i < wl.size()) return wl[i];
        i -= wl.size();
        require(i == 0, "weight index out of range");
        return bl;
    }
};

inline std::array<double, kWaitSlots> context_score(const MonitorParams& P, const Vec& h_c) {
    require(h_c.size() == P.d_c, "context_score: feature size mismatch");
    std::array<double, kWaitSlots> out{};
    for (std::size_t k = 0; k < kWaitSlots; ++k)
        out[k] = sigmoid(P.bc[k] + dot(std::span(&P.Wc[k * P.d_c], P.d_c), h_c));
    return out;
}

inline std::array<double, kWaitSlots> context_score(const MonitorParams& P, const ContextState& s) {
    return context_score(P, s.h_c);
}

// smallest k among the maxima
inline std::size_t best_k(const std::array<double, kWaitSlots>& s) { return best_wait(s); }

inline double sufficiency_from(const MonitorParams& P, const Vec& e_c, double m) {
    require(e_c.size() == P.d_emb, "sufficiency: embedding size mismatch");
    return sigmoid(P.bs + dot(std::span(P.ws.data(), P.d_emb), e_c) + P.ws[P.d_emb] * m);
}

// m = max cosine over cached docs, -1 for an empty cache
inline double sufficiency(const MonitorParams& P, const Vec& e_c, const std::vector<Vec>& cached) {
    if (!is_unit(e_c)) throw std::invalid_argument("sufficiency: e_c must be unit norm");
    return sufficiency_from(P, e_c, max_cos(e_c, cached));
}

inline double clarity(const MonitorParams& P, const Vec& h_c) {
    require(h_c.size() == P.d_c, "clarity: feature size mismatch");
    return sigmoid(P.bl + dot(P.wl, h_c));
}

struct MonitorLossWeights {
    double beta = 0.5;
    double gamma = 0.5;
    double delta = 0.3;
    static MonitorLossWeights from(const MonitorConfig& m) { return {m.beta, m.gamma, m.delta}; }
};

// L = mean_i [ beta * pos_i * mean_k (s_k - q_k)^2 + gamma * BCE(suff) + delta * (clarity - c)^2 ]
inline double monitor_loss(const MonitorParams& P, const std::vector<LabeledInstance>& data, const MonitorLossWeights& w) {
    if (data.empty()) return 0.0;
    double total = 0.0;
    for (const auto& d : data) {
        if (d.wait_qualities) {
            auto s = context_score(P, d.context_features);
            double se = 0.0;
            for (std::size_t k = 0; k < kWaitSlots; ++k) se += (s[k] - (*d.wait_qualities)[k]) * (s[k] - (*d.wait_qualities)[k]);
            total += w.beta * se / static_cast<double>(kWaitSlots);
        }
        total += w.gamma * bce(sufficiency_from(P, d.suff_context, d.suff_max_cos), d.sufficiency_label);
        double c = clarity(P, d.clarity_features) - d.clarity_score;
        total += w.delta * c * c;
    }
    return total / static_cast<double>(data.size());
}

inline void accumulate_monitor_gradient(const MonitorParams& P, const LabeledInstance& d, const MonitorLossWeights& w,
                                        Vec& g, double scale) {
    const std::size_t oWc = 0, obc = P.Wc.size(), ows = obc + P.bc.size(), obs = ows + P.ws.size(), owl = obs + 1,
                      obl = owl + P.wl.size();
    if (d.wait_qualities && w.beta != 0.0) {
        auto s = context_score(P, d.context_features);
        for (std::size_t k = 0; k < kWaitSlots; ++k) {
            double dz = scale * w.beta * 2.0 * (s[k] - (*d.wait_qualities)[k]) * s[k] * (1.0 - s[k]) /
                        static_cast<double>(kWaitSlots);
            if (dz == 0.0) continue;
            g[obc + k] += dz;
            for (std::size_t i = 0; i < P.d_c; ++i) g[oWc + k * P.d_c + i] += dz * d.context_features[i];
        }
    }
    if (w.gamma != 0.0) {
        double p = sufficiency_from(P, d.suff_context, d.suff_max_cos);
        double dz = scale * w.gamma * (p - (d.sufficiency_label ? 1.0 : 0.0));
        for (std::size_t i = 0; i < P.d_emb; ++i) g[ows + i] += dz * d.suff_context[i];
        g[ows + P.d_emb] += dz * d.suff_max_cos;
        g[obs] += dz;
    }
    if (w.delta != 0.0) {
        double c = clarity(P, d.clarity_features);
        double dz = scale * w.delta * 2.0 * (c - d.clarity_score) * c * (1.0 - c);
        for (std::size_t i = 0; i < P.d_c; ++i) g[owl + i] += dz * d.clarity_features[i];
        g[obl] += dz;
    }
}

inline Vec monitor_gradient(const MonitorParams& P, const std::vector<LabeledInstance>& data, const MonitorLossWeights& w) {
    Vec g(P.n_weights(), 0.0);
    for (const auto& d : data) accumulate_monitor_gradient(P, d, w, g, 1.0 / static_cast<double>(data.size()));
    return g;
}

inline MonitorParams train_monitor(const std::vector<LabeledInstance>& data, const MonitorConfig& cfg,
                                   std::uint64_t seed = 1) {
    if (data.empty()) throw std::invalid_argument("train_monitor: empty dataset");
    auto P = MonitorParams::zeros(data[0].context_features.size(), data[0].suff_context.size());
    auto w = MonitorLossWeights::from(cfg);
    Rng rng(derive_seed(seed, 0x3017));
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Vec vel(P.n_weights(), 0.0), g(P.n_weights());
    for (std::size_t ep = 0; ep < cfg.epochs; ++ep) {
        for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng.index(k)]);
        for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
            std::size_t e = std::min(order.size(), b + cfg.batch);
            std::fill(g.begin(), g.end(), 0.0);
            double inv = 1.0 / static_cast<double>(e - b);
            for (std::size_t i = b; i < e; ++i) accumulate_monitor_gradient(P, data[order[i]], w, g, inv);
            for (std::size_t i = 0; i < g.size(); ++i) {
                vel[i] = cfg.momentum * vel[i] - cfg.lr * g[i];
                P.weight(i) += vel[i];
            }
        }
    }
    return P;
}

// held-out wait-quality MSE over positive instances
inline double wait_mse(const MonitorParams& P, const std::vector<LabeledInstance>& data) {
    double se = 0.0;
    std::size_t n = 0;
    for (const auto& d : data) {
        if (!d.wait_qualities) continue;
        auto s = context_score(P, d.context_features);
        for (std::size_t k = 0; k < kWaitSlots; ++k) se += (s[k] - (*d.wait_qualities)[k]) * (s[k] - (*d.wait_qualities)[k]);
        n += kWaitSlots;
    }
    return n ? se / static_cast<double>(n) : 0.0;
}

inline std::string serialize(const MonitorParams& P) {
    auto u = [](std::size_t v) { return static_cast<std::uint32_t>(v); };
    return encode_tensors(ParamKind::Monitor, {Tensor{u(kWaitSlots), u(P.d_c), P.Wc},
                                               Tensor{u(kWaitSlots), 1, P.bc},
                                               Tensor{u(P.ws.size()), 1, P.ws},
                                               Tensor{1, 1, {P.bs}},
                                               Tensor{u(P.wl.size()), 1, P.wl},
                                               Tensor{1, 1, {P.bl}}});
}

inline MonitorParams deserialize_monitor(const std::string& bytes) {
    auto ts = decode_tensors(ParamKind::Monitor, bytes);
    if (ts.size() != 6) throw Error("monitor file: expected 6 tensors");
    MonitorParams P;
    P.d_c = ts[0].cols;
    P.Wc = ts[0].data;
    P.bc = ts[1].data;
    P.ws = ts[2].data;
    P.bs = ts[3].data.at(0);
    P.wl = ts[4].data;
    P.bl = ts[5].data.at(0);
    if (P.ws.empty() || P.bc.size() != kWaitSlots || P.wl.size() != P.d_c) throw Error("monitor file: inconsistent dimensions");
    P.d_emb = P.ws.size() - 1;
    return P;
}

}  // namespace pfrag
