#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "pfrag/common.hpp"
#include "pfrag/config.hpp"
#include "pfrag/features.hpp"
#include "pfrag/serialize.hpp"
#include "pfrag/trace.hpp"

namespace pfrag {

constexpr std::size_t kOutputStats = 3;

// Two tanh layers over the standardized flattened window, logistic head over [z; o].
struct PredictorParams {
    std::size_t d_in = 0;
    std::size_t d_z = 0;
    Vec x_mean, x_scale;  // standardization, stored with the weights
    Vec o_mean, o_scale;
    Vec W1, b1;  // d_z x d_in
    Vec W2, b2;  // d_z x d_z
    Vec wp;      // d_z + 3
    double bp = 0.0;

    bool operator==(const PredictorParams&) const = default;

    static PredictorParams zeros(std::size_t d_in, std::size_t d_z) {
        PredictorParams p;
        p.d_in = d_in;
        p.d_z = d_z;
        p.x_mean.assign(d_in, 0.0);
        p.x_scale.assign(d_in, 1.0);
        p.o_mean.assign(kOutputStats, 0.0);
        p.o_scale.assign(kOutputStats, 1.0);
        p.W1.assign(d_z * d_in, 0.0);
        p.b1.assign(d_z, 0.0);
        p.W2.assign(d_z * d_z, 0.0);
        p.b2.assign(d_z, 0.0);
        p.wp.assign(d_z + kOutputStats, 0.0);
        return p;
    }

    std::size_t n_weights() const { return W1.size() + b1.size() + W2.size() + b2.size() + wp.size() + 1; }

    // flat view over trainable weights, in a fixed order
    double& weight(std::size_t i) {
        for (Vec* v : {&W1, &b1, &W2, &b2, &wp}) {
            if (i < v->size()) return (*v)[i];
            i -= v->size();
        }
        require(i == 0, "weight index out of range");
        return bp;
    }
};

struct PredictorInstance {
    Vec x;  // flattened window
    Vec o;  // output stats
    bool label = false;
    std::size_t trace_id = 0;
    std::size_t t = 0;
};

struct Activations {
    Vec xn, h1, z, on;
    double logit = 0.0;
    double p = 0.5;
};

inline Activations forward(const PredictorParams& P, const Vec& x, const Vec& o) {
    if (x.size() != P.d_in || o.size() != kOutputStats) throw std::invalid_argument("predict: feature size mismatch");
    if (!all_finite(x) || !all_finite(o)) throw std::invalid_argument("predict: non-finite feature");
    Activations a;
    a.xn.resize(P.d_in);
    for (std::size_t i = 0; i < P.d_in; ++i) a.xn[i] = (x[i] - P.x_mean[i]) / P.x_scale[i];
    a.h1.resize(P.d_z);
    for (std::size_t r = 0; r < P.d_z; ++r) {
        const double* w = &P.W1[r * P.d_in];
        double s = P.b1[r];
        for (std::size_t i = 0; i < P.d_in; ++i) s += w[i] * a.xn[i];
        a.h1[r] = std::tanh(s);
    }
    a.z.resize(P.d_z);
    for (std::size_t r = 0; r < P.d_z; ++r) {
        const double* w = &P.W2[r * P.d_z];
        double s = P.b2[r];
        for (std::size_t i = 0; i < P.d_z; ++i) s += w[i] * a.h1[i];
        a.z[r] = std::tanh(s);
    }
    a.on.resize(kOutputStats);
    for (std::size_t i = 0; i < kOutputStats; ++i) a.on[i] = (o[i] - P.o_mean[i]) / P.o_scale[i];
    double s = P.bp;
    for (std::size_t i = 0; i < P.d_z; ++i) s += P.wp[i] * a.z[i];
    for (std::size_t i = 0; i < kOutputStats; ++i) s += P.wp[P.d_z + i] * a.on[i];
    a.logit = s;
    a.p = sigmoid(s);
    if (!std::isfinite(a.p)) throw Error("predict: non-finite output");
    return a;
}

// logistic head alone, over an encoder output z and standardized o
inline double head(const PredictorParams& P, const Vec& z, const Vec& on) {
    double s = P.bp;
    for (std::size_t i = 0; i < P.d_z; ++i) s += P.wp[i] * z[i];
    for (std::size_t i = 0; i < kOutputStats; ++i) s += P.wp[P.d_z + i] * on[i];
    return sigmoid(s);
}

inline double predict(const PredictorParams& P, const Vec& x, const Vec& o) { return forward(P, x, o).p; }

inline double predict(const PredictorParams& P, const std::vector<SignalFrame>& frames, const Vec& o) {
    return predict(P, flatten_window(frames), o);
}

inline double predict_at(const PredictorParams& P, const Trace& tr, std::size_t t) {
    return predict(P, flatten_window(window_frames(tr, t)), output_stats(tr.frames[t]));
}

// True iff entropy first crosses theta at some tau in [t+1, t+delta].
inline bool make_label(const Trace& tr, std::size_t t, double theta, std::size_t delta) {
    if (delta < 1 || t + delta > tr.size()) throw std::out_of_range("make_label: t + delta exceeds trace length");
    std::size_t end = std::min(t + delta, tr.size() - 1);
    for (std::size_t tau = t + 1; tau <= end; ++tau) {
        bool above = tr.frames[tau].entropy >= theta;
        bool prev = tr.frames[tau - 1].entropy >= theta;
        if (above && !prev) return true;
    }
    return false;
}

inline PredictorInstance make_instance(const Trace& tr, std::size_t t, bool label, std::size_t trace_id) {
    return {flatten_window(window_frames(tr, t)), output_stats(tr.frames[t]), label, trace_id, t};
}

// All positive positions plus negatives sampled at `negative_ratio` per positive.
inline std::vector<PredictorInstance> make_predictor_instances(const std::vector<Trace>& traces, double theta,
                                                               std::size_t delta, double negative_ratio,
                                                               std::uint64_t seed) {
    std::vector<PredictorInstance> out;
    Rng rng(derive_seed(seed, 0x9e9));
    for (std::size_t i = 0; i < traces.size(); ++i) {
        const auto& tr = traces[i];
        if (tr.size() < delta + 1) continue;
        std::vector<std::size_t> pos, neg;
        for (std::size_t t = 0; t + delta <= tr.size() - 1; ++t) (make_label(tr, t, theta, delta) ? pos : neg).push_back(t);
        for (std::size_t k = neg.size(); k > 1; --k) std::swap(neg[k - 1], neg[rng.index(k)]);
        auto n_neg = std::min(neg.size(), static_cast<std::size_t>(std::llround(negative_ratio * static_cast<double>(pos.size()))));
        neg.resize(n_neg);
        std::sort(neg.begin(), neg.end());
        for (auto t : pos) out.push_back(make_instance(tr, t, true, i));
        for (auto t : neg) out.push_back(make_instance(tr, t, false, i));
    }
    return out;
}

inline double mean_bce(const PredictorParams& P, const std::vector<PredictorInstance>& data) {
    double s = 0.0;
    for (const auto& d : data) s += bce(predict(P, d.x, d.o), d.label);
    return data.empty() ? 0.0 : s / static_cast<double>(data.size());
}

// Accumulates dBCE/dweights into g (same flat order as PredictorParams::weight).
inline void accumulate_gradient(const PredictorParams& P, const PredictorInstance& d, Vec& g, double scale = 1.0) {
    auto a = forward(P, d.x, d.o);
    double dl = (a.p - (d.label ? 1.0 : 0.0)) * scale;
    const std::size_t oW1 = 0, ob1 = P.W1.size(), oW2 = ob1 + P.b1.size(), ob2 = oW2 + P.W2.size(),
                      owp = ob2 + P.b2.size(), obp = owp + P.wp.size();
    for (std::size_t i = 0; i < P.d_z; ++i) g[owp + i] += dl * a.z[i];
    for (std::size_t i = 0; i < kOutputStats; ++i) g[owp + P.d_z + i] += dl * a.on[i];
    g[obp] += dl;
    Vec dz2(P.d_z);
    for (std::size_t r = 0; r < P.d_z; ++r) dz2[r] = dl * P.wp[r] * (1.0 - a.z[r] * a.z[r]);
    Vec dh1(P.d_z, 0.0);
    for (std::size_t r = 0; r < P.d_z; ++r) {
        if (dz2[r] == 0.0) continue;
        g[ob2 + r] += dz2[r];
        double* gw = &g[oW2 + r * P.d_z];
        const double* w = &P.W2[r * P.d_z];
        for (std::size_t i = 0; i < P.d_z; ++i) {
            gw[i] += dz2[r] * a.h1[i];
            dh1[i] += dz2[r] * w[i];
        }
    }
    for (std::size_t r = 0; r < P.d_z; ++r) {
        double d1 = dh1[r] * (1.0 - a.h1[r] * a.h1[r]);
        if (d1 == 0.0) continue;
        g[ob1 + r] += d1;
        double* gw = &g[oW1 + r * P.d_in];
        for (std::size_t i = 0; i < P.d_in; ++i) gw[i] += d1 * a.xn[i];
    }
}

inline Vec bce_gradient(const PredictorParams& P, const std::vector<PredictorInstance>& data) {
    Vec g(P.n_weights(), 0.0);
    for (const auto& d : data) accumulate_gradient(P, d, g, 1.0 / static_cast<double>(data.size()));
    return g;
}

inline void fit_standardization(PredictorParams& P, const std::vector<PredictorInstance>& data) {
    const double n = static_cast<double>(data.size());
    auto fit = [&](auto get, std::size_t dim, Vec& mean, Vec& scale) {
        mean.assign(dim, 0.0);
        scale.assign(dim, 0.0);
        for (const auto& d : data)
            for (std::size_t i = 0; i < dim; ++i) mean[i] += get(d)[i];
        for (auto& m : mean) m /= n;
        for (const auto& d : data)
            for (std::size_t i = 0; i < dim; ++i) {
                double c = get(d)[i] - mean[i];
                scale[i] += c * c;
            }
        for (auto& s : scale) s = std::max(std::sqrt(s / n), 1e-6);
    };
    fit([](const PredictorInstance& d) -> const Vec& { return d.x; }, P.d_in, P.x_mean, P.x_scale);
    fit([](const PredictorInstance& d) -> const Vec& { return d.o; }, kOutputStats, P.o_mean, P.o_scale);
}

inline PredictorParams init_params(std::size_t d_in, std::size_t d_z, std::uint64_t seed) {
    auto P = PredictorParams::zeros(d_in, d_z);
    Rng rng(derive_seed(seed, 0x1417));
    double s1 = 1.0 / std::sqrt(static_cast<double>(d_in));
    double s2 = 1.0 / std::sqrt(static_cast<double>(d_z));
    for (auto& w : P.W1) w = rng.normal(0.0, s1);
    for (auto& w : P.W2) w = rng.normal(0.0, s2);
    for (auto& w : P.wp) w = rng.normal(0.0, s2);
    return P;
}

inline PredictorParams train_supervised(const std::vector<PredictorInstance>& data, const TrainConfig& cfg) {
    std::size_t n_pos = 0;
    for (const auto& d : data) n_pos += d.label ? 1 : 0;
    if (n_pos == 0 || n_pos == data.size()) throw std::invalid_argument("train_supervised: single-class dataset");
    auto P = init_params(data[0].x.size(), cfg.d_z, cfg.seed);
    fit_standardization(P, data);
    Rng rng(derive_seed(cfg.seed, 0x5a1d));
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Vec vel(P.n_weights(), 0.0), g(P.n_weights());
    for (std::size_t ep = 0; ep < cfg.epochs; ++ep) {
        for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng.index(k)]);
        for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
            std::size_t e = std::min(order.size(), b + cfg.batch);
            std::fill(g.begin(), g.end(), 0.0);
            double inv = 1.0 / static_cast<double>(e - b);
            for (std::size_t i = b; i < e; ++i) accumulate_gradient(P, data[order[i]], g, inv);
            for (std::size_t i = 0; i < g.size(); ++i) {
                vel[i] = cfg.momentum * vel[i] - cfg.lr * g[i];
                P.weight(i) += vel[i];
            }
        }
    }
    return P;
}

// Mann-Whitney form; ties count one half.
inline double auroc(const std::vector<double>& scores, const std::vector<bool>& labels) {
    require(scores.size() == labels.size(), "auroc: size mismatch");
    std::size_t n_pos = 0;
    for (bool l : labels) n_pos += l ? 1 : 0;
    std::size_t n_neg = labels.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auroc: needs at least one positive and one negative");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
    // count, for every positive, negatives strictly below plus half the tied negatives
    double wins = 0.0;
    std::size_t neg_below = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i, pos_here = 0, neg_here = 0;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            (labels[idx[j]] ? pos_here : neg_here)++;
            ++j;
        }
        wins += static_cast<double>(pos_here) * (static_cast<double>(neg_below) + 0.5 * static_cast<double>(neg_here));
        neg_below += neg_here;
        i = j;
    }
    return wins / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

inline std::vector<Tensor> to_tensors(const PredictorParams& P) {
    auto col = [](const Vec& v) { return Tensor{static_cast<std::uint32_t>(v.size()), 1, v}; };
    return {col(P.x_mean), col(P.x_scale), col(P.o_mean), col(P.o_scale),
            Tensor{static_cast<std::uint32_t>(P.d_z), static_cast<std::uint32_t>(P.d_in), P.W1}, col(P.b1),
            Tensor{static_cast<std::uint32_t>(P.d_z), static_cast<std::uint32_t>(P.d_z), P.W2}, col(P.b2),
            col(P.wp), Tensor{1, 1, {P.bp}}};
}

inline std::string serialize(const PredictorParams& P) { return encode_tensors(ParamKind::Predictor, to_tensors(P)); }

inline PredictorParams deserialize_predictor(const std::string& bytes) {
    auto ts = decode_tensors(ParamKind::Predictor, bytes);
    if (ts.size() != 10) throw Error("predictor file: expected 10 tensors");
    PredictorParams P;
    P.d_z = ts[4].rows;
    P.d_in = ts[4].cols;
    P.x_mean = ts[0].data;
    P.x_scale = ts[1].data;
    P.o_mean = ts[2].data;
    P.o_scale = ts[3].data;
    P.W1 = ts[4].data;
    P.b1 = ts[5].data;
    P.W2 = ts[6].data;
    P.b2 = ts[7].data;
    P.wp = ts[8].data;
    P.bp = ts[9].data.at(0);
    if (P.x_mean.size() != P.d_in || P.b1.size() != P.d_z || P.W2.size() != P.d_z * P.d_z ||
        P.wp.size() != P.d_z + kOutputStats)
        throw Error("predictor file: inconsistent dimensions");
    return P;
}

}  // namespace pfrag
