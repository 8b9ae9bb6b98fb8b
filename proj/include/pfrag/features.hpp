#pragma once

#include <vector>

#include "pfrag/common.hpp"
#include "pfrag/trace.hpp"

namespace pfrag {

constexpr std::size_t kWindow = 16;
constexpr std::size_t kScalarFeatures = 6;
constexpr std::size_t kSinceTriggerSlots = 8;  // 0..7, the wait cap plus extensions

inline std::size_t frame_dim(std::size_t d_h) { return kScalarFeatures + d_h; }

inline void append_frame(Vec& out, const SignalFrame& f) {
    out.push_back(f.entropy);
    out.push_back(f.entropy_delta);
    out.push_back(f.attention_entropy);
    out.push_back(f.value_norm_delta);
    out.push_back(f.topk_margin);
    out.push_back(f.hedge_flag ? 1.0 : 0.0);
    out.insert(out.end(), f.hidden_summary.begin(), f.hidden_summary.end());
}

// Frames t-15..t, left-padded with the all-zero neutral frame.
inline std::vector<SignalFrame> window_frames(const Trace& tr, std::size_t t) {
    require(t < tr.size(), "window_frames: t out of range");
    std::size_t d_h = tr.frames[0].hidden_summary.size();
    std::vector<SignalFrame> w;
    w.reserve(kWindow);
    for (std::size_t i = 0; i < kWindow; ++i) {
        long idx = static_cast<long>(t) - static_cast<long>(kWindow - 1) + static_cast<long>(i);
        if (idx < 0) {
            SignalFrame n;
            n.hidden_summary.assign(d_h, 0.0);
            w.push_back(std::move(n));
        } else {
            w.push_back(tr.frames[static_cast<std::size_t>(idx)]);
        }
    }
    return w;
}

inline Vec flatten_window(const std::vector<SignalFrame>& frames) {
    require(frames.size() == kWindow, "predictor window must hold exactly 16 frames");
    Vec out;
    out.reserve(kWindow * frame_dim(frames[0].hidden_summary.size()));
    for (const auto& f : frames) append_frame(out, f);
    return out;
}

// o = (entropy, topk_margin, entropy_delta) of the newest frame
inline Vec output_stats(const SignalFrame& f) { return {f.entropy, f.topk_margin, f.entropy_delta}; }

// h_c: [e_c; one-hot tokens_since_trigger; last-frame summary]
inline Vec context_features(const Vec& e_c, std::size_t tokens_since_trigger, const SignalFrame& last) {
    Vec h(e_c.begin(), e_c.end());
    for (std::size_t i = 0; i < kSinceTriggerSlots; ++i)
        h.push_back(i == std::min(tokens_since_trigger, kSinceTriggerSlots - 1) ? 1.0 : 0.0);
    append_frame(h, last);
    return h;
}

inline Vec context_features(const Trace& tr, std::size_t t, std::size_t tokens_since_trigger) {
    return context_features(tr.context_embeddings.at(t), tokens_since_trigger, tr.frames.at(t));
}

inline std::size_t context_feature_dim(std::size_t d_emb, std::size_t d_h) {
    return d_emb + kSinceTriggerSlots + frame_dim(d_h);
}

}  // namespace pfrag
