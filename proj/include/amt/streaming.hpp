#pragma once

#include "amt/model.hpp"
#include "amt/rng.hpp"
#include "amt/types.hpp"

#include <algorithm>
#include <optional>
#include <vector>

namespace amt {

// Incremental frame-in/logits-out engine for the segmented variants. The
// state owns the frontend: raw frames go in, model-rate segments are cut
// internally. Segment n runs as soon as its center and full right context
// are buffered, so emitted logits never depend on frames that arrive later,
// and the buffer is trimmed to the frames the next segment can still touch.

template <typename S>
struct StreamState {
    ModelConfig cfg;

    Mat<S> raw_tail;      // raw columns [raw_consumed, raw_seen)
    Index raw_seen = 0;
    Index raw_consumed = 0;

    Mat<S> model_buf;     // model-rate columns [buf_start, model_total)
    Index buf_start = 0;
    Index model_total = 0;

    Index next_segment = 0;
    Index emitted = 0;
    bool finished = false;

    std::vector<StreamLayerState<S>> layers;

    // High-water marks, so tests can assert bounded residency.
    Index max_buffered_model_frames = 0;
    Index max_bank_slots = 0;
};

template <typename S>
StreamState<S> make_stream_state(const ModelConfig& cfg) {
    cfg.validate();
    if (!is_segmented(cfg.variant)) {
        throw ConfigError("streaming requires a segmented variant, got " + to_string(cfg.variant));
    }
    StreamState<S> st;
    st.cfg = cfg;
    st.raw_tail = Mat<S>(cfg.input_dim, 0);
    st.model_buf = Mat<S>(cfg.d_model, 0);
    st.layers = make_stream_states<S>(cfg);
    return st;
}

namespace detail {

template <typename S>
void append_cols(Mat<S>& buf, const Mat<S>& extra) {
    if (extra.cols() == 0) return;
    Mat<S> next(extra.rows(), buf.cols() + extra.cols());
    next.leftCols(buf.cols()) = buf;
    next.rightCols(extra.cols()) = extra;
    buf = std::move(next);
}

// Produces every model frame whose raw window is complete. Each new frame is
// stacked and projected one column at a time; the projection kernel treats
// columns independently, so this matches the offline whole-matrix frontend
// bit for bit.
template <typename S>
void advance_frontend(StreamState<S>& st, const ModelParams<S>& params) {
    const Index w = st.cfg.frontend_window;
    const Index stride = st.cfg.frontend_stride;
    const Index d = st.cfg.input_dim;
    while (st.model_total * stride + w <= st.raw_seen) {
        const Index t = st.model_total;
        Mat<S> stacked(d * w, 1);
        for (Index k = 0; k < w; ++k) {
            const Index raw_col = t * stride + k;
            stacked.block(k * d, 0, d, 1) = st.raw_tail.col(raw_col - st.raw_consumed);
        }
        Mat<S> h = matmul<S>(params.frontend_w, stacked);
        h.col(0) += params.frontend_b;
        append_cols(st.model_buf, h);
        st.model_total += 1;
    }
    // Raw columns before the next frame's window start are dead.
    const Index keep_from = std::min(st.model_total * stride, st.raw_seen);
    if (keep_from > st.raw_consumed) {
        st.raw_tail = Mat<S>(st.raw_tail.rightCols(st.raw_seen - keep_from));
        st.raw_consumed = keep_from;
    }
}

// Runs segment st.next_segment out of the buffer. t_end caps the right
// context (model_total while streaming; also the center for the final flush).
template <typename S>
Mat<S> emit_segment(StreamState<S>& st, const ModelParams<S>& params) {
    const Index b = st.cfg.segment_b;
    const Index n = st.next_segment;
    const Index start = n * b;
    const Index end = std::min(start + b, st.model_total);
    const Index lbeg = std::max<Index>(0, start - st.cfg.context_l);
    const Index rend = std::min(end + st.cfg.context_r, st.model_total);
    const Index off = st.buf_start;
    Mat<S> left = st.model_buf.middleCols(lbeg - off, start - lbeg);
    Mat<S> center = st.model_buf.middleCols(start - off, end - start);
    Mat<S> right = st.model_buf.middleCols(end - off, rend - end);
    Mat<S> hidden = run_segment(st.cfg, params, left, center, right, st.layers);
    st.next_segment += 1;
    st.emitted += hidden.cols();
    // Trim to what the next segment's left context can still reach. After the
    // last partial segment that boundary can pass model_total, so clamp.
    const Index keep_from = std::max<Index>(
        off, std::min<Index>(st.next_segment * b - st.cfg.context_l, st.model_total));
    if (keep_from > st.buf_start) {
        st.model_buf = Mat<S>(st.model_buf.rightCols(st.model_total - keep_from));
        st.buf_start = keep_from;
    }
    return classify(params, hidden);
}

template <typename S>
void note_residency(StreamState<S>& st) {
    st.max_buffered_model_frames = std::max(st.max_buffered_model_frames, st.model_buf.cols());
    for (const auto& l : st.layers) {
        st.max_bank_slots = std::max(st.max_bank_slots, l.bank.size());
    }
}

}  // namespace detail

// Feeds a chunk of raw frames (input_dim x k, any k ≥ 0) and returns the
// logits emitted by every segment that became complete.
template <typename S>
Mat<S> stream_push(StreamState<S>& st, const Mat<S>& frames, const ModelParams<S>& params) {
    if (st.finished) throw LifecycleError("stream_push after finish");
    if (frames.rows() != st.cfg.input_dim) {
        throw ShapeError("chunk dim " + std::to_string(frames.rows()) + " != input_dim " +
                         std::to_string(st.cfg.input_dim));
    }
    detail::append_cols(st.raw_tail, frames);
    st.raw_seen += frames.cols();
    detail::advance_frontend(st, params);

    Mat<S> out(params.classifier_w.rows(), 0);
    const Index b = st.cfg.segment_b;
    while (st.model_total >= (st.next_segment + 1) * b + st.cfg.context_r) {
        detail::append_cols(out, detail::emit_segment(st, params));
        detail::note_residency(st);
    }
    detail::note_residency(st);
    return out;
}

// Flushes the final partial segments; their right context is whatever
// remains (possibly nothing). Total emission across push+finish is exactly
// the model-rate frame count.
template <typename S>
Mat<S> stream_finish(StreamState<S>& st, const ModelParams<S>& params) {
    if (st.finished) throw LifecycleError("stream_finish called twice");
    st.finished = true;
    Mat<S> out(params.classifier_w.rows(), 0);
    while (st.emitted < st.model_total) {
        detail::append_cols(out, detail::emit_segment(st, params));
        detail::note_residency(st);
    }
    return out;
}

// ---- look-ahead / latency ----------------------------------------------------

// Algorithmic latency only. lookahead_frames counts model-rate frames an
// output must wait for; the segment-fill component (center frames buffered
// before a segment can run) is reported separately as buffering_delay_frames.
struct LatencyReport {
    Index lookahead_frames = 0;  // -1 when unbounded
    double lookahead_ms = 0;     // -1 when unbounded
    bool unbounded = false;
    Index buffering_delay_frames = 0;
    bool per_layer_growth = false;
    double model_period_ms = 10;
    Index segment_b = 0;

    // Summary slots an unbounded bank would hold after `duration_ms` of
    // audio: one per started segment.
    Index memory_slots_for(double duration_ms) const {
        if (segment_b <= 0) return 0;
        const Index frames = static_cast<Index>(duration_ms / model_period_ms);
        return (frames + segment_b - 1) / segment_b;
    }
};

inline LatencyReport lookahead(const ModelConfig& cfg) {
    cfg.validate();
    LatencyReport r;
    r.model_period_ms = cfg.model_period_ms();
    switch (cfg.variant) {
        case Variant::aug_mem:
        case Variant::txl:
            r.lookahead_frames = cfg.context_r;
            r.buffering_delay_frames = cfg.segment_b - 1;
            r.segment_b = cfg.segment_b;
            break;
        case Variant::time_restricted:
            if (!cfg.trt_right) {
                r.unbounded = true;
            } else {
                r.lookahead_frames = *cfg.trt_right * cfg.num_layers;
            }
            r.per_layer_growth = true;
            break;
        case Variant::full_context:
            r.unbounded = true;
            break;
    }
    if (r.unbounded) {
        r.lookahead_frames = -1;
        r.lookahead_ms = -1;
    } else {
        r.lookahead_ms = static_cast<double>(r.lookahead_frames) * r.model_period_ms;
    }
    return r;
}

// ---- causality probes ----------------------------------------------------------

template <typename S>
struct CausalityProbe {
    bool changed = false;  // any logit at frames <= t_probe moved by > 1e-9
    S max_abs_diff = 0;    // over those frames; 0 means bit-identical values
    Index compared_frames = 0;
};

// Encodes a random utterance, bumps the raw frames feeding model frame
// t_probe + delta, re-encodes, and compares logits at model frames
// [0, t_probe]. Requires window == stride so one model frame maps to a
// disjoint block of raw frames.
template <typename S>
CausalityProbe<S> causality_probe_detail(const ModelConfig& cfg, const ModelParams<S>& params,
                                         Index t_probe, Index delta, SeededRng& rng) {
    cfg.validate();
    if (cfg.frontend_window != cfg.frontend_stride) {
        throw ParameterError("causality probe requires frontend window == stride");
    }
    if (t_probe < 0 || delta < 0) throw ParameterError("probe index out of range");

    const Index margin = (is_segmented(cfg.variant) ? cfg.segment_b + cfg.context_r : 8) + 4;
    const Index t_model = t_probe + delta + margin;
    const Index stride = cfg.frontend_stride;
    const Index t_raw = t_model * stride;

    Mat<S> base(cfg.input_dim, t_raw);
    for (Index j = 0; j < t_raw; ++j) {
        for (Index i = 0; i < cfg.input_dim; ++i) {
            base(i, j) = static_cast<S>(rng.normal());
        }
    }
    Mat<S> bumped = base;
    for (Index k = 0; k < stride; ++k) {
        const Index col = (t_probe + delta) * stride + k;
        for (Index i = 0; i < cfg.input_dim; ++i) {
            bumped(i, col) += static_cast<S>(1.0 + rng.normal());
        }
    }

    const Mat<S> a = encode_utterance(cfg, params, base).logits;
    const Mat<S> b = encode_utterance(cfg, params, bumped).logits;
    CausalityProbe<S> out;
    out.compared_frames = t_probe + 1;
    out.max_abs_diff = (a.leftCols(t_probe + 1) - b.leftCols(t_probe + 1)).cwiseAbs().maxCoeff();
    out.changed = out.max_abs_diff > S(1e-9);
    return out;
}

template <typename S>
bool causality_probe(const ModelConfig& cfg, const ModelParams<S>& params, Index t_probe,
                     Index delta, SeededRng& rng) {
    return causality_probe_detail(cfg, params, t_probe, delta, rng).changed;
}

}  // namespace amt
