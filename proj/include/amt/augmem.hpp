#pragma once

#include "amt/attention.hpp"
#include "amt/graph.hpp"
#include "amt/ops.hpp"
#include "amt/types.hpp"

#include <optional>
#include <vector>

namespace amt {

// Segment bookkeeping. Centers partition [0, T); segment n owns columns
// [n*B, min((n+1)*B, T)). Left/right context columns are real frames copied
// from the utterance, never zero padding, so the first left block and the
// last right block may be shorter than requested (or empty).

template <typename S>
struct ContextualSegment {
    Mat<S> left;    // D x L_n
    Mat<S> center;  // D x B_n
    Mat<S> right;   // D x R_n
    Index segment_index = 0;
    Index start = 0;  // first center column in the utterance
    Index end = 0;    // one past the last center column
};

template <typename S>
ContextualSegment<S> make_segment(const Mat<S>& x, Index n, Index seg_b, Index ctx_l,
                                  Index ctx_r) {
    const Index t = x.cols();
    const Index start = n * seg_b;
    const Index end = std::min(start + seg_b, t);
    const Index lbeg = std::max<Index>(0, start - ctx_l);
    const Index rend = std::min(end + ctx_r, t);
    ContextualSegment<S> seg;
    seg.left = x.middleCols(lbeg, start - lbeg);
    seg.center = x.middleCols(start, end - start);
    seg.right = x.middleCols(end, rend - end);
    seg.segment_index = n;
    seg.start = start;
    seg.end = end;
    return seg;
}

template <typename S>
std::vector<ContextualSegment<S>> segment_utterance(const Mat<S>& x, Index seg_b, Index ctx_l,
                                                    Index ctx_r) {
    if (x.cols() == 0) throw EmptyInputError("segment_utterance: empty utterance");
    if (seg_b <= 0) throw ParameterError("segment length must be positive");
    if (ctx_l < 0 || ctx_r < 0) throw ParameterError("context lengths must be non-negative");
    const Index count = (x.cols() + seg_b - 1) / seg_b;
    std::vector<ContextualSegment<S>> out;
    out.reserve(static_cast<size_t>(count));
    for (Index n = 0; n < count; ++n) out.push_back(make_segment(x, n, seg_b, ctx_l, ctx_r));
    return out;
}

// FIFO bank of summary vectors. capacity == nullopt means unbounded;
// capacity == 0 keeps nothing but still counts writes.
template <typename S>
struct MemoryBank {
    std::vector<Vec<S>> slots;
    std::optional<Index> capacity;
    Index total_written = 0;

    Index size() const { return static_cast<Index>(slots.size()); }

    Mat<S> as_matrix(Index dim) const {
        Mat<S> m(dim, size());
        for (Index i = 0; i < size(); ++i) m.col(i) = slots[static_cast<size_t>(i)];
        return m;
    }
};

template <typename S>
void memory_append(MemoryBank<S>& bank, const Vec<S>& slot) {
    if (bank.capacity && *bank.capacity < 0) throw ParameterError("negative memory capacity");
    if (!bank.slots.empty() && bank.slots.front().size() != slot.size()) {
        throw ShapeError("memory slot dim " + std::to_string(slot.size()) +
                         " differs from bank dim " + std::to_string(bank.slots.front().size()));
    }
    bank.total_written += 1;
    if (bank.capacity && *bank.capacity == 0) return;
    bank.slots.push_back(slot);
    if (bank.capacity) {
        while (static_cast<Index>(bank.slots.size()) > *bank.capacity) {
            bank.slots.erase(bank.slots.begin());
        }
    }
}

template <typename S>
Vec<S> summarization_query(const Mat<S>& center) {
    return mean_pool_columns<S>(center).col(0);
}

template <typename S>
struct AugmemStepOut {
    GVar z;     // d_model x (L_n + B_n + R_n), context rows still attached
    GVar slot;  // d_model x 1 summary written to the next bank
    Index left_len = 0, center_len = 0, right_len = 0;
    std::vector<Mat<S>> head_weights;
};

// One layer's attention pass over one segment. Queries cover
// [left, center, right, s] where s mean-pools the center; keys and values
// cover [memory..., left, center, right]. The s-row of the output becomes
// the new memory slot and is not part of the layer output.
template <typename S>
AugmemStepOut<S> augmem_step_g(Graph<S>& g, GVar left, GVar center, GVar right,
                               const std::vector<GVar>& memory, const AttentionVars<S>& p,
                               const Dropout<S>& drop, bool want_weights = false) {
    if (g.value(center).cols() == 0) throw EmptyInputError("augmem step: empty center");
    AugmemStepOut<S> out;
    out.left_len = g.value(left).cols();
    out.center_len = g.value(center).cols();
    out.right_len = g.value(right).cols();

    GVar s = g_mean_pool_cols(g, center);
    GVar q_in = g_concat_cols(g, {left, center, right, s});
    std::vector<GVar> kv_parts = memory;
    kv_parts.push_back(left);
    kv_parts.push_back(center);
    kv_parts.push_back(right);
    GVar kv_in = g_concat_cols(g, kv_parts);

    GVar y = multi_head_attention_g(g, q_in, kv_in, p, nullptr, drop,
                                    want_weights ? &out.head_weights : nullptr);
    const Index win = out.left_len + out.center_len + out.right_len;
    out.z = g_slice_cols(g, y, 0, win);
    out.slot = g_slice_cols(g, y, win, 1);
    return out;
}

// Recurrence-cache attention over one segment window: queries come from the
// window, keys/values from [cache, window]. The cache is already detached by
// the caller; gradients never cross segment boundaries here.
template <typename S>
GVar txl_step_g(Graph<S>& g, GVar window, GVar cache, const AttentionVars<S>& p,
                const Dropout<S>& drop, std::vector<Mat<S>>* head_weights = nullptr) {
    if (g.value(window).cols() == 0) throw EmptyInputError("recurrence step: empty window");
    GVar kv_in = g.value(cache).cols() == 0
                     ? window
                     : g_concat_cols(g, std::vector<GVar>{cache, window});
    return multi_head_attention_g(g, window, kv_in, p, nullptr, drop, head_weights);
}

// Pure wrappers for inspection and tests.

template <typename S>
struct AugmemAttentionResult {
    Mat<S> z;
    Vec<S> slot;
    std::vector<Mat<S>> head_weights;
};

template <typename S>
AugmemAttentionResult<S> augmem_attention_step(const ContextualSegment<S>& seg,
                                               const Mat<S>& memory,
                                               const AttentionParams<S>& p,
                                               bool want_weights = false) {
    Graph<S> g(false);
    AttentionVars<S> vars = attention_leaves(g, p, false);
    std::vector<GVar> mem;
    if (memory.cols() > 0) mem.push_back(g.constant(memory));
    AugmemStepOut<S> step =
        augmem_step_g(g, g.constant(seg.left), g.constant(seg.center), g.constant(seg.right),
                      mem, vars, Dropout<S>{}, want_weights);
    AugmemAttentionResult<S> out;
    out.z = g.value(step.z);
    out.slot = g.value(step.slot).col(0);
    out.head_weights = std::move(step.head_weights);
    return out;
}

template <typename S>
AttentionOutput<S> txl_attention_step(const Mat<S>& window, const Mat<S>& cache,
                                      const AttentionParams<S>& p, bool want_weights = false) {
    Graph<S> g(false);
    AttentionVars<S> vars = attention_leaves(g, p, false);
    AttentionOutput<S> out;
    GVar z = txl_step_g(g, g.constant(window), g.constant(cache), vars, Dropout<S>{},
                        want_weights ? &out.head_weights : nullptr);
    out.z = g.value(z);
    return out;
}

}  // namespace amt
