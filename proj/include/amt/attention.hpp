#pragma once

#include "amt/graph.hpp"
#include "amt/ops.hpp"
#include "amt/types.hpp"

#include <cmath>
#include <optional>
#include <vector>

namespace amt {

// Multi-head attention over column-major sequences: a D x T block holds T
// frames of dimension D. Heads are contiguous row blocks of the projected
// queries/keys/values.

template <typename S>
struct AttentionParams {
    Mat<S> w_q;    // d_model x d_in
    Mat<S> w_k;    // d_model x d_in
    Mat<S> w_v;    // d_model x d_in
    Mat<S> w_out;  // d_model x d_model
    Index num_heads = 1;

    Index d_model() const { return w_q.rows(); }
    Index head_dim() const { return w_q.rows() / num_heads; }

    void validate() const {
        if (num_heads <= 0) throw ParameterError("num_heads must be positive");
        if (w_q.rows() != w_k.rows() || w_q.rows() != w_v.rows()) {
            throw ShapeError("projection output dims disagree: q " + shape_str(w_q) + " k " +
                             shape_str(w_k) + " v " + shape_str(w_v));
        }
        if (w_q.cols() != w_k.cols() || w_q.cols() != w_v.cols()) {
            throw ShapeError("projection input dims disagree");
        }
        if (w_out.rows() != w_q.rows() || w_out.cols() != w_q.rows()) {
            throw ShapeError("w_out must be d_model x d_model, got " + shape_str(w_out));
        }
        if (w_q.rows() % num_heads != 0) {
            throw ConfigError("d_model " + std::to_string(w_q.rows()) +
                              " not divisible by num_heads " + std::to_string(num_heads));
        }
    }
};

template <typename S>
struct AttentionVars {
    GVar w_q, w_k, w_v, w_out;
    Index num_heads = 1;
};

template <typename S>
AttentionVars<S> attention_leaves(Graph<S>& g, const AttentionParams<S>& p, bool requires_grad) {
    p.validate();
    return AttentionVars<S>{g.leaf(p.w_q, requires_grad), g.leaf(p.w_k, requires_grad),
                            g.leaf(p.w_v, requires_grad), g.leaf(p.w_out, requires_grad),
                            p.num_heads};
}

// Key-index mask for banded self-attention: query t may see key tau iff
// t - tau <= left and tau - t <= right. Pass std::nullopt for an unbounded
// side. Entries are true where attention is permitted.
inline BoolMat time_restricted_mask(Index t_len, std::optional<Index> left,
                                    std::optional<Index> right) {
    if (t_len <= 0) throw EmptyInputError("time_restricted_mask: empty sequence");
    if ((left && *left < 0) || (right && *right < 0)) {
        throw ParameterError("time_restricted_mask: negative context");
    }
    BoolMat m(t_len, t_len);
    for (Index t = 0; t < t_len; ++t) {
        for (Index tau = 0; tau < t_len; ++tau) {
            const bool ok_left = !left || (t - tau <= *left);
            const bool ok_right = !right || (tau - t <= *right);
            m(t, tau) = ok_left && ok_right;
        }
    }
    return m;
}

template <typename S>
struct AttentionOutput {
    Mat<S> z;                          // d_model x T_q
    std::vector<Mat<S>> head_weights;  // per head, T_q x T_k, pre-dropout
};

// One head of scaled dot-product attention on already-projected q/k/v
// (head_dim x T). Returns z_head and optionally retains the weight matrix.
template <typename S>
GVar scaled_dot_attention_g(Graph<S>& g, GVar q, GVar k, GVar v, S scale, const BoolMat* allowed,
                            const Dropout<S>& drop, Mat<S>* weights_out) {
    const Index dh = g.value(q).rows();
    if (g.value(k).rows() != dh) {
        throw ShapeError("query/key dims disagree: " + shape_str(g.value(q)) + " vs " +
                         shape_str(g.value(k)));
    }
    if (g.value(k).cols() != g.value(v).cols()) {
        throw ShapeError("key/value lengths disagree: " + shape_str(g.value(k)) + " vs " +
                         shape_str(g.value(v)));
    }
    GVar logits = g_scale(g, g_matmul(g, g_transpose(g, q), k), scale);  // T_q x T_k
    if (allowed) {
        if (allowed->rows() != g.value(logits).rows() || allowed->cols() != g.value(logits).cols()) {
            throw ShapeError("mask shape " + shape_str(*allowed) + " vs logits " +
                             shape_str(g.value(logits)));
        }
        logits = g_add_const(g, logits, mask_penalty<S>(*allowed));
    }
    GVar w = g_softmax_rows(g, logits);
    if (weights_out) *weights_out = g.value(w);
    if (drop.active()) {
        w = g_hadamard_const(g, w, drop.mask(g.value(w).rows(), g.value(w).cols()));
    }
    // z = v * w^T : (dh x T_k) * (T_k x T_q)
    return g_matmul(g, v, g_transpose(g, w));
}

// Full multi-head block: project q_in/kv_in, run each head, concatenate and
// apply the output projection. `allowed` is T_q x T_k or null for dense.
template <typename S>
GVar multi_head_attention_g(Graph<S>& g, GVar q_in, GVar kv_in, const AttentionVars<S>& p,
                            const BoolMat* allowed, const Dropout<S>& drop,
                            std::vector<Mat<S>>* head_weights) {
    const Index d_model = g.value(p.w_q).rows();
    const Index dh = d_model / p.num_heads;
    GVar q = g_matmul(g, p.w_q, q_in);
    GVar k = g_matmul(g, p.w_k, kv_in);
    GVar v = g_matmul(g, p.w_v, kv_in);
    std::vector<GVar> heads;
    heads.reserve(static_cast<size_t>(p.num_heads));
    if (head_weights) head_weights->clear();
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    for (Index h = 0; h < p.num_heads; ++h) {
        GVar qh = g_slice_rows(g, q, h * dh, dh);
        GVar kh = g_slice_rows(g, k, h * dh, dh);
        GVar vh = g_slice_rows(g, v, h * dh, dh);
        Mat<S> w;
        heads.push_back(scaled_dot_attention_g(g, qh, kh, vh, scale, allowed, drop,
                                               head_weights ? &w : nullptr));
        if (head_weights) head_weights->push_back(std::move(w));
    }
    GVar cat = heads.size() == 1 ? heads[0] : g_concat_rows(g, heads);
    return g_matmul(g, p.w_out, cat);
}

// Pure single-head attention on pre-projected inputs.
template <typename S>
AttentionOutput<S> scaled_dot_attention(const Mat<S>& q, const Mat<S>& k, const Mat<S>& v,
                                        S scale, const BoolMat* allowed = nullptr) {
    Graph<S> g(false);
    GVar qv = g.constant(q), kv = g.constant(k), vv = g.constant(v);
    AttentionOutput<S> out;
    out.head_weights.resize(1);
    GVar z = scaled_dot_attention_g<S>(g, qv, kv, vv, scale, allowed, Dropout<S>{},
                                       &out.head_weights[0]);
    out.z = g.value(z);
    return out;
}

// Pure multi-head self-attention over one sequence.
template <typename S>
AttentionOutput<S> multi_head_self_attention(const Mat<S>& x, const AttentionParams<S>& p,
                                             const BoolMat* allowed = nullptr,
                                             bool want_weights = false) {
    Graph<S> g(false);
    AttentionVars<S> vars = attention_leaves(g, p, false);
    GVar xv = g.constant(x);
    AttentionOutput<S> out;
    GVar z = multi_head_attention_g(g, xv, xv, vars, allowed, Dropout<S>{},
                                    want_weights ? &out.head_weights : nullptr);
    out.z = g.value(z);
    return out;
}

}  // namespace amt
