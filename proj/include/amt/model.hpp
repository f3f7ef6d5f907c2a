#pragma once

#include "amt/attention.hpp"
#include "amt/augmem.hpp"
#include "amt/graph.hpp"
#include "amt/matrix_io.hpp"
#include "amt/ops.hpp"
#include "amt/rng.hpp"
#include "amt/types.hpp"

#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace amt {

enum class Variant { aug_mem, txl, time_restricted, full_context };
enum class Pooling { average, max, linear_comb };

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::aug_mem: return "aug_mem";
        case Variant::txl: return "txl";
        case Variant::time_restricted: return "time_restricted";
        case Variant::full_context: return "full_context";
    }
    return "?";
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "aug_mem") return Variant::aug_mem;
    if (s == "txl") return Variant::txl;
    if (s == "time_restricted") return Variant::time_restricted;
    if (s == "full_context") return Variant::full_context;
    throw ConfigError("unknown variant '" + s + "'");
}

inline std::string to_string(Pooling p) {
    switch (p) {
        case Pooling::average: return "average";
        case Pooling::max: return "max";
        case Pooling::linear_comb: return "linear_comb";
    }
    return "?";
}

inline Pooling pooling_from_string(const std::string& s) {
    if (s == "average") return Pooling::average;
    if (s == "max") return Pooling::max;
    if (s == "linear_comb") return Pooling::linear_comb;
    throw ConfigError("unknown pooling '" + s + "'");
}

inline bool is_segmented(Variant v) { return v == Variant::aug_mem || v == Variant::txl; }

struct ModelConfig {
    Index input_dim = 8;
    Index output_classes = 5;
    Index num_layers = 2;
    Index d_model = 16;
    Index num_heads = 2;
    Index ffn_dim = 32;
    double dropout_rate = 0.0;
    Variant variant = Variant::aug_mem;
    Pooling pooling = Pooling::average;

    Index segment_b = 128;
    Index context_l = 64;
    Index context_r = 32;
    std::optional<Index> memory_capacity;  // nullopt: unbounded

    std::optional<Index> trt_left;   // nullopt: unbounded history
    std::optional<Index> trt_right;  // nullopt: unbounded future

    Index frontend_window = 1;
    Index frontend_stride = 1;
    double frame_period_ms = 10.0;  // period of the raw input frames
    double layer_norm_eps = 1e-5;
    bool truncate_memory_bptt = false;

    double model_period_ms() const { return frame_period_ms * static_cast<double>(frontend_stride); }

    void validate() const {
        if (input_dim <= 0) throw ConfigError("input_dim must be positive");
        if (output_classes <= 0) throw ConfigError("output_classes must be positive");
        if (num_layers <= 0) throw ConfigError("num_layers must be positive");
        if (d_model <= 0) throw ConfigError("d_model must be positive");
        if (num_heads <= 0) throw ConfigError("num_heads must be positive");
        if (ffn_dim <= 0) throw ConfigError("ffn_dim must be positive");
        if (d_model % num_heads != 0) {
            throw ConfigError("d_model " + std::to_string(d_model) +
                              " not divisible by num_heads " + std::to_string(num_heads));
        }
        if (dropout_rate < 0 || dropout_rate >= 1) {
            throw ConfigError("dropout_rate must be in [0,1)");
        }
        if (frontend_window <= 0 || frontend_stride <= 0) {
            throw ConfigError("frontend window/stride must be positive");
        }
        if (frontend_window < frontend_stride) {
            throw ConfigError("frontend window must be >= stride (no frames may be skipped)");
        }
        if (frame_period_ms <= 0) throw ConfigError("frame_period_ms must be positive");
        if (pooling != Pooling::average) {
            throw ConfigError("pooling '" + to_string(pooling) +
                              "' is declared but not implemented; use 'average'");
        }
        if (truncate_memory_bptt) {
            throw ConfigError("truncate_memory_bptt=true is declared but not implemented");
        }
        if (is_segmented(variant)) {
            if (segment_b <= 0) throw ConfigError("segment_b must be positive");
            if (context_l < 0 || context_r < 0) throw ConfigError("contexts must be non-negative");
        }
        if (variant == Variant::txl && context_l != 0) {
            throw ConfigError("the recurrence variant carries history in its cache; context_l must be 0");
        }
        if (memory_capacity && *memory_capacity < 0) {
            throw ConfigError("memory_capacity must be non-negative");
        }
        if ((trt_left && *trt_left < 0) || (trt_right && *trt_right < 0)) {
            throw ConfigError("time-restricted contexts must be non-negative");
        }
    }
};

template <typename S>
struct LayerParams {
    AttentionParams<S> attn;
    Vec<S> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    Mat<S> ffn_w1;  // ffn_dim x d_model
    Vec<S> ffn_b1;
    Mat<S> ffn_w2;  // d_model x ffn_dim
    Vec<S> ffn_b2;
};

template <typename S>
struct ModelParams {
    Mat<S> frontend_w;  // d_model x (input_dim * frontend_window)
    Vec<S> frontend_b;
    std::vector<LayerParams<S>> layers;
    Mat<S> classifier_w;  // output_classes x d_model
    Vec<S> classifier_b;
};

namespace detail {
// Xavier-uniform fill, column-major so the draw sequence is part of the
// reproducibility contract.
template <typename S>
Mat<S> xavier(Index rows, Index cols, SeededRng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Mat<S> m(rows, cols);
    for (Index j = 0; j < cols; ++j) {
        for (Index i = 0; i < rows; ++i) {
            m(i, j) = static_cast<S>(rng.uniform(-a, a));
        }
    }
    return m;
}
}  // namespace detail

// Weights are drawn in a fixed order (frontend, then per layer q/k/v/out and
// the two feed-forward mats, then the classifier); biases start at zero and
// norm gains at one, so two builds from the same seed agree bit for bit.
template <typename S>
ModelParams<S> init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    SeededRng rng(seed);
    ModelParams<S> p;
    const Index stacked = cfg.input_dim * cfg.frontend_window;
    p.frontend_w = detail::xavier<S>(cfg.d_model, stacked, rng);
    p.frontend_b = Vec<S>::Zero(cfg.d_model);
    p.layers.resize(static_cast<size_t>(cfg.num_layers));
    for (auto& l : p.layers) {
        l.attn.w_q = detail::xavier<S>(cfg.d_model, cfg.d_model, rng);
        l.attn.w_k = detail::xavier<S>(cfg.d_model, cfg.d_model, rng);
        l.attn.w_v = detail::xavier<S>(cfg.d_model, cfg.d_model, rng);
        l.attn.w_out = detail::xavier<S>(cfg.d_model, cfg.d_model, rng);
        l.attn.num_heads = cfg.num_heads;
        l.ln1_gain = Vec<S>::Ones(cfg.d_model);
        l.ln1_bias = Vec<S>::Zero(cfg.d_model);
        l.ln2_gain = Vec<S>::Ones(cfg.d_model);
        l.ln2_bias = Vec<S>::Zero(cfg.d_model);
        l.ffn_w1 = detail::xavier<S>(cfg.ffn_dim, cfg.d_model, rng);
        l.ffn_b1 = Vec<S>::Zero(cfg.ffn_dim);
        l.ffn_w2 = detail::xavier<S>(cfg.d_model, cfg.ffn_dim, rng);
        l.ffn_b2 = Vec<S>::Zero(cfg.d_model);
    }
    p.classifier_w = detail::xavier<S>(cfg.output_classes, cfg.d_model, rng);
    p.classifier_b = Vec<S>::Zero(cfg.output_classes);
    return p;
}

// ---- frontend ----------------------------------------------------------------

// Frame stacking: output column t is the concatenation of input columns
// [t*stride, t*stride + window). T_out = floor((T - window) / stride) + 1.
template <typename S>
Mat<S> frame_stack(const Mat<S>& x, Index window, Index stride) {
    if (window <= 0 || stride <= 0) throw ParameterError("window/stride must be positive");
    if (x.cols() < window) {
        throw EmptyInputError("frame stacking: " + std::to_string(x.cols()) +
                              " frames < window " + std::to_string(window));
    }
    const Index d = x.rows();
    const Index t_out = (x.cols() - window) / stride + 1;
    Mat<S> out(d * window, t_out);
    for (Index t = 0; t < t_out; ++t) {
        for (Index w = 0; w < window; ++w) {
            out.block(w * d, t, d, 1) = x.col(t * stride + w);
        }
    }
    return out;
}

template <typename S>
GVar g_frame_stack(Graph<S>& g, GVar x, Index window, Index stride) {
    if (window == 1 && stride == 1) return x;
    Mat<S> out = frame_stack<S>(g.value(x), window, stride);
    const bool rg = g.requires_grad(x);
    typename Graph<S>::BackFn back;
    if (rg) {
        const Index d = g.value(x).rows();
        back = [x, window, stride, d](Graph<S>& gr, Index self) {
            const Mat<S>& go = gr.grad_ref(self);
            Mat<S> gx = Mat<S>::Zero(d, gr.value(x).cols());
            for (Index t = 0; t < go.cols(); ++t) {
                for (Index w = 0; w < window; ++w) {
                    gx.col(t * stride + w) += go.block(w * d, t, d, 1);
                }
            }
            gr.accumulate(x.id, gx);
        };
    }
    return g.push(std::move(out), rg, std::move(back));
}

// ---- parameter leaves ----------------------------------------------------------

template <typename S>
struct LayerVars {
    AttentionVars<S> attn;
    GVar ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    GVar ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

template <typename S>
struct ModelVars {
    GVar frontend_w, frontend_b;
    std::vector<LayerVars<S>> layers;
    GVar classifier_w, classifier_b;
};

template <typename S>
LayerVars<S> layer_leaves(Graph<S>& g, const LayerParams<S>& l, bool requires_grad);

template <typename S>
ModelVars<S> model_leaves(Graph<S>& g, const ModelParams<S>& p, bool requires_grad) {
    ModelVars<S> v;
    v.frontend_w = g.leaf(p.frontend_w, requires_grad);
    v.frontend_b = g.leaf(p.frontend_b, requires_grad);
    for (const auto& l : p.layers) v.layers.push_back(layer_leaves(g, l, requires_grad));
    v.classifier_w = g.leaf(p.classifier_w, requires_grad);
    v.classifier_b = g.leaf(p.classifier_b, requires_grad);
    return v;
}

// ---- layer steps ----------------------------------------------------------------

namespace detail {

template <typename S>
GVar ffn_block_g(Graph<S>& g, const LayerVars<S>& lv, GVar y, const Dropout<S>& drop, S eps) {
    GVar n2 = g_layer_norm_cols(g, y, lv.ln2_gain, lv.ln2_bias, eps);
    GVar h1 = g_relu(g, g_add_col(g, g_matmul(g, lv.ffn_w1, n2), lv.ffn_b1));
    GVar h2 = g_add_col(g, g_matmul(g, lv.ffn_w2, h1), lv.ffn_b2);
    if (drop.active()) {
        h2 = g_hadamard_const(g, h2, drop.mask(g.value(h2).rows(), g.value(h2).cols()));
    }
    return g_add(g, y, h2);
}

}  // namespace detail

template <typename S>
LayerVars<S> layer_leaves(Graph<S>& g, const LayerParams<S>& l, bool requires_grad) {
    LayerVars<S> lv;
    lv.attn = attention_leaves(g, l.attn, requires_grad);
    lv.ln1_gain = g.leaf(l.ln1_gain, requires_grad);
    lv.ln1_bias = g.leaf(l.ln1_bias, requires_grad);
    lv.ln2_gain = g.leaf(l.ln2_gain, requires_grad);
    lv.ln2_bias = g.leaf(l.ln2_bias, requires_grad);
    lv.ffn_w1 = g.leaf(l.ffn_w1, requires_grad);
    lv.ffn_b1 = g.leaf(l.ffn_b1, requires_grad);
    lv.ffn_w2 = g.leaf(l.ffn_w2, requires_grad);
    lv.ffn_b2 = g.leaf(l.ffn_b2, requires_grad);
    return lv;
}

// Whole-sequence layer (time-restricted or full-context attention).
template <typename S>
GVar global_layer_g(Graph<S>& g, const LayerVars<S>& lv, GVar x, const BoolMat* mask,
                    const Dropout<S>& drop, S eps) {
    GVar n1 = g_layer_norm_cols(g, x, lv.ln1_gain, lv.ln1_bias, eps);
    GVar z = multi_head_attention_g<S>(g, n1, n1, lv.attn, mask, drop, nullptr);
    if (drop.active()) {
        z = g_hadamard_const(g, z, drop.mask(g.value(z).rows(), g.value(z).cols()));
    }
    GVar y = g_add(g, x, z);
    return detail::ffn_block_g(g, lv, y, drop, eps);
}

// Pure one-layer step over a whole sequence (the time-restricted and
// full-context wiring), for tests and composition oracles.
template <typename S>
Mat<S> global_layer_forward(const LayerParams<S>& lp, const Mat<S>& x,
                            const BoolMat* mask = nullptr, S eps = S(1e-5)) {
    Graph<S> g(false);
    LayerVars<S> lv = layer_leaves(g, lp, false);
    return g.value(global_layer_g(g, lv, g.constant(x), mask, Dropout<S>{}, eps));
}

// Per-layer, per-segment inputs and outputs for the segmented variants.
// memory_in lists the summary slots visible to this segment (produced by
// earlier segments at the same layer). cache_in is the recurrence variant's
// detached state from the previous segment; cache_out must be stored by the
// caller for the next one.
template <typename S>
struct SegmentLayerIO {
    std::vector<GVar> memory_in;
    GVar cache_in;
    bool has_cache = false;
    GVar slot_out;
    GVar cache_out;
};

// One segment through one layer. left/center/right carry this layer's input
// at the segment's context/center positions; the returned triple carries its
// output at the same positions (context columns are recomputed per segment,
// only centers are ever emitted).
template <typename S>
struct SegmentLayerResult {
    GVar left, center, right;
};

template <typename S>
SegmentLayerResult<S> segment_layer_g(Graph<S>& g, const ModelConfig& cfg,
                                      const LayerVars<S>& lv, GVar left, GVar center,
                                      GVar right, SegmentLayerIO<S>& io, const Dropout<S>& drop) {
    const S eps = static_cast<S>(cfg.layer_norm_eps);
    const Index ll = g.value(left).cols();
    const Index cl = g.value(center).cols();
    const Index rl = g.value(right).cols();
    GVar x = g_concat_cols(g, std::vector<GVar>{left, center, right});
    GVar z;

    if (cfg.variant == Variant::aug_mem) {
        GVar n1 = g_layer_norm_cols(g, x, lv.ln1_gain, lv.ln1_bias, eps);
        GVar nl = g_slice_cols(g, n1, 0, ll);
        GVar nc = g_slice_cols(g, n1, ll, cl);
        GVar nr = g_slice_cols(g, n1, ll + cl, rl);
        AugmemStepOut<S> step = augmem_step_g(g, nl, nc, nr, io.memory_in, lv.attn, drop);
        io.slot_out = step.slot;
        z = step.z;
    } else {  // Variant::txl
        // Next segment's cache is this segment's raw center input, detached.
        io.cache_out = g_detach(g, center);
        GVar n1 = g_layer_norm_cols(g, x, lv.ln1_gain, lv.ln1_bias, eps);
        GVar ncache;
        if (io.has_cache && g.value(io.cache_in).cols() > 0) {
            // Norm is per column, so normalizing the cache separately matches
            // normalizing a concatenated window.
            ncache = g_layer_norm_cols(g, io.cache_in, lv.ln1_gain, lv.ln1_bias, eps);
        } else {
            ncache = g.constant(Mat<S>(g.value(x).rows(), 0));
        }
        z = txl_step_g(g, n1, ncache, lv.attn, drop);
    }

    if (drop.active()) {
        z = g_hadamard_const(g, z, drop.mask(g.value(z).rows(), g.value(z).cols()));
    }
    GVar y = g_add(g, x, z);
    GVar out = detail::ffn_block_g(g, lv, y, drop, static_cast<S>(cfg.layer_norm_eps));
    SegmentLayerResult<S> res;
    res.left = g_slice_cols(g, out, 0, ll);
    res.center = g_slice_cols(g, out, ll, cl);
    res.right = g_slice_cols(g, out, ll + cl, rl);
    return res;
}

// One segment through the whole stack. io has one entry per layer; the caller
// owns slot/cache bookkeeping across segments. Returns the final layer's
// center columns.
template <typename S>
GVar segment_stack_g(Graph<S>& g, const ModelConfig& cfg, const ModelVars<S>& mv, GVar left,
                     GVar center, GVar right, std::vector<SegmentLayerIO<S>>& io,
                     const Dropout<S>& drop) {
    if (io.size() != mv.layers.size()) throw LifecycleError("segment state/layer count mismatch");
    GVar l = left, c = center, r = right;
    for (size_t i = 0; i < mv.layers.size(); ++i) {
        SegmentLayerResult<S> res = segment_layer_g(g, cfg, mv.layers[i], l, c, r, io[i], drop);
        l = res.left;
        c = res.center;
        r = res.right;
    }
    return c;
}

namespace detail {
template <typename T>
void fifo_push(std::vector<T>& v, T item, const std::optional<Index>& cap) {
    if (cap && *cap == 0) return;
    v.push_back(std::move(item));
    if (cap) {
        while (static_cast<Index>(v.size()) > *cap) v.erase(v.begin());
    }
}

inline BoolMat trt_mask(const ModelConfig& cfg, Index t_len) {
    return time_restricted_mask(t_len, cfg.trt_left, cfg.trt_right);
}
}  // namespace detail

// ---- full forward ----------------------------------------------------------------

template <typename S>
struct EncodeVars {
    GVar hidden;  // d_model x T_model
    GVar logits;  // output_classes x T_model
};

// Builds the entire forward pass in one graph. Segmented variants walk the
// segments in stream order inside the graph, so training gradients flow
// through memory slots (and stop at detached recurrence caches).
template <typename S>
EncodeVars<S> encode_from_var(Graph<S>& g, const ModelConfig& cfg, const ModelVars<S>& mv,
                              GVar xin, const Dropout<S>& drop) {
    cfg.validate();
    const Mat<S>& x_raw = g.value(xin);
    if (x_raw.rows() != cfg.input_dim) {
        throw ShapeError("input dim " + std::to_string(x_raw.rows()) + " != configured " +
                         std::to_string(cfg.input_dim));
    }
    if (x_raw.cols() == 0) throw EmptyInputError("encode: empty utterance");

    GVar stacked = g_frame_stack(g, xin, cfg.frontend_window, cfg.frontend_stride);
    GVar h = g_add_col(g, g_matmul(g, mv.frontend_w, stacked), mv.frontend_b);
    const Index t_model = g.value(h).cols();

    GVar hidden;
    if (is_segmented(cfg.variant)) {
        const Index b = cfg.segment_b;
        const Index nseg = (t_model + b - 1) / b;
        std::vector<std::vector<GVar>> banks(mv.layers.size());
        std::vector<GVar> caches(mv.layers.size());
        std::vector<bool> has_cache(mv.layers.size(), false);
        std::vector<GVar> centers;
        centers.reserve(static_cast<size_t>(nseg));
        for (Index n = 0; n < nseg; ++n) {
            const Index start = n * b;
            const Index end = std::min(start + b, t_model);
            const Index lbeg = std::max<Index>(0, start - cfg.context_l);
            const Index rend = std::min(end + cfg.context_r, t_model);
            GVar left = g_slice_cols(g, h, lbeg, start - lbeg);
            GVar center = g_slice_cols(g, h, start, end - start);
            GVar right = g_slice_cols(g, h, end, rend - end);
            std::vector<SegmentLayerIO<S>> io(mv.layers.size());
            for (size_t i = 0; i < io.size(); ++i) {
                io[i].memory_in = banks[i];
                io[i].cache_in = caches[i];
                io[i].has_cache = has_cache[i];
            }
            GVar out_c = segment_stack_g(g, cfg, mv, left, center, right, io, drop);
            for (size_t i = 0; i < io.size(); ++i) {
                if (cfg.variant == Variant::aug_mem) {
                    detail::fifo_push(banks[i], io[i].slot_out, cfg.memory_capacity);
                } else {
                    caches[i] = io[i].cache_out;
                    has_cache[i] = true;
                }
            }
            centers.push_back(out_c);
        }
        hidden = centers.size() == 1 ? centers[0] : g_concat_cols(g, centers);
    } else {
        BoolMat mask;
        const BoolMat* mask_ptr = nullptr;
        if (cfg.variant == Variant::time_restricted) {
            mask = detail::trt_mask(cfg, t_model);
            mask_ptr = &mask;
        }
        GVar x = h;
        for (const auto& lv : mv.layers) {
            x = global_layer_g(g, lv, x, mask_ptr, drop, static_cast<S>(cfg.layer_norm_eps));
        }
        hidden = x;
    }

    EncodeVars<S> out;
    out.hidden = hidden;
    out.logits = g_add_col(g, g_matmul(g, mv.classifier_w, hidden), mv.classifier_b);
    return out;
}

template <typename S>
EncodeVars<S> encode_g(Graph<S>& g, const ModelConfig& cfg, const ModelVars<S>& mv,
                       const Mat<S>& x_raw, const Dropout<S>& drop) {
    return encode_from_var(g, cfg, mv, g.constant(x_raw), drop);
}

template <typename S>
struct EncodeResult {
    Mat<S> hidden;
    Mat<S> logits;
};

// Inference forward pass. Segmented variants run one throwaway graph per
// segment with plain-value state, which is exactly what the streaming engine
// does; the single-graph training path computes the same values because every
// kernel is a deterministic function of node values.
template <typename S>
EncodeResult<S> encode_utterance(const ModelConfig& cfg, const ModelParams<S>& params,
                                 const Mat<S>& x_raw) {
    cfg.validate();
    Graph<S> g(false);
    ModelVars<S> mv = model_leaves(g, params, false);
    EncodeVars<S> ev = encode_g(g, cfg, mv, x_raw, Dropout<S>{});
    return EncodeResult<S>{g.value(ev.hidden), g.value(ev.logits)};
}

// ---- single-segment inference step (shared with the streaming engine) -------------

template <typename S>
struct StreamLayerState {
    MemoryBank<S> bank;
    Mat<S> cache;
};

template <typename S>
std::vector<StreamLayerState<S>> make_stream_states(const ModelConfig& cfg) {
    std::vector<StreamLayerState<S>> states(static_cast<size_t>(cfg.num_layers));
    for (auto& s : states) {
        s.bank.capacity = cfg.memory_capacity;
        s.cache = Mat<S>(cfg.d_model, 0);
    }
    return states;
}

// Runs one contextual segment (already at model rate, already projected)
// through the stack and advances the per-layer state. Returns the center
// outputs for emission.
template <typename S>
Mat<S> run_segment(const ModelConfig& cfg, const ModelParams<S>& params, const Mat<S>& left,
                   const Mat<S>& center, const Mat<S>& right,
                   std::vector<StreamLayerState<S>>& states) {
    Graph<S> g(false);
    ModelVars<S> mv = model_leaves(g, params, false);
    std::vector<SegmentLayerIO<S>> io(states.size());
    for (size_t i = 0; i < states.size(); ++i) {
        for (const auto& slot : states[i].bank.slots) {
            io[i].memory_in.push_back(g.constant(Mat<S>(slot)));
        }
        io[i].cache_in = g.constant(states[i].cache);
        io[i].has_cache = states[i].cache.cols() > 0;
    }
    GVar out_c = segment_stack_g(g, cfg, mv, g.constant(left), g.constant(center),
                                 g.constant(right), io, Dropout<S>{});
    for (size_t i = 0; i < states.size(); ++i) {
        if (cfg.variant == Variant::aug_mem) {
            memory_append(states[i].bank, Vec<S>(g.value(io[i].slot_out).col(0)));
        } else {
            states[i].cache = g.value(io[i].cache_out);
        }
    }
    return g.value(out_c);
}

// Classifier head on already-encoded frames.
template <typename S>
Mat<S> classify(const ModelParams<S>& params, const Mat<S>& hidden) {
    Mat<S> logits = matmul<S>(params.classifier_w, hidden);
    logits.colwise() += params.classifier_b;
    return logits;
}

// ---- checkpoints ----------------------------------------------------------------

namespace detail {
template <typename S>
void put_section(std::ostream& os, const std::string& tag, const Mat<S>& m) {
    os << "[" << tag << "]\n";
    write_matrix(os, m);
}

template <typename S>
Mat<S> take_section(std::istream& is, const std::string& tag) {
    std::string line;
    if (!std::getline(is, line)) throw IoError("checkpoint truncated before [" + tag + "]");
    if (line != "[" + tag + "]") {
        throw IoError("checkpoint: expected [" + tag + "], found '" + line + "'");
    }
    return read_matrix<S>(is);
}
}  // namespace detail

inline std::string model_config_to_header(const ModelConfig& c) {
    std::ostringstream os;
    os.precision(17);
    auto opt = [](const std::optional<Index>& v) {
        return v ? std::to_string(*v) : std::string("unbounded");
    };
    os << "variant=" << to_string(c.variant) << "\n";
    os << "pooling=" << to_string(c.pooling) << "\n";
    os << "input_dim=" << c.input_dim << "\n";
    os << "output_classes=" << c.output_classes << "\n";
    os << "num_layers=" << c.num_layers << "\n";
    os << "d_model=" << c.d_model << "\n";
    os << "num_heads=" << c.num_heads << "\n";
    os << "ffn_dim=" << c.ffn_dim << "\n";
    os << "dropout_rate=" << c.dropout_rate << "\n";
    os << "segment_B=" << c.segment_b << "\n";
    os << "context_L=" << c.context_l << "\n";
    os << "context_R=" << c.context_r << "\n";
    os << "memory_capacity=" << opt(c.memory_capacity) << "\n";
    os << "trt_left=" << opt(c.trt_left) << "\n";
    os << "trt_right=" << opt(c.trt_right) << "\n";
    os << "frontend_window=" << c.frontend_window << "\n";
    os << "frontend_stride=" << c.frontend_stride << "\n";
    os << "frame_period_ms=" << c.frame_period_ms << "\n";
    return os.str();
}

inline void model_config_set(ModelConfig& c, const std::string& key, const std::string& value) {
    auto num = [&]() -> Index { return static_cast<Index>(std::stoll(value)); };
    auto opt = [&]() -> std::optional<Index> {
        if (value == "unbounded") return std::nullopt;
        return static_cast<Index>(std::stoll(value));
    };
    if (key == "variant") c.variant = variant_from_string(value);
    else if (key == "pooling") c.pooling = pooling_from_string(value);
    else if (key == "input_dim") c.input_dim = num();
    else if (key == "output_classes") c.output_classes = num();
    else if (key == "num_layers") c.num_layers = num();
    else if (key == "d_model") c.d_model = num();
    else if (key == "num_heads") c.num_heads = num();
    else if (key == "ffn_dim") c.ffn_dim = num();
    else if (key == "dropout_rate") c.dropout_rate = std::stod(value);
    else if (key == "segment_B") c.segment_b = num();
    else if (key == "context_L") c.context_l = num();
    else if (key == "context_R") c.context_r = num();
    else if (key == "memory_capacity") c.memory_capacity = opt();
    else if (key == "trt_left") c.trt_left = opt();
    else if (key == "trt_right") c.trt_right = opt();
    else if (key == "frontend_window") c.frontend_window = num();
    else if (key == "frontend_stride") c.frontend_stride = num();
    else if (key == "frame_period_ms") c.frame_period_ms = std::stod(value);
    else throw IoError("checkpoint header: unknown key '" + key + "'");
}

template <typename S>
struct Checkpoint {
    ModelConfig config;
    ModelParams<S> params;
};

template <typename S>
std::string checkpoint_to_string(const ModelConfig& cfg, const ModelParams<S>& p) {
    std::ostringstream os;
    os << "amt-checkpoint v1\n";
    os << model_config_to_header(cfg);
    os << "end-header\n";
    detail::put_section<S>(os, "frontend_w", p.frontend_w);
    detail::put_section<S>(os, "frontend_b", p.frontend_b);
    for (size_t i = 0; i < p.layers.size(); ++i) {
        const auto& l = p.layers[i];
        const std::string at = " layer=" + std::to_string(i);
        detail::put_section<S>(os, "w_q" + at, l.attn.w_q);
        detail::put_section<S>(os, "w_k" + at, l.attn.w_k);
        detail::put_section<S>(os, "w_v" + at, l.attn.w_v);
        detail::put_section<S>(os, "w_out" + at, l.attn.w_out);
        detail::put_section<S>(os, "ln1_gain" + at, l.ln1_gain);
        detail::put_section<S>(os, "ln1_bias" + at, l.ln1_bias);
        detail::put_section<S>(os, "ln2_gain" + at, l.ln2_gain);
        detail::put_section<S>(os, "ln2_bias" + at, l.ln2_bias);
        detail::put_section<S>(os, "ffn_w1" + at, l.ffn_w1);
        detail::put_section<S>(os, "ffn_b1" + at, l.ffn_b1);
        detail::put_section<S>(os, "ffn_w2" + at, l.ffn_w2);
        detail::put_section<S>(os, "ffn_b2" + at, l.ffn_b2);
    }
    detail::put_section<S>(os, "classifier_w", p.classifier_w);
    detail::put_section<S>(os, "classifier_b", p.classifier_b);
    return os.str();
}

template <typename S>
Checkpoint<S> checkpoint_from_string(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "amt-checkpoint v1") {
        throw IoError("not a checkpoint (bad magic line)");
    }
    Checkpoint<S> ck;
    while (std::getline(is, line)) {
        if (line == "end-header") break;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw IoError("checkpoint header: expected key=value");
        try {
            model_config_set(ck.config, line.substr(0, eq), line.substr(eq + 1));
        } catch (const Error&) {
            throw;
        } catch (...) {
            throw IoError("checkpoint header: bad value in '" + line + "'");
        }
    }
    ModelParams<S>& p = ck.params;
    p.frontend_w = detail::take_section<S>(is, "frontend_w");
    p.frontend_b = detail::take_section<S>(is, "frontend_b");
    p.layers.resize(static_cast<size_t>(ck.config.num_layers));
    for (size_t i = 0; i < p.layers.size(); ++i) {
        auto& l = p.layers[i];
        const std::string at = " layer=" + std::to_string(i);
        l.attn.w_q = detail::take_section<S>(is, "w_q" + at);
        l.attn.w_k = detail::take_section<S>(is, "w_k" + at);
        l.attn.w_v = detail::take_section<S>(is, "w_v" + at);
        l.attn.w_out = detail::take_section<S>(is, "w_out" + at);
        l.attn.num_heads = ck.config.num_heads;
        l.ln1_gain = detail::take_section<S>(is, "ln1_gain" + at);
        l.ln1_bias = detail::take_section<S>(is, "ln1_bias" + at);
        l.ln2_gain = detail::take_section<S>(is, "ln2_gain" + at);
        l.ln2_bias = detail::take_section<S>(is, "ln2_bias" + at);
        l.ffn_w1 = detail::take_section<S>(is, "ffn_w1" + at);
        l.ffn_b1 = detail::take_section<S>(is, "ffn_b1" + at);
        l.ffn_w2 = detail::take_section<S>(is, "ffn_w2" + at);
        l.ffn_b2 = detail::take_section<S>(is, "ffn_b2" + at);
    }
    p.classifier_w = detail::take_section<S>(is, "classifier_w");
    p.classifier_b = detail::take_section<S>(is, "classifier_b");
    return ck;
}

template <typename S>
void write_checkpoint_file(const std::string& path, const ModelConfig& cfg,
                           const ModelParams<S>& p) {
    atomic_write_file(path, checkpoint_to_string(cfg, p));
}

template <typename S>
Checkpoint<S> read_checkpoint_file(const std::string& path) {
    return checkpoint_from_string<S>(read_text_file(path));
}

// Raises when stored parameter shapes cannot serve the given config.
template <typename S>
void check_params_match(const ModelConfig& cfg, const ModelParams<S>& p) {
    if (static_cast<Index>(p.layers.size()) != cfg.num_layers) {
        throw ConfigError("checkpoint has " + std::to_string(p.layers.size()) +
                          " layers, config wants " + std::to_string(cfg.num_layers));
    }
    if (p.frontend_w.rows() != cfg.d_model ||
        p.frontend_w.cols() != cfg.input_dim * cfg.frontend_window) {
        throw ConfigError("checkpoint frontend is " + shape_str(p.frontend_w) +
                          ", config wants " +
                          shape_str(cfg.d_model, cfg.input_dim * cfg.frontend_window));
    }
    if (p.classifier_w.rows() != cfg.output_classes || p.classifier_w.cols() != cfg.d_model) {
        throw ConfigError("checkpoint classifier is " + shape_str(p.classifier_w) +
                          ", config wants " + shape_str(cfg.output_classes, cfg.d_model));
    }
    for (const auto& l : p.layers) {
        if (l.attn.w_q.rows() != cfg.d_model || l.ffn_w1.rows() != cfg.ffn_dim) {
            throw ConfigError("checkpoint layer shapes do not match config");
        }
    }
}

}  // namespace amt
