#pragma once

#include "amt/matrix_io.hpp"
#include "amt/model.hpp"
#include "amt/rng.hpp"
#include "amt/types.hpp"

#include <cmath>
#include <ostream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace amt {

// ---- framewise cross-entropy ---------------------------------------------------

template <typename S>
struct CeResult {
    S loss = 0;
    Mat<S> grad;  // d(loss)/d(logits), same shape as logits
};

// Mean over frames of -log softmax(col)[label]. The log-sum-exp is anchored
// at the column max, so saturated logits stay finite.
template <typename S>
CeResult<S> framewise_ce_loss(const Mat<S>& logits, const std::vector<Index>& labels) {
    if (static_cast<Index>(labels.size()) != logits.cols()) {
        throw ShapeError("label count " + std::to_string(labels.size()) + " != logit columns " +
                         std::to_string(logits.cols()));
    }
    if (logits.cols() == 0) throw EmptyInputError("loss over zero frames");
    const Index k = logits.rows();
    const Index t = logits.cols();
    CeResult<S> out;
    out.grad.resize(k, t);
    S total = 0;
    for (Index j = 0; j < t; ++j) {
        const Index label = labels[static_cast<size_t>(j)];
        if (label < 0 || label >= k) {
            throw LabelError("label " + std::to_string(label) + " at frame " + std::to_string(j) +
                             " outside [0," + std::to_string(k) + ")");
        }
        const S m = logits.col(j).maxCoeff();
        S sum = 0;
        for (Index i = 0; i < k; ++i) sum += std::exp(logits(i, j) - m);
        const S lse = m + std::log(sum);
        total += lse - logits(label, j);
        for (Index i = 0; i < k; ++i) out.grad(i, j) = std::exp(logits(i, j) - lse);
        out.grad(label, j) -= S(1);
    }
    out.loss = total / static_cast<S>(t);
    out.grad /= static_cast<S>(t);
    return out;
}

// ---- recorded forward + backward --------------------------------------------------

template <typename S>
using ModelGrads = ModelParams<S>;

template <typename S>
struct ForwardRecord {
    Graph<S> graph{true};
    ModelVars<S> vars;
    GVar input;  // gradient-carrying leaf holding the raw utterance
    EncodeVars<S> out;
};

// Runs the forward pass on a training graph. Pass an rng to enable dropout at
// cfg.dropout_rate; masks are stored in the graph and replayed by backward.
template <typename S>
ForwardRecord<S> record_forward(const ModelConfig& cfg, const ModelParams<S>& params,
                                const Mat<S>& x_raw, SeededRng* dropout_rng = nullptr) {
    cfg.validate();
    if (cfg.dropout_rate > 0 && dropout_rng == nullptr) {
        throw ParameterError("dropout_rate > 0 requires an rng for mask draws");
    }
    ForwardRecord<S> rec;
    rec.vars = model_leaves(rec.graph, params, true);
    rec.input = rec.graph.leaf(x_raw, true);
    Dropout<S> drop;
    if (dropout_rng && cfg.dropout_rate > 0) {
        drop = Dropout<S>{static_cast<S>(cfg.dropout_rate), true, dropout_rng};
    }
    rec.out = encode_from_var(rec.graph, cfg, rec.vars, rec.input, drop);
    return rec;
}

template <typename S>
ModelGrads<S> collect_grads(const Graph<S>& g, const ModelVars<S>& v) {
    ModelGrads<S> out;
    out.frontend_w = g.grad(v.frontend_w);
    out.frontend_b = g.grad(v.frontend_b).col(0);
    out.layers.resize(v.layers.size());
    for (size_t i = 0; i < v.layers.size(); ++i) {
        const auto& lv = v.layers[i];
        auto& lg = out.layers[i];
        lg.attn.w_q = g.grad(lv.attn.w_q);
        lg.attn.w_k = g.grad(lv.attn.w_k);
        lg.attn.w_v = g.grad(lv.attn.w_v);
        lg.attn.w_out = g.grad(lv.attn.w_out);
        lg.attn.num_heads = lv.attn.num_heads;
        lg.ln1_gain = g.grad(lv.ln1_gain).col(0);
        lg.ln1_bias = g.grad(lv.ln1_bias).col(0);
        lg.ln2_gain = g.grad(lv.ln2_gain).col(0);
        lg.ln2_bias = g.grad(lv.ln2_bias).col(0);
        lg.ffn_w1 = g.grad(lv.ffn_w1);
        lg.ffn_b1 = g.grad(lv.ffn_b1).col(0);
        lg.ffn_w2 = g.grad(lv.ffn_w2);
        lg.ffn_b2 = g.grad(lv.ffn_b2).col(0);
    }
    out.classifier_w = g.grad(v.classifier_w);
    out.classifier_b = g.grad(v.classifier_b).col(0);
    return out;
}

// Seeds the recorded graph with d(loss)/d(logits) and returns gradients for
// every parameter.
template <typename S>
ModelGrads<S> model_backward(ForwardRecord<S>& rec, const Mat<S>& grad_logits) {
    rec.graph.backward(rec.out.logits, grad_logits);
    return collect_grads(rec.graph, rec.vars);
}

// ---- parameter traversal + SGD ---------------------------------------------------

// Visits every tensor in a fixed order; P may be const or mutable.
template <typename P, typename F>
void for_each_param(P& p, F&& f) {
    f(std::string("frontend_w"), p.frontend_w);
    f(std::string("frontend_b"), p.frontend_b);
    for (size_t i = 0; i < p.layers.size(); ++i) {
        auto& l = p.layers[i];
        const std::string pre = "layer" + std::to_string(i) + ".";
        f(pre + "w_q", l.attn.w_q);
        f(pre + "w_k", l.attn.w_k);
        f(pre + "w_v", l.attn.w_v);
        f(pre + "w_out", l.attn.w_out);
        f(pre + "ln1_gain", l.ln1_gain);
        f(pre + "ln1_bias", l.ln1_bias);
        f(pre + "ln2_gain", l.ln2_gain);
        f(pre + "ln2_bias", l.ln2_bias);
        f(pre + "ffn_w1", l.ffn_w1);
        f(pre + "ffn_b1", l.ffn_b1);
        f(pre + "ffn_w2", l.ffn_w2);
        f(pre + "ffn_b2", l.ffn_b2);
    }
    f(std::string("classifier_w"), p.classifier_w);
    f(std::string("classifier_b"), p.classifier_b);
}

template <typename S>
void sgd_step(ModelParams<S>& params, const ModelGrads<S>& grads, S lr) {
    if (params.layers.size() != grads.layers.size()) {
        throw ShapeError("parameter/gradient layer counts differ");
    }
    struct Slot {
        S* data;
        Index n;
    };
    std::vector<Slot> ps, gs;
    for_each_param(params, [&](const std::string&, auto& m) {
        ps.push_back(Slot{m.data(), static_cast<Index>(m.size())});
    });
    for_each_param(const_cast<ModelGrads<S>&>(grads), [&](const std::string&, auto& m) {
        gs.push_back(Slot{m.data(), static_cast<Index>(m.size())});
    });
    for (size_t i = 0; i < ps.size(); ++i) {
        if (ps[i].n != gs[i].n) throw ShapeError("parameter/gradient shape mismatch");
        for (Index j = 0; j < ps[i].n; ++j) ps[i].data[j] -= lr * gs[i].data[j];
    }
}

// ---- gradient checking ---------------------------------------------------------

struct GradCheckReport {
    double max_relative_error = 0;
    std::string worst_parameter;
    Index num_checked = 0;
};

// Central differences on every parameter coefficient against the recorded
// backward pass. Relative error uses max(1, |analytic|, |numeric|) in the
// denominator so near-zero gradients do not blow up the ratio.
template <typename S>
GradCheckReport gradcheck_model(const ModelConfig& cfg, ModelParams<S> params, const Mat<S>& x,
                                const std::vector<Index>& labels, S fd_step = S(1e-5)) {
    if (cfg.dropout_rate != 0) throw ParameterError("gradient check requires dropout 0");
    ForwardRecord<S> rec = record_forward(cfg, params, x);
    CeResult<S> ce = framewise_ce_loss(rec.graph.value(rec.out.logits), labels);
    ModelGrads<S> analytic = model_backward(rec, ce.grad);

    // The recurrence cache is a stop-gradient: the model's gradient treats the
    // cached activations as constants. The numeric probe must differentiate
    // the same objective, so for that variant every perturbed pass re-injects
    // the cache contents recorded from the unperturbed forward.
    auto frontend_of = [&]() {
        Mat<S> h = matmul<S>(params.frontend_w,
                             frame_stack<S>(x, cfg.frontend_window, cfg.frontend_stride));
        h.colwise() += params.frontend_b;
        return h;
    };
    std::vector<std::vector<Mat<S>>> pinned;  // cache state entering each segment
    if (cfg.variant == Variant::txl) {
        Mat<S> h = frontend_of();
        auto states = make_stream_states<S>(cfg);
        for (Index start = 0; start < h.cols(); start += cfg.segment_b) {
            std::vector<Mat<S>> before;
            for (const auto& st : states) before.push_back(st.cache);
            pinned.push_back(std::move(before));
            const Index end = std::min<Index>(start + cfg.segment_b, h.cols());
            const Index rend = std::min<Index>(end + cfg.context_r, h.cols());
            run_segment(cfg, params, Mat<S>(cfg.d_model, 0),
                        Mat<S>(h.middleCols(start, end - start)),
                        Mat<S>(h.middleCols(end, rend - end)), states);
        }
    }

    auto loss_of = [&]() {
        if (cfg.variant != Variant::txl) {
            EncodeResult<S> enc = encode_utterance(cfg, params, x);
            return framewise_ce_loss(enc.logits, labels).loss;
        }
        Mat<S> h = frontend_of();
        auto states = make_stream_states<S>(cfg);
        Mat<S> hidden(cfg.d_model, h.cols());
        size_t n = 0;
        for (Index start = 0; start < h.cols(); start += cfg.segment_b) {
            for (size_t i = 0; i < states.size(); ++i) states[i].cache = pinned[n][i];
            const Index end = std::min<Index>(start + cfg.segment_b, h.cols());
            const Index rend = std::min<Index>(end + cfg.context_r, h.cols());
            hidden.middleCols(start, end - start) =
                run_segment(cfg, params, Mat<S>(cfg.d_model, 0),
                            Mat<S>(h.middleCols(start, end - start)),
                            Mat<S>(h.middleCols(end, rend - end)), states);
            n += 1;
        }
        return framewise_ce_loss(classify(params, hidden), labels).loss;
    };

    struct Slot {
        std::string name;
        S* data;
        Index n;
    };
    std::vector<Slot> ps, gs;
    for_each_param(params, [&](const std::string& name, auto& m) {
        ps.push_back(Slot{name, m.data(), static_cast<Index>(m.size())});
    });
    for_each_param(analytic, [&](const std::string& name, auto& m) {
        gs.push_back(Slot{name, m.data(), static_cast<Index>(m.size())});
    });

    GradCheckReport report;
    for (size_t s = 0; s < ps.size(); ++s) {
        for (Index j = 0; j < ps[s].n; ++j) {
            const S keep = ps[s].data[j];
            ps[s].data[j] = keep + fd_step;
            const S up = loss_of();
            ps[s].data[j] = keep - fd_step;
            const S down = loss_of();
            ps[s].data[j] = keep;
            const double numeric = static_cast<double>(up - down) / (2.0 * fd_step);
            const double exact = static_cast<double>(gs[s].data[j]);
            const double rel = std::abs(exact - numeric) /
                               std::max({1.0, std::abs(exact), std::abs(numeric)});
            report.num_checked += 1;
            if (rel > report.max_relative_error) {
                report.max_relative_error = rel;
                report.worst_parameter = ps[s].name + "[" + std::to_string(j) + "]";
            }
        }
    }
    return report;
}

// ---- synthetic tasks -----------------------------------------------------------

enum class TaskKind { local_pattern, long_range_recall };

inline std::string to_string(TaskKind k) {
    return k == TaskKind::local_pattern ? "local_pattern" : "long_range_recall";
}

inline TaskKind task_kind_from_string(const std::string& s) {
    if (s == "local_pattern") return TaskKind::local_pattern;
    if (s == "long_range_recall") return TaskKind::long_range_recall;
    throw ConfigError("unknown task kind '" + s + "'");
}

struct SyntheticTask {
    TaskKind kind = TaskKind::long_range_recall;
    Index t = 48;           // frames
    Index input_dim = 8;
    Index num_classes = 5;  // class 0 is the neutral filler for long-range recall
    Index segment_len = 8;  // alignment unit for cue placement and labeled span
    uint64_t seed = 1;
};

template <typename S>
struct TaskData {
    FeatureMatrix<S> features;
    std::vector<Index> labels;
};

// local_pattern: every frame carries its own class as a +2 bump on one of the
// first num_classes dims over 0.3-sigma noise; labels are per-frame.
// long_range_recall: one cue class c >= 1 bumps dim c-1 during the first
// segment only; the last segment carries a marker on the top dim and is
// labeled c; everything else is labeled 0. At least two whole segments
// separate cue from labels, so solving it requires cross-segment state.
template <typename S>
TaskData<S> generate_task(const SyntheticTask& task) {
    if (task.t <= 0) throw ParameterError("task length must be positive");
    if (task.input_dim <= 0) throw ParameterError("task input_dim must be positive");
    if (task.num_classes < 2) throw ParameterError("task needs >= 2 classes");
    if (task.segment_len <= 0) throw ParameterError("task segment_len must be positive");

    SeededRng rng(task.seed);
    TaskData<S> out;
    out.features.frames.resize(task.input_dim, task.t);
    out.labels.resize(static_cast<size_t>(task.t));
    const S noise = S(0.3);
    const S amp = S(2.0);
    for (Index j = 0; j < task.t; ++j) {
        for (Index i = 0; i < task.input_dim; ++i) {
            out.features.frames(i, j) = static_cast<S>(rng.normal()) * noise;
        }
    }

    if (task.kind == TaskKind::local_pattern) {
        if (task.input_dim < task.num_classes) {
            throw ParameterError("local pattern needs input_dim >= num_classes");
        }
        for (Index j = 0; j < task.t; ++j) {
            const Index label = static_cast<Index>(rng.below(static_cast<uint64_t>(task.num_classes)));
            out.features.frames(label, j) += amp;
            out.labels[static_cast<size_t>(j)] = label;
        }
        return out;
    }

    const Index nseg = (task.t + task.segment_len - 1) / task.segment_len;
    if (nseg < 4) {
        throw ParameterError("long-range recall needs >= 4 segments (cue, >= 2 gap, labels); t=" +
                             std::to_string(task.t) + " segment_len=" +
                             std::to_string(task.segment_len));
    }
    if (task.input_dim < task.num_classes) {
        throw ParameterError("long-range recall needs input_dim >= num_classes");
    }
    const Index cue = 1 + static_cast<Index>(rng.below(static_cast<uint64_t>(task.num_classes - 1)));
    const Index cue_end = std::min(task.segment_len, task.t);
    for (Index j = 0; j < cue_end; ++j) out.features.frames(cue - 1, j) += amp;
    const Index final_start = (nseg - 1) * task.segment_len;
    for (Index j = final_start; j < task.t; ++j) {
        out.features.frames(task.input_dim - 1, j) += amp;
        out.labels[static_cast<size_t>(j)] = cue;
    }
    return out;
}

// ---- training loop --------------------------------------------------------------

struct EpochMetrics {
    Index epoch = 0;
    double loss = 0;
    double acc = 0;        // all frames
    double acc_final = 0;  // last segment_len frames (the labeled span of recall tasks)
};

template <typename S>
struct TrainResult {
    ModelParams<S> params;
    std::vector<EpochMetrics> history;
};

template <typename S>
double frame_accuracy(const Mat<S>& logits, const std::vector<Index>& labels, Index from,
                      Index to) {
    Index hit = 0;
    for (Index j = from; j < to; ++j) {
        Index best = 0;
        logits.col(j).maxCoeff(&best);
        if (best == labels[static_cast<size_t>(j)]) hit += 1;
    }
    return to > from ? static_cast<double>(hit) / static_cast<double>(to - from) : 0.0;
}

// One epoch = one SGD step per utterance in a fixed pool of
// `utts_per_epoch` task draws (seeds task.seed .. task.seed+utts_per_epoch-1).
// The pool is regenerated deterministically, so equal seeds give bitwise-equal
// histories, and lr=0 leaves both the parameters and the metrics fixed.
template <typename S>
TrainResult<S> train(const ModelConfig& cfg, const SyntheticTask& task, Index epochs, S lr,
                     uint64_t seed, std::ostream* log = nullptr, Index utts_per_epoch = 16) {
    cfg.validate();
    if (epochs <= 0) throw ParameterError("epochs must be positive");
    if (utts_per_epoch <= 0) throw ParameterError("utts_per_epoch must be positive");

    TrainResult<S> out;
    out.params = init_params<S>(cfg, seed);
    SeededRng drop_rng(seed ^ 0x9e3779b97f4a7c15ULL);

    for (Index e = 0; e < epochs; ++e) {
        double loss_sum = 0, acc_sum = 0, accf_sum = 0;
        for (Index u = 0; u < utts_per_epoch; ++u) {
            SyntheticTask draw = task;
            draw.seed = task.seed + static_cast<uint64_t>(u);
            TaskData<S> data = generate_task<S>(draw);
            ForwardRecord<S> rec =
                record_forward(cfg, out.params, data.features.frames,
                               cfg.dropout_rate > 0 ? &drop_rng : nullptr);
            const Mat<S>& logits = rec.graph.value(rec.out.logits);
            if (static_cast<Index>(data.labels.size()) != logits.cols()) {
                throw ConfigError("frontend drops frames: labels " +
                                  std::to_string(data.labels.size()) + " vs logits " +
                                  std::to_string(logits.cols()) +
                                  "; use frontend window=stride=1 for training tasks");
            }
            CeResult<S> ce = framewise_ce_loss(logits, data.labels);
            loss_sum += static_cast<double>(ce.loss);
            acc_sum += frame_accuracy(logits, data.labels, 0, logits.cols());
            const Index final_from = std::max<Index>(0, logits.cols() - task.segment_len);
            accf_sum += frame_accuracy(logits, data.labels, final_from, logits.cols());
            if (lr != S(0)) {
                ModelGrads<S> grads = model_backward(rec, ce.grad);
                sgd_step(out.params, grads, lr);
            }
        }
        EpochMetrics m;
        m.epoch = e;
        m.loss = loss_sum / static_cast<double>(utts_per_epoch);
        m.acc = acc_sum / static_cast<double>(utts_per_epoch);
        m.acc_final = accf_sum / static_cast<double>(utts_per_epoch);
        out.history.push_back(m);
        if (log) {
            (*log) << "epoch=" << m.epoch << " loss=" << m.loss << " acc=" << m.acc
                   << " acc_final=" << m.acc_final << "\n";
        }
    }
    return out;
}

// Mean final-span accuracy over freshly drawn utterances the model never
// trained on.
template <typename S>
double evaluate_final_accuracy(const ModelConfig& cfg, const ModelParams<S>& params,
                               const SyntheticTask& task, Index n_utterances,
                               uint64_t seed_base) {
    double total = 0;
    for (Index i = 0; i < n_utterances; ++i) {
        SyntheticTask draw = task;
        draw.seed = seed_base + static_cast<uint64_t>(i);
        TaskData<S> data = generate_task<S>(draw);
        EncodeResult<S> enc = encode_utterance(cfg, params, data.features.frames);
        const Index from = std::max<Index>(0, enc.logits.cols() - task.segment_len);
        total += frame_accuracy(enc.logits, data.labels, from, enc.logits.cols());
    }
    return total / static_cast<double>(n_utterances);
}

}  // namespace amt
