#pragma once

#include "amt/ops.hpp"
#include "amt/types.hpp"

#include <functional>
#include <utility>
#include <vector>

namespace amt {

// Reverse-mode tape over matrix-valued nodes.
//
// A forward pass recorded on a training graph can be differentiated by
// backward(); an eval graph runs the identical kernels but refuses backward.
// Nodes are appended in execution order, so walking them in reverse is a
// valid topological order. Backward closures capture node ids and small
// constants only, never references into the node vector, which reallocates.

struct GVar {
    Index id = -1;
    bool valid() const { return id >= 0; }
};

template <typename S>
class Graph {
  public:
    using M = Mat<S>;
    using BackFn = std::function<void(Graph&, Index)>;

    explicit Graph(bool training = false) : training_(training) {}

    bool training() const { return training_; }
    Index size() const { return static_cast<Index>(nodes_.size()); }

    GVar leaf(M value, bool requires_grad = false) {
        return push(std::move(value), requires_grad, nullptr);
    }
    GVar constant(M value) { return push(std::move(value), false, nullptr); }

    const M& value(GVar v) const { return nodes_[check(v)].value; }

    // Gradient accumulated at v; zeros if backward never reached it.
    M grad(GVar v) const {
        const Node& n = nodes_[check(v)];
        if (n.grad.size() == 0) return M::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    // Seeds d(out)/d(out) = seed and propagates to every reachable node.
    void backward(GVar out, const M& seed) {
        if (!training_) {
            throw LifecycleError("backward called without a recorded training forward");
        }
        const Node& terminal = nodes_[check(out)];
        if (seed.rows() != terminal.value.rows() || seed.cols() != terminal.value.cols()) {
            throw ShapeError("backward: seed shape " + shape_str(seed) +
                             " does not match output " + shape_str(terminal.value));
        }
        accumulate(out.id, seed);
        for (Index id = out.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.grad.size() != 0 && n.back) n.back(*this, id);
        }
    }

    void accumulate(Index id, const M& g) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.requires_grad && !n.back) return;  // constants absorb nothing
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            n.grad += g;
        }
    }

    GVar push(M value, bool requires_grad, BackFn back) {
        nodes_.push_back(Node{std::move(value), M(), std::move(back), requires_grad});
        return GVar{static_cast<Index>(nodes_.size()) - 1};
    }

    const M& grad_ref(Index id) const { return nodes_[static_cast<size_t>(id)].grad; }
    bool requires_grad(GVar v) const { return nodes_[check(v)].requires_grad; }

  private:
    struct Node {
        M value;
        M grad;
        BackFn back;
        bool requires_grad = false;
    };

    size_t check(GVar v) const {
        if (!v.valid() || v.id >= size()) throw LifecycleError("invalid graph variable");
        return static_cast<size_t>(v.id);
    }

    bool training_;
    std::vector<Node> nodes_;
};

namespace detail {
template <typename S>
bool needs_grad(const Graph<S>& g, std::initializer_list<GVar> ins) {
    for (GVar v : ins) {
        if (g.requires_grad(v)) return true;
    }
    return false;
}
}  // namespace detail

// ---- ops -------------------------------------------------------------------

template <typename S>
GVar g_matmul(Graph<S>& g, GVar a, GVar b) {
    Mat<S> out = matmul<S>(g.value(a), g.value(b));
    const bool rg = detail::needs_grad(g, {a, b});
    typename Graph<S>::BackFn back;
    if (rg) {
        back = [a, b](Graph<S>& gr, Index self) {
            const Mat<S>& go = gr.grad_ref(self);
            gr.accumulate(a.id, matmul<S>(go, Mat<S>(gr.value(b).transpose())));
            gr.accumulate(b.id, matmul<S>(Mat<S>(gr.value(a).transpose()), go));
        };
    }
    return g.push(std::move(out), rg, std::move(back));
}

template <typename S>
GVar g_add(Graph<S>& g, GVar a, GVar b) {
    if (g.value(a).rows() != g.value(b).rows() || g.value(a).cols() != g.value(b).cols()) {
        throw ShapeError("add: " + shape_str(g.value(a)) + " vs " + shape_str(g.value(b)));
    }
    Mat<S> out = g.value(a) + g.value(b);
    const bool rg = detail::needs_grad(g, {a, b});
    typename Graph<S>::BackFn back;
    if (rg) {
        back = [a, b](Graph<S>& gr, Index self) {
            const Mat<S>& go = gr.grad_ref(self);
            gr.accumulate(a.id, go);
            gr.accumulate(b.id, go);
        };
    }
    return g.push(std::move(out), rg, std::move(back));
}

// Broadcast-add a column vector to every column of x.
template <typename S>
GVar g_add_col(Graph<S>& g, GVar x, GVar b) {
    if (g.value(b).cols() != 1 || g.value(x).rows() != g.value(b).rows()) {
        throw ShapeError("add_col: " + shape_str(g.value(x)) + " vs " + shape_str(g.value(b)));
    }
    Mat<S> out = g.value(x).colwise() + Vec<S>(g.value(b).col(0));
    const bool rg = detail::needs_grad(g, {x, b});
    typename Graph<S>::BackFn back;
    if (rg) {
        back = [x, b](Graph<S>& gr, Index self) {
            const Mat<S>& go = gr.grad_ref(self);
            gr.accumulate(x.id, go);
            gr.accumulate(b.id, Mat<S>(go.rowwise().sum()));
        };
    }
    return g.push(std::move(out), rg, std::move(back));
}

template <typename S>
GVar g_scale(Graph<S>& g, GVar a, S factor) {
    Mat<S> out = g.value(a) * factor;
    const bool rg = g.requires_grad(a);
    typename Graph<S>::BackFn back;
    if (rg) {
        back = [a, factor](Graph<S>& gr, Index self) {
            gr.accumulate(a.id, Mat<S>(gr.grad_ref(self) * factor));
        };
    }
    return g.push(std::move(out), rg, std::move(back));
}

template <typename S>
GVar g_add_const(Graph<S>& g, GVar a, const Mat<S>& c) {
    if (g.value(a).rows() != c.rows() || g.value(a).cols() != c.cols()) {
        throw ShapeError("add_const: " + shape_str(g.value(a)) + " vs " + shape_str(c));
    }
    Mat<S> out = g.value(a) + c;
    const bool rg = g.requires_grad(a);
    typename Graph<S>::BackFn back;
    if (rg) {
        back = [a](Graph<S>& gr, Index self) { gr.accumulate(a.id, gr.grad_ref(self)); };
    }
    return g.push(std::move(out), rg, std::move(back));
}

// Elementwise product with a fixed matrix (dropout masks).
template <typename S>
GVar g_hadamard_const(Graph<S>& g, GVar a, Mat<S> c) {
    if (g.value(a).rows() != c.rows() || g.value(a).cols() != c.cols()) {
        throw ShapeError("hadamard_const: " + shape_str(g.value(a)) + " vs " + shape_str(c));
    }
    Mat<S> out = g.value(a).cwiseProduct(c);
    const bool rg = g.requires_grad(a);
    typename Graph<S>::BackFn back;
    if (rg) {
        back = [a, c = std::move(c)](Graph<S>& gr, Index self) {
            gr.accumulate(a.id, Mat<S>(gr.grad_ref(self).cwiseProduct(c)));
        };
    }
    return g.push(std::move(out), rg, std::move(back));
}

template <typename S>
GVar g_transpose(Graph<S>& g, GVar a) {
    Mat<S> out = g.value(a).transpose();
    const bool rg = g.requires_grad(a);
    typename Graph<S>::BackFn back;
    if (rg) {
        back = [a](Graph<S>& gr, Index self) {
            gr.accumulate(a.id, Mat<S>(gr.grad_ref(self).transpose()));
        };
    }
    return g.push(std::move(out), rg, std::move(back));
}

template <typename S>
GVar g_concat_cols(Graph<S>& g, const std::vector<GVar>& parts) {
    if (parts.empty()) throw EmptyInputError("concat_cols: no parts");
    Index rows = -1, cols = 0;
    for (GVar p : parts) {
        if (g.value(p).cols() == 0) continue;
        if (rows < 0) rows = g.value(p).rows();
        if (g.value(p).rows() != rows) {
            throw ShapeError("concat_cols: row mismatch " + shape_str(g.value(p)));
        }
        cols += g.value(p).cols();
    }
    if (rows < 0) throw EmptyInputError("concat_cols: all parts empty");
    Mat<S> out(rows, cols);
    Index at = 0;
    bool rg = false;
    for (GVar p : parts) {
        const Mat<S>& v = g.value(p);
        if (v.cols() == 0) continue;
        out.middleCols(at, v.cols()) = v;
        at += v.cols();
        rg = rg || g.requires_grad(p);
    }
    typename Graph<S>::BackFn back;
    if (rg) {
        back = [parts](Graph<S>& gr, Index self) {
            const Mat<S>& go = gr.grad_ref(self);
            Index at2 = 0;
            for (GVar p : parts) {
                const Index n = gr.value(p).cols();
                if (n == 0) continue;
                gr.accumulate(p.id, Mat<S>(go.middleCols(at2, n)));
                at2 += n;
            }
        };
    }
    return g.push(std::move(out), rg, std::move(back));
}

template <typename S>
GVar g_concat_rows(Graph<S>& g, const std::vector<GVar>& parts) {
    if (parts.empty()) throw EmptyInputError("concat_rows: no parts");
    Index cols = -1, rows = 0;
    for (GVar p : parts) {
        if (g.value(p).rows() == 0) continue;
        if (cols < 0) cols = g.value(p).cols();
        if (g.value(p).cols() != cols) {
            throw ShapeError("concat_rows: col mismatch " + shape_str(g.value(p)));
        }
        rows += g.value(p).rows();
    }
    if (cols < 0) throw EmptyInputError("concat_rows: all parts empty");
    Mat<S> out(rows, cols);
    Index at = 0;
    bool rg = false;
    for (GVar p : parts) {
        const Mat<S>& v = g.value(p);
        if (v.rows() == 0) continue;
        out.middleRows(at, v.rows()) = v;
        at += v.rows();
        rg = rg || g.requires_grad(p);
    }
    typename Graph<S>::BackFn back;
    if (rg) {
        back = [parts](Graph<S>& gr, Index self) {
            const Mat<S>& go = gr.grad_ref(self);
            Index at2 = 0;
            for (GVar p : parts) {
                const Index n = gr.value(p).rows();
                if (n == 0) continue;
                gr.accumulate(p.id, Mat<S>(go.middleRows(at2, n)));
                at2 += n;
            }
        };
    }
    return g.push(std::move(out), rg, std::move(back));
}

template <typename S>
GVar g_slice_cols(Graph<S>& g, GVar a, Index start, Index count) {
    const Mat<S>& v = g.value(a);
    if (start < 0 || count < 0 || start + count > v.cols()) {
        throw ShapeError("slice_cols [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") of " + shape_str(v));
    }
    Mat<S> out = v.middleCols(start, count);
    const bool rg = g.requires_grad(a);
    typename Graph<S>::BackFn back;
    if (rg) {
        back = [a, start, count](Graph<S>& gr, Index self) {
            const Mat<S>& src = gr.value(a);
            Mat<S> padded = Mat<S>::Zero(src.rows(), src.cols());
            padded.middleCols(start, count) = gr.grad_ref(self);
            gr.accumulate(a.id, padded);
        };
    }
    return g.push(std::move(out), rg, std::move(back));
}

template <typename S>
GVar g_slice_rows(Graph<S>& g, GVar a, Index start, Index count) {
    const Mat<S>& v = g.value(a);
    if (start < 0 || count < 0 || start + count > v.rows()) {
        throw ShapeError("slice_rows [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") of " + shape_str(v));
    }
    Mat<S> out = v.middleRows(start, count);
    const bool rg = g.requires_grad(a);
    typename Graph<S>::BackFn back;
    if (rg) {
        back = [a, start, count](Graph<S>& gr, Index self) {
            const Mat<S>& src = gr.value(a);
            Mat<S> padded = Mat<S>::Zero(src.rows(), src.cols());
            padded.middleRows(start, count) = gr.grad_ref(self);
            gr.accumulate(a.id, padded);
        };
    }
    return g.push(std::move(out), rg, std::move(back));
}

template <typename S>
GVar g_relu(Graph<S>& g, GVar a) {
    Mat<S> out = relu<S>(g.value(a));
    const bool rg = g.requires_grad(a);
    typename Graph<S>::BackFn back;
    if (rg) {
        back = [a](Graph<S>& gr, Index self) {
            const Mat<S>& x = gr.value(a);
            Mat<S> gi = gr.grad_ref(self);
            for (Index j = 0; j < gi.cols(); ++j) {
                for (Index i = 0; i < gi.rows(); ++i) {
                    if (x(i, j) <= S(0)) gi(i, j) = S(0);
                }
            }
            gr.accumulate(a.id, gi);
        };
    }
    return g.push(std::move(out), rg, std::move(back));
}

template <typename S>
GVar g_softmax_rows(Graph<S>& g, GVar a) {
    Mat<S> out = softmax_rows<S>(g.value(a));
    const bool rg = g.requires_grad(a);
    typename Graph<S>::BackFn back;
    if (rg) {
        back = [a](Graph<S>& gr, Index self) {
            const Mat<S>& s = gr.value(GVar{self});
            const Mat<S>& go = gr.grad_ref(self);
            Mat<S> gi(s.rows(), s.cols());
            for (Index i = 0; i < s.rows(); ++i) {
                const S dot = go.row(i).cwiseProduct(s.row(i)).sum();
                gi.row(i) = (s.row(i).array() * (go.row(i).array() - dot)).matrix();
            }
            gr.accumulate(a.id, gi);
        };
    }
    return g.push(std::move(out), rg, std::move(back));
}

template <typename S>
GVar g_layer_norm_cols(Graph<S>& g, GVar x, GVar gain, GVar bias, S eps) {
    const Mat<S>& xv = g.value(x);
    const Vec<S> gv = g.value(gain).col(0);
    const Vec<S> bv = g.value(bias).col(0);
    Mat<S> out = layer_norm_columns<S>(xv, gv, bv, eps);
    const bool rg = detail::needs_grad(g, {x, gain, bias});
    typename Graph<S>::BackFn back;
    if (rg) {
        // Cache what backward needs: per-column inverse stddev and x-hat.
        const Index n = xv.rows();
        Vec<S> inv(xv.cols());
        Mat<S> xhat(xv.rows(), xv.cols());
        for (Index j = 0; j < xv.cols(); ++j) {
            const S mean = xv.col(j).mean();
            const S var = (xv.col(j).array() - mean).square().sum() / static_cast<S>(n);
            inv(j) = S(1) / std::sqrt(var + eps);
            xhat.col(j) = (xv.col(j).array() - mean) * inv(j);
        }
        back = [x, gain, bias, inv = std::move(inv), xhat = std::move(xhat)](Graph<S>& gr,
                                                                             Index self) {
            const Mat<S>& go = gr.grad_ref(self);
            const Vec<S> gcol = gr.value(gain).col(0);
            const Index n = xhat.rows();
            Mat<S> gx(xhat.rows(), xhat.cols());
            Vec<S> ggain = Vec<S>::Zero(n);
            Vec<S> gbias = Vec<S>::Zero(n);
            for (Index j = 0; j < xhat.cols(); ++j) {
                const Vec<S> h = go.col(j).cwiseProduct(gcol);
                const S sum_h = h.sum();
                const S sum_hx = h.cwiseProduct(xhat.col(j)).sum();
                gx.col(j) = ((inv(j) / static_cast<S>(n)) *
                             (static_cast<S>(n) * h.array() - sum_h -
                              xhat.col(j).array() * sum_hx))
                                .matrix();
                ggain += go.col(j).cwiseProduct(xhat.col(j));
                gbias += go.col(j);
            }
            gr.accumulate(x.id, gx);
            gr.accumulate(gain.id, Mat<S>(ggain));
            gr.accumulate(bias.id, Mat<S>(gbias));
        };
    }
    return g.push(std::move(out), rg, std::move(back));
}

template <typename S>
GVar g_mean_pool_cols(Graph<S>& g, GVar x) {
    Mat<S> out = mean_pool_columns<S>(g.value(x));
    const bool rg = g.requires_grad(x);
    typename Graph<S>::BackFn back;
    if (rg) {
        back = [x](Graph<S>& gr, Index self) {
            const Mat<S>& go = gr.grad_ref(self);
            const Index cols = gr.value(x).cols();
            Mat<S> gi = (go.col(0) / static_cast<S>(cols)).replicate(1, cols);
            gr.accumulate(x.id, gi);
        };
    }
    return g.push(std::move(out), rg, std::move(back));
}

// Stop-gradient: value flows forward, nothing flows back.
template <typename S>
GVar g_detach(Graph<S>& g, GVar a) {
    return g.constant(g.value(a));
}

}  // namespace amt
