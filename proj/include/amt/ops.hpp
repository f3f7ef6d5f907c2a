#pragma once

#include "amt/rng.hpp"
#include "amt/types.hpp"

#include <cmath>

namespace amt {

// Dense kernels shared by every module. All of them are pure functions and
// all summations run in a fixed order (ascending index), so results are
// bit-identical across runs. The project is compiled with -ffp-contract=off
// to keep that true under optimization.

template <typename S>
Mat<S> matmul(const Mat<S>& a, const Mat<S>& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a) + " * " +
                         shape_str(b));
    }
    Mat<S> c = Mat<S>::Zero(a.rows(), b.cols());
    const Index rows = a.rows(), inner = a.cols(), cols = b.cols();
    for (Index j = 0; j < cols; ++j) {
        for (Index k = 0; k < inner; ++k) {
            const S bkj = b(k, j);
            for (Index i = 0; i < rows; ++i) {
                c(i, j) += a(i, k) * bkj;
            }
        }
    }
    return c;
}

// Row-wise softmax with max subtraction.
template <typename S>
Mat<S> softmax_rows(const Mat<S>& logits) {
    Mat<S> out(logits.rows(), logits.cols());
    for (Index i = 0; i < logits.rows(); ++i) {
        const S m = logits.row(i).maxCoeff();
        S sum = 0;
        for (Index j = 0; j < logits.cols(); ++j) {
            const S e = std::exp(logits(i, j) - m);
            out(i, j) = e;
            sum += e;
        }
        for (Index j = 0; j < logits.cols(); ++j) out(i, j) /= sum;
    }
    return out;
}

template <typename S>
Vec<S> layer_norm(const Vec<S>& x, const Vec<S>& gain, const Vec<S>& bias, S eps) {
    if (x.size() != gain.size() || x.size() != bias.size()) {
        throw ShapeError("layer_norm: length mismatch, x=" + std::to_string(x.size()) +
                         " gain=" + std::to_string(gain.size()) +
                         " bias=" + std::to_string(bias.size()));
    }
    const S mean = x.mean();
    const S var = (x.array() - mean).square().sum() / static_cast<S>(x.size());
    const S inv = S(1) / std::sqrt(var + eps);
    return (((x.array() - mean) * inv) * gain.array() + bias.array()).matrix();
}

// Column-wise layer norm: each column of x is normalized independently.
template <typename S>
Mat<S> layer_norm_columns(const Mat<S>& x, const Vec<S>& gain, const Vec<S>& bias, S eps) {
    Mat<S> out(x.rows(), x.cols());
    for (Index j = 0; j < x.cols(); ++j) {
        out.col(j) = layer_norm<S>(x.col(j), gain, bias, eps);
    }
    return out;
}

template <typename S>
Vec<S> mean_pool_columns(const Mat<S>& x) {
    if (x.cols() == 0) throw EmptyInputError("mean_pool_columns: no columns");
    Vec<S> sum = Vec<S>::Zero(x.rows());
    for (Index j = 0; j < x.cols(); ++j) sum += x.col(j);
    return sum / static_cast<S>(x.cols());
}

// Inverted-dropout keep mask: entries are 0 or 1/(1-rate). With training off
// the mask is exactly all ones.
template <typename S>
Mat<S> dropout_mask(Index rows, Index cols, S rate, SeededRng& rng, bool training) {
    if (!(rate >= S(0) && rate < S(1))) {
        throw ParameterError("dropout rate must be in [0,1), got " + std::to_string(rate));
    }
    if (!training || rate == S(0)) return Mat<S>::Ones(rows, cols);
    const S keep_scale = S(1) / (S(1) - rate);
    Mat<S> mask(rows, cols);
    for (Index j = 0; j < cols; ++j) {
        for (Index i = 0; i < rows; ++i) {
            mask(i, j) = rng.bernoulli(static_cast<double>(rate)) ? S(0) : keep_scale;
        }
    }
    return mask;
}

// Dropout policy handed through the attention stack. A null rng or
// training=false makes every mask the identity.
template <typename S>
struct Dropout {
    S rate = 0;
    bool training = false;
    SeededRng* rng = nullptr;

    bool active() const { return training && rate > S(0) && rng != nullptr; }

    Mat<S> mask(Index rows, Index cols) const {
        if (!active()) return Mat<S>::Ones(rows, cols);
        return dropout_mask<S>(rows, cols, rate, *rng, true);
    }
};

template <typename S>
Mat<S> relu(const Mat<S>& x) {
    return x.cwiseMax(S(0));
}

// Additive attention-mask penalty: 0 where permitted, -1e30 where masked.
// Throws if any query row has no permitted key.
template <typename S>
Mat<S> mask_penalty(const BoolMat& allowed) {
    Mat<S> p = Mat<S>::Zero(allowed.rows(), allowed.cols());
    for (Index i = 0; i < allowed.rows(); ++i) {
        bool any = false;
        for (Index j = 0; j < allowed.cols(); ++j) {
            if (allowed(i, j)) {
                any = true;
            } else {
                p(i, j) = S(-1e30);
            }
        }
        if (!any) {
            throw MaskingError("attention mask leaves query row " + std::to_string(i) +
                               " with no permitted key");
        }
    }
    return p;
}

}  // namespace amt
