#pragma once

#include "amt/types.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace amt {

// Text matrix format: first line "ROWS COLS", then ROWS lines of COLS
// space-separated decimal values. Values are printed with max_digits10
// precision so a write/read round trip is bit-exact.

template <typename S>
void write_matrix(std::ostream& os, const Mat<S>& m) {
    os << m.rows() << ' ' << m.cols() << '\n';
    os.precision(std::numeric_limits<S>::max_digits10);
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            if (j) os << ' ';
            os << m(i, j);
        }
        os << '\n';
    }
}

template <typename S>
Mat<S> read_matrix(std::istream& is, const std::string& what = "matrix") {
    Index rows = -1, cols = -1;
    if (!(is >> rows >> cols)) throw IoError(what + ": missing ROWS COLS header");
    if (rows < 0 || cols < 0) throw IoError(what + ": negative dimensions in header");
    Mat<S> m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        for (Index j = 0; j < cols; ++j) {
            double v;
            if (!(is >> v)) {
                throw IoError(what + ": truncated at row " + std::to_string(i));
            }
            m(i, j) = static_cast<S>(v);
        }
    }
    is >> std::ws;  // consume the trailing newline so section readers line up
    return m;
}

template <typename S>
std::string matrix_to_string(const Mat<S>& m) {
    std::ostringstream os;
    write_matrix(os, m);
    return os.str();
}

template <typename S>
Mat<S> matrix_from_string(const std::string& text, const std::string& what = "matrix") {
    std::istringstream is(text);
    return read_matrix<S>(is, what);
}

// Writes via a temp file in the same directory, then renames over the target,
// so a crash never leaves a truncated output.
inline void atomic_write_file(const std::string& path, const std::string& contents) {
    namespace fs = std::filesystem;
    fs::path target(path);
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
        os << contents;
        if (!os) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("rename to " + path + " failed: " + ec.message());
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return buf.str();
}

template <typename S>
void write_matrix_file(const std::string& path, const Mat<S>& m) {
    atomic_write_file(path, matrix_to_string(m));
}

template <typename S>
Mat<S> read_matrix_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    return read_matrix<S>(is, path);
}

// A sequence of feature frames. Stored column-per-frame (D x T); the on-disk
// layout is one frame per line (T x D).
template <typename S>
struct FeatureMatrix {
    Mat<S> frames;  // D x T
    double frame_period_ms = 10.0;

    Index dim() const { return frames.rows(); }
    Index length() const { return frames.cols(); }
};

template <typename S>
FeatureMatrix<S> read_features_file(const std::string& path, double frame_period_ms) {
    Mat<S> by_rows = read_matrix_file<S>(path);  // T x D
    return FeatureMatrix<S>{by_rows.transpose(), frame_period_ms};
}

template <typename S>
void write_features_file(const std::string& path, const FeatureMatrix<S>& f) {
    write_matrix_file<S>(path, f.frames.transpose());
}

// Labels file: first line "T", then T integer lines.
inline void write_labels_file(const std::string& path, const std::vector<Index>& labels) {
    std::ostringstream os;
    os << labels.size() << '\n';
    for (Index v : labels) os << v << '\n';
    atomic_write_file(path, os.str());
}

inline std::vector<Index> read_labels_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    Index n = -1;
    if (!(is >> n) || n < 0) throw IoError(path + ": bad label count header");
    std::vector<Index> labels(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) {
        if (!(is >> labels[static_cast<size_t>(i)])) {
            throw IoError(path + ": truncated labels at " + std::to_string(i));
        }
    }
    return labels;
}

}  // namespace amt
