#pragma once

#include "amt/matrix_io.hpp"
#include "amt/model.hpp"
#include "amt/streaming.hpp"
#include "amt/training.hpp"
#include "amt/types.hpp"

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace amt {

// Flat key=value run configuration. A config file supplies baseline values,
// command-line overrides are applied on top in order, and unknown keys are
// rejected outright so a typo in a geometry parameter cannot silently run
// with defaults.

struct RunConfig {
    std::string command;
    ModelConfig model;
    SyntheticTask task;
    uint64_t seed = 1;
    Index epochs = 20;
    double lr = 0.05;
    Index utts_per_epoch = 16;
    Index chunk = 0;  // stream push size in raw frames; 0 = whole input at once
    int precision = 64;
    std::string in_path, out_path, labels_path, checkpoint_in, checkpoint_out;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline long long parse_int(const std::string& key, const std::string& value,
                           const std::string& where) {
    size_t used = 0;
    long long v = 0;
    try {
        v = std::stoll(value, &used);
    } catch (...) {
        used = 0;
    }
    if (used != value.size() || value.empty()) {
        throw ConfigError("key '" + key + "': expected integer, got '" + value + "' (" + where +
                          ")");
    }
    return v;
}

inline double parse_real(const std::string& key, const std::string& value,
                         const std::string& where) {
    size_t used = 0;
    double v = 0;
    try {
        v = std::stod(value, &used);
    } catch (...) {
        used = 0;
    }
    if (used != value.size() || value.empty()) {
        throw ConfigError("key '" + key + "': expected number, got '" + value + "' (" + where +
                          ")");
    }
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& value,
                       const std::string& where) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("key '" + key + "': expected true/false, got '" + value + "' (" + where +
                      ")");
}

inline std::optional<Index> parse_opt_count(const std::string& key, const std::string& value,
                                            const std::string& where) {
    if (value == "unbounded" || value == "none") return std::nullopt;
    return static_cast<Index>(parse_int(key, value, where));
}

}  // namespace detail

// Applies one key=value pair. `where` names the source ("line 3" or
// "override") for error messages.
inline void apply_key(RunConfig& rc, const std::string& key, const std::string& value,
                      const std::string& where) {
    using detail::parse_bool;
    using detail::parse_int;
    using detail::parse_opt_count;
    using detail::parse_real;
    auto count = [&](const char* k) { return static_cast<Index>(parse_int(k, value, where)); };

    if (key == "variant") rc.model.variant = variant_from_string(value);
    else if (key == "pooling") rc.model.pooling = pooling_from_string(value);
    else if (key == "input_dim") rc.model.input_dim = count("input_dim");
    else if (key == "output_classes") rc.model.output_classes = count("output_classes");
    else if (key == "num_layers") rc.model.num_layers = count("num_layers");
    else if (key == "d_model") rc.model.d_model = count("d_model");
    else if (key == "num_heads") rc.model.num_heads = count("num_heads");
    else if (key == "ffn_dim") rc.model.ffn_dim = count("ffn_dim");
    else if (key == "dropout_rate") rc.model.dropout_rate = parse_real(key, value, where);
    else if (key == "segment_B") rc.model.segment_b = count("segment_B");
    else if (key == "context_L") rc.model.context_l = count("context_L");
    else if (key == "context_R") rc.model.context_r = count("context_R");
    else if (key == "memory_capacity") rc.model.memory_capacity = parse_opt_count(key, value, where);
    else if (key == "trt_left") rc.model.trt_left = parse_opt_count(key, value, where);
    else if (key == "trt_right") rc.model.trt_right = parse_opt_count(key, value, where);
    else if (key == "frontend_window") rc.model.frontend_window = count("frontend_window");
    else if (key == "frontend_stride") rc.model.frontend_stride = count("frontend_stride");
    else if (key == "frame_period_ms") rc.model.frame_period_ms = parse_real(key, value, where);
    else if (key == "truncate_memory_bptt")
        rc.model.truncate_memory_bptt = parse_bool(key, value, where);
    else if (key == "task_kind") rc.task.kind = task_kind_from_string(value);
    else if (key == "task_frames") rc.task.t = count("task_frames");
    else if (key == "task_classes") rc.task.num_classes = count("task_classes");
    else if (key == "task_segment_len") rc.task.segment_len = count("task_segment_len");
    else if (key == "seed") rc.seed = static_cast<uint64_t>(parse_int(key, value, where));
    else if (key == "epochs") rc.epochs = count("epochs");
    else if (key == "lr") rc.lr = parse_real(key, value, where);
    else if (key == "utts_per_epoch") rc.utts_per_epoch = count("utts_per_epoch");
    else if (key == "chunk") rc.chunk = count("chunk");
    else if (key == "precision") rc.precision = static_cast<int>(parse_int(key, value, where));
    else if (key == "in") rc.in_path = value;
    else if (key == "out") rc.out_path = value;
    else if (key == "labels") rc.labels_path = value;
    else if (key == "checkpoint_in") rc.checkpoint_in = value;
    else if (key == "checkpoint_out") rc.checkpoint_out = value;
    else throw ConfigError("unknown key '" + key + "' (" + where + ")");
}

// Parses file contents, then applies overrides ("key=value" strings) in
// order. '#' starts a comment; blank lines are skipped.
inline RunConfig parse_config(const std::string& file_contents,
                              const std::vector<std::string>& overrides) {
    RunConfig rc;
    std::istringstream is(file_contents);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        lineno += 1;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("expected key=value (line " + std::to_string(lineno) + ")");
        }
        apply_key(rc, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)),
                  "line " + std::to_string(lineno));
    }
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("override '" + ov + "': expected key=value");
        }
        apply_key(rc, detail::trim(ov.substr(0, eq)), detail::trim(ov.substr(eq + 1)), "override");
    }
    // The task rides on the model's input width so features always line up.
    rc.task.input_dim = rc.model.input_dim;
    rc.task.seed = rc.seed;
    return rc;
}

// ---- command implementations ----------------------------------------------------

namespace detail {

inline std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

inline void print_latency(std::ostream& os, const LatencyReport& r) {
    os << "lookahead_frames=" << r.lookahead_frames << "\n";
    os << "lookahead_ms=" << fmt(r.lookahead_ms) << "\n";
    os << "buffering_delay_frames=" << r.buffering_delay_frames << "\n";
    os << "per_layer_growth=" << (r.per_layer_growth ? "true" : "false") << "\n";
    os << "unbounded=" << (r.unbounded ? "true" : "false") << "\n";
    os << "model_period_ms=" << fmt(r.model_period_ms) << "\n";
    os << "memory_slots_for_35s=" << r.memory_slots_for(35000.0) << "\n";
}

template <typename S>
ModelParams<S> load_or_init(const RunConfig& rc) {
    if (!rc.checkpoint_in.empty()) {
        Checkpoint<S> ck = read_checkpoint_file<S>(rc.checkpoint_in);
        check_params_match(rc.model, ck.params);
        return std::move(ck.params);
    }
    return init_params<S>(rc.model, rc.seed);
}

template <typename S>
int run_typed(const RunConfig& rc, std::ostream& out) {
    if (rc.command == "latency") {
        print_latency(out, lookahead(rc.model));
        return 0;
    }
    if (rc.command == "gen-data") {
        if (rc.out_path.empty() || rc.labels_path.empty()) {
            throw ConfigError("gen-data requires out= and labels= paths");
        }
        TaskData<S> data = generate_task<S>(rc.task);
        data.features.frame_period_ms = rc.model.frame_period_ms;
        write_features_file(rc.out_path, data.features);
        write_labels_file(rc.labels_path, data.labels);
        out << "frames=" << data.features.length() << " dim=" << data.features.dim() << "\n";
        return 0;
    }
    if (rc.command == "train") {
        std::ostringstream lines;
        TrainResult<S> res = train<S>(rc.model, rc.task, rc.epochs, static_cast<S>(rc.lr),
                                      rc.seed, &lines, rc.utts_per_epoch);
        out << lines.str();
        if (!rc.out_path.empty()) atomic_write_file(rc.out_path, lines.str());
        if (!rc.checkpoint_out.empty())
            write_checkpoint_file(rc.checkpoint_out, rc.model, res.params);
        return 0;
    }
    if (rc.command == "encode") {
        if (rc.in_path.empty()) throw ConfigError("encode requires in= path");
        FeatureMatrix<S> feats = read_features_file<S>(rc.in_path, rc.model.frame_period_ms);
        ModelParams<S> params = load_or_init<S>(rc);
        EncodeResult<S> enc = encode_utterance(rc.model, params, feats.frames);
        if (!rc.out_path.empty()) write_matrix_file<S>(rc.out_path, enc.logits.transpose());
        out << "frames_out=" << enc.logits.cols() << "\n";
        return 0;
    }
    if (rc.command == "stream") {
        if (rc.in_path.empty()) throw ConfigError("stream requires in= path");
        FeatureMatrix<S> feats = read_features_file<S>(rc.in_path, rc.model.frame_period_ms);
        ModelParams<S> params = load_or_init<S>(rc);
        StreamState<S> st = make_stream_state<S>(rc.model);
        Mat<S> logits(rc.model.output_classes, 0);
        const Index t = feats.length();
        const Index step = rc.chunk > 0 ? rc.chunk : t;
        for (Index at = 0; at < t; at += step) {
            const Index n = std::min(step, t - at);
            append_cols(logits, stream_push(st, Mat<S>(feats.frames.middleCols(at, n)), params));
        }
        append_cols(logits, stream_finish(st, params));
        if (!rc.out_path.empty()) write_matrix_file<S>(rc.out_path, logits.transpose());
        print_latency(out, lookahead(rc.model));
        out << "frames_out=" << logits.cols() << "\n";
        return 0;
    }
    if (rc.command == "gradcheck") {
        const ModelConfig& m = rc.model;
        const Index t_model = is_segmented(m.variant)
                                  ? 2 * m.segment_b + std::max<Index>(m.segment_b / 2, 1)
                                  : 12;
        const Index t_raw = t_model * m.frontend_stride +
                            std::max<Index>(m.frontend_window - m.frontend_stride, 0);
        SeededRng rng(rc.seed);
        Mat<S> x(m.input_dim, t_raw);
        for (Index j = 0; j < t_raw; ++j) {
            for (Index i = 0; i < m.input_dim; ++i) x(i, j) = static_cast<S>(rng.normal());
        }
        std::vector<Index> labels(static_cast<size_t>(t_model));
        for (auto& l : labels) {
            l = static_cast<Index>(rng.below(static_cast<uint64_t>(m.output_classes)));
        }
        ModelParams<S> params = init_params<S>(m, rc.seed);
        GradCheckReport rep = gradcheck_model<S>(m, params, x, labels);
        const bool pass = rep.max_relative_error < 1e-4;
        out << "max_relative_error=" << fmt(rep.max_relative_error) << "\n";
        out << "worst_parameter=" << rep.worst_parameter << "\n";
        out << "num_checked=" << rep.num_checked << "\n";
        out << "pass=" << (pass ? "true" : "false") << "\n";
        if (!pass) {
            throw NumericError("gradient check failed: max relative error " +
                               fmt(rep.max_relative_error));
        }
        return 0;
    }
    throw ConfigError("unknown command '" + rc.command + "'");
}

}  // namespace detail

inline int exit_code_for(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::config: return 2;
        case ErrorCategory::io: return 3;
        case ErrorCategory::shape: return 4;
        case ErrorCategory::lifecycle: return 5;
        case ErrorCategory::numeric: return 6;
    }
    return 1;
}

// Dispatches a parsed config. Throws amt::Error subclasses on failure; the
// CLI main turns those into the one-line error report and exit code.
inline int run(const RunConfig& rc, std::ostream& out = std::cout) {
    if (rc.precision == 32) return detail::run_typed<float>(rc, out);
    if (rc.precision == 64) return detail::run_typed<double>(rc, out);
    throw ConfigError("precision must be 32 or 64, got " + std::to_string(rc.precision));
}

}  // namespace amt
