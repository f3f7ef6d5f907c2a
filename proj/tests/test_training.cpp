#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "amt/training.hpp"
#include "oracles.hpp"

#include <cmath>
#include <sstream>
#include <vector>

using namespace amt;

namespace {

ModelConfig toy_config(Variant v, Index layers, Index heads) {
    ModelConfig cfg;
    cfg.input_dim = 3;
    cfg.output_classes = 3;
    cfg.num_layers = layers;
    cfg.d_model = 4;
    cfg.num_heads = heads;
    cfg.ffn_dim = 5;
    cfg.variant = v;
    cfg.segment_b = 3;
    cfg.context_l = (v == Variant::txl) ? 0 : 2;
    cfg.context_r = 2;
    if (v == Variant::time_restricted) {
        cfg.trt_left = 2;
        cfg.trt_right = 1;
    }
    return cfg;
}

std::vector<Index> random_labels(Index t, Index k, uint64_t seed) {
    SeededRng rng(seed);
    std::vector<Index> out(static_cast<size_t>(t));
    for (auto& l : out) l = static_cast<Index>(rng.below(static_cast<uint64_t>(k)));
    return out;
}

}  // namespace

TEST_CASE("cross-entropy hand values") {
    Mat<double> two(2, 1);
    two << 0, 0;
    CeResult<double> flat = framewise_ce_loss(two, {0});
    CHECK(flat.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(flat.grad(0, 0) == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(flat.grad(1, 0) == doctest::Approx(0.5).epsilon(1e-12));

    Mat<double> sat(2, 1);
    sat << 1000, -1000;
    CeResult<double> sure = framewise_ce_loss(sat, {0});
    CHECK(std::isfinite(sure.loss));
    CHECK(sure.loss < 1e-12);

    Mat<double> uniform = Mat<double>::Constant(7, 3, 0.42);
    CeResult<double> u = framewise_ce_loss(uniform, {0, 3, 6});
    CHECK(u.loss == doctest::Approx(std::log(7.0)).epsilon(1e-12));
}

TEST_CASE("cross-entropy gradient matches finite differences") {
    SeededRng rng(21);
    Mat<double> logits = oracle::random_matrix<double>(4, 6, rng);
    std::vector<Index> labels = random_labels(6, 4, 22);
    CeResult<double> ce = framewise_ce_loss(logits, labels);

    for (Index j = 0; j < 6; ++j) {
        for (Index i = 0; i < 4; ++i) {
            Mat<double> b = logits;
            b(i, j) += 1e-5;
            const double up = framewise_ce_loss(b, labels).loss;
            b(i, j) -= 2e-5;
            const double dn = framewise_ce_loss(b, labels).loss;
            CHECK(oracle::rel_err(ce.grad(i, j), (up - dn) / 2e-5) < 1e-7);
        }
    }
}

TEST_CASE("cross-entropy input validation") {
    Mat<double> logits = Mat<double>::Zero(3, 2);
    CHECK_THROWS_AS(framewise_ce_loss(logits, {0}), ShapeError);
    CHECK_THROWS_AS(framewise_ce_loss(logits, {0, 3}), LabelError);
    CHECK_THROWS_AS(framewise_ce_loss(logits, {0, -1}), LabelError);
    CHECK_THROWS_AS(framewise_ce_loss(Mat<double>(3, 0), {}), EmptyInputError);
}

TEST_CASE("linear softmax classifier has the textbook gradient") {
    SeededRng rng(23);
    Mat<double> wv = oracle::random_matrix<double>(3, 4, rng);
    Mat<double> x = oracle::random_matrix<double>(4, 5, rng);
    std::vector<Index> labels = random_labels(5, 3, 24);

    Graph<double> g(true);
    GVar w = g.leaf(wv, true);
    GVar logits = g_matmul(g, w, g.constant(x));
    CeResult<double> ce = framewise_ce_loss(g.value(logits), labels);
    g.backward(logits, ce.grad);

    // dW = (softmax - onehot)/T * X^T
    Mat<double> expect = matmul(ce.grad, Mat<double>(x.transpose()));
    CHECK(oracle::max_abs_diff(g.grad(w), expect) < 1e-12);
}

TEST_CASE("whole-model gradients pass central differences on every variant") {
    SeededRng rng(501);
    for (Variant v : {Variant::aug_mem, Variant::txl, Variant::time_restricted,
                      Variant::full_context}) {
        for (Index layers : {Index(1), Index(2)}) {
            for (Index heads : {Index(1), Index(2)}) {
                ModelConfig cfg = toy_config(v, layers, heads);
                auto p = init_params<double>(cfg, 601 + layers * 10 + heads);
                Mat<double> x = 0.5 * oracle::random_matrix<double>(cfg.input_dim, 7, rng);
                std::vector<Index> labels = random_labels(7, cfg.output_classes, 602);
                GradCheckReport rep = gradcheck_model(cfg, p, x, labels);
                INFO(to_string(v), " layers=", layers, " heads=", heads, " worst=",
                     rep.worst_parameter);
                CHECK(rep.max_relative_error < 1e-4);
                CHECK(rep.num_checked > 100);
            }
        }
    }
}

TEST_CASE("gradients survive a stacking frontend") {
    SeededRng rng(503);
    ModelConfig cfg = toy_config(Variant::full_context, 1, 2);
    cfg.frontend_window = 2;
    cfg.frontend_stride = 2;
    auto p = init_params<double>(cfg, 607);
    Mat<double> x = 0.5 * oracle::random_matrix<double>(cfg.input_dim, 14, rng);
    std::vector<Index> labels = random_labels(7, cfg.output_classes, 608);
    GradCheckReport rep = gradcheck_model(cfg, p, x, labels);
    CHECK(rep.max_relative_error < 1e-4);
}

TEST_CASE("gradcheck refuses stochastic forwards") {
    ModelConfig cfg = toy_config(Variant::full_context, 1, 1);
    cfg.dropout_rate = 0.2;
    auto p = init_params<double>(cfg, 609);
    Mat<double> x = Mat<double>::Ones(3, 4);
    CHECK_THROWS_AS(gradcheck_model(cfg, p, x, {0, 1, 2, 0}), ParameterError);
}

TEST_CASE("the recurrence cache is a gradient wall between segments") {
    // Two segments, no context overlap. Seed only segment 1's logits: with the
    // recurrence variant the sole route back to segment 0 passes through the
    // detached cache, so segment 0's input gradient must vanish identically.
    SeededRng rng(505);
    Mat<double> x = oracle::random_matrix<double>(3, 6, rng);
    Mat<double> seed = Mat<double>::Zero(3, 6);
    seed.rightCols(3) = oracle::random_matrix<double>(3, 3, rng);

    ModelConfig txl = toy_config(Variant::txl, 1, 2);
    txl.context_r = 0;
    auto p = init_params<double>(txl, 611);
    ForwardRecord<double> rec = record_forward(txl, p, x);
    rec.graph.backward(rec.out.logits, seed);
    Mat<double> dx = rec.graph.grad(rec.input);
    CHECK(dx.leftCols(3).cwiseAbs().maxCoeff() == 0.0);
    CHECK(dx.rightCols(3).cwiseAbs().maxCoeff() > 0.0);

    // same wiring with the memory variant: the slot is an activation, so
    // segment 0 does receive gradient
    ModelConfig aug = toy_config(Variant::aug_mem, 1, 2);
    aug.context_l = 0;
    aug.context_r = 0;
    auto p2 = init_params<double>(aug, 611);
    ForwardRecord<double> rec2 = record_forward(aug, p2, x);
    rec2.graph.backward(rec2.out.logits, seed);
    Mat<double> dx2 = rec2.graph.grad(rec2.input);
    CHECK(dx2.leftCols(3).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("zero upstream gradient yields zero parameter gradients") {
    ModelConfig cfg = toy_config(Variant::aug_mem, 2, 2);
    auto p = init_params<double>(cfg, 613);
    SeededRng rng(507);
    Mat<double> x = oracle::random_matrix<double>(3, 6, rng);
    ForwardRecord<double> rec = record_forward(cfg, p, x);
    ModelGrads<double> grads =
        model_backward(rec, Mat<double>(Mat<double>::Zero(cfg.output_classes, 6)));
    for_each_param(grads, [](const std::string&, auto& m) {
        CHECK(m.cwiseAbs().maxCoeff() == 0.0);
    });
}

TEST_CASE("dropout requires an rng and perturbs the recorded forward") {
    ModelConfig cfg = toy_config(Variant::full_context, 1, 2);
    cfg.dropout_rate = 0.3;
    auto p = init_params<double>(cfg, 617);
    SeededRng rng(509);
    Mat<double> x = oracle::random_matrix<double>(3, 5, rng);

    CHECK_THROWS_AS(record_forward(cfg, p, x), ParameterError);

    SeededRng d1(91), d2(92);
    ForwardRecord<double> a = record_forward(cfg, p, x, &d1);
    ForwardRecord<double> b = record_forward(cfg, p, x, &d2);
    CHECK(oracle::max_abs_diff(a.graph.value(a.out.logits), b.graph.value(b.out.logits)) > 0.0);

    // backward through the recorded masks stays finite
    ModelGrads<double> grads = model_backward(a, Mat<double>(Mat<double>::Ones(3, 5)));
    for_each_param(grads, [](const std::string&, auto& m) {
        if (m.size() > 0) CHECK(std::isfinite(m.cwiseAbs().maxCoeff()));
    });

    // eval-mode inference ignores dropout entirely
    auto e1 = encode_utterance(cfg, p, x);
    auto e2 = encode_utterance(cfg, p, x);
    CHECK(oracle::max_abs_diff(e1.logits, e2.logits) == 0.0);
}

TEST_CASE("sgd hand values") {
    // single scalar parameter: p=1, g=2, lr=0.1 -> 0.8
    ModelParams<double> p;
    p.frontend_w = Mat<double>::Constant(1, 1, 1.0);
    p.frontend_b = Vec<double>::Zero(0);
    p.classifier_w = Mat<double>(0, 0);
    p.classifier_b = Vec<double>::Zero(0);
    ModelGrads<double> g = p;
    g.frontend_w(0, 0) = 2.0;
    sgd_step(p, g, 0.1);
    CHECK(p.frontend_w(0, 0) == doctest::Approx(0.8).epsilon(1e-15));

    sgd_step(p, g, 0.0);  // lr=0 is a no-op
    CHECK(p.frontend_w(0, 0) == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("sgd minimizes a quadratic") {
    ModelParams<double> p;
    p.frontend_w = Mat<double>::Zero(1, 1);
    p.frontend_b = Vec<double>::Zero(0);
    p.classifier_w = Mat<double>(0, 0);
    p.classifier_b = Vec<double>::Zero(0);
    ModelGrads<double> g = p;
    for (int i = 0; i < 200; ++i) {
        g.frontend_w(0, 0) = p.frontend_w(0, 0) - 3.0;  // d/dw of 0.5(w-3)^2
        sgd_step(p, g, 0.3);
    }
    CHECK(std::abs(p.frontend_w(0, 0) - 3.0) < 1e-6);
}

TEST_CASE("sgd validates the gradient layout") {
    ModelConfig cfg = toy_config(Variant::full_context, 2, 2);
    auto p = init_params<double>(cfg, 619);
    auto g = init_params<double>(cfg, 620);
    g.layers.pop_back();
    CHECK_THROWS_AS(sgd_step(p, g, 0.1), ShapeError);
}

TEST_CASE("synthetic tasks are deterministic in their seed") {
    SyntheticTask task;
    task.kind = TaskKind::long_range_recall;
    TaskData<double> a = generate_task<double>(task);
    TaskData<double> b = generate_task<double>(task);
    CHECK(oracle::max_abs_diff(a.features.frames, b.features.frames) == 0.0);
    CHECK(a.labels == b.labels);

    SyntheticTask other = task;
    other.seed = 2;
    TaskData<double> c = generate_task<double>(other);
    CHECK(oracle::max_abs_diff(a.features.frames, c.features.frames) > 0.0);
}

TEST_CASE("local pattern puts the class in the frame itself") {
    SyntheticTask task;
    task.kind = TaskKind::local_pattern;
    task.t = 32;
    TaskData<double> data = generate_task<double>(task);
    REQUIRE(data.labels.size() == 32);
    for (Index j = 0; j < 32; ++j) {
        const Index label = data.labels[static_cast<size_t>(j)];
        CHECK(label >= 0);
        CHECK(label < task.num_classes);
        // the labeled dim carries the +2 bump over 0.3-sigma noise
        CHECK(data.features.frames(label, j) > 0.5);
    }
}

TEST_CASE("long-range recall hides the label at the far end of the utterance") {
    SyntheticTask task;  // defaults: t=48, segment_len=8, classes 5
    TaskData<double> data = generate_task<double>(task);
    const Index cue = data.labels.back();
    CHECK(cue >= 1);
    CHECK(cue < 5);
    for (Index j = 0; j < 40; ++j) CHECK(data.labels[static_cast<size_t>(j)] == 0);
    for (Index j = 40; j < 48; ++j) CHECK(data.labels[static_cast<size_t>(j)] == cue);
    // cue bump lives in the first segment only
    double first_mean = 0, rest_mean = 0;
    for (Index j = 0; j < 8; ++j) first_mean += data.features.frames(cue - 1, j);
    for (Index j = 8; j < 40; ++j) rest_mean += data.features.frames(cue - 1, j);
    CHECK(first_mean / 8 > 1.0);
    CHECK(std::abs(rest_mean / 32) < 1.0);
    // the final segment is marked so the model knows when to answer
    double marker = 0;
    for (Index j = 40; j < 48; ++j) marker += data.features.frames(7, j);
    CHECK(marker / 8 > 1.0);
}

TEST_CASE("task parameter validation") {
    SyntheticTask task;
    task.t = 16;  // two segments: cue and answer would touch
    CHECK_THROWS_AS(generate_task<double>(task), ParameterError);

    SyntheticTask local;
    local.kind = TaskKind::local_pattern;
    local.input_dim = 3;
    local.num_classes = 5;
    CHECK_THROWS_AS(generate_task<double>(local), ParameterError);

    SyntheticTask one;
    one.num_classes = 1;
    CHECK_THROWS_AS(generate_task<double>(one), ParameterError);

    CHECK(task_kind_from_string("local_pattern") == TaskKind::local_pattern);
    CHECK_THROWS_AS(task_kind_from_string("nope"), ConfigError);
}

TEST_CASE("a linear model solves the local task but not the long-range one") {
    // local: frames are linearly separable by construction
    {
        SyntheticTask task;
        task.kind = TaskKind::local_pattern;
        Mat<double> x(8, 48 * 20);
        std::vector<Index> labels;
        for (int u = 0; u < 20; ++u) {
            SyntheticTask draw = task;
            draw.seed = 100 + static_cast<uint64_t>(u);
            TaskData<double> d = generate_task<double>(draw);
            x.middleCols(u * 48, 48) = d.features.frames;
            labels.insert(labels.end(), d.labels.begin(), d.labels.end());
        }
        CHECK(oracle::logistic_fit_accuracy(x, labels, 5) >= 0.95);
    }
    // long-range: the answer frames carry no information about the cue, so a
    // per-frame model stays at chance (1/4 over the four cue classes)
    {
        SyntheticTask task;
        Mat<double> x(8, 8 * 200);
        std::vector<Index> labels;
        for (int u = 0; u < 200; ++u) {
            SyntheticTask draw = task;
            draw.seed = 1000 + static_cast<uint64_t>(u);
            TaskData<double> d = generate_task<double>(draw);
            x.middleCols(u * 8, 8) = d.features.frames.rightCols(8);
            labels.insert(labels.end(), d.labels.end() - 8, d.labels.end());
        }
        const double acc = oracle::logistic_fit_accuracy(x, labels, 5);
        CHECK(acc < 0.25 + 0.05);
        CHECK(acc > 0.25 - 0.05);
    }
}

TEST_CASE("training with zero learning rate changes nothing") {
    ModelConfig cfg = toy_config(Variant::aug_mem, 1, 2);
    cfg.input_dim = 8;
    cfg.output_classes = 5;
    cfg.segment_b = 8;
    SyntheticTask task;
    task.kind = TaskKind::local_pattern;
    task.t = 24;

    std::ostringstream log;
    TrainResult<double> res = train<double>(cfg, task, 3, 0.0, 99, &log, 4);
    REQUIRE(res.history.size() == 3);
    CHECK(res.history[0].loss == res.history[1].loss);
    CHECK(res.history[1].loss == res.history[2].loss);

    auto fresh = init_params<double>(cfg, 99);
    CHECK(oracle::max_abs_diff(res.params.frontend_w, fresh.frontend_w) == 0.0);
    CHECK(oracle::max_abs_diff(res.params.classifier_w, fresh.classifier_w) == 0.0);

    const std::string line = log.str();
    CHECK(line.find("epoch=0 loss=") != std::string::npos);
    CHECK(line.find(" acc=") != std::string::npos);
}

TEST_CASE("training histories are bitwise reproducible") {
    ModelConfig cfg = toy_config(Variant::aug_mem, 1, 2);
    cfg.input_dim = 8;
    cfg.output_classes = 5;
    cfg.segment_b = 8;
    SyntheticTask task;
    task.kind = TaskKind::local_pattern;
    task.t = 24;

    TrainResult<double> a = train<double>(cfg, task, 3, 0.05, 7, nullptr, 4);
    TrainResult<double> b = train<double>(cfg, task, 3, 0.05, 7, nullptr, 4);
    REQUIRE(a.history.size() == b.history.size());
    for (size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].loss == b.history[i].loss);
        CHECK(a.history[i].acc == b.history[i].acc);
    }
    CHECK(oracle::max_abs_diff(a.params.frontend_w, b.params.frontend_w) == 0.0);
    CHECK(oracle::max_abs_diff(a.params.layers[0].ffn_w1, b.params.layers[0].ffn_w1) == 0.0);
}

TEST_CASE("training rejects a frontend that drops frames") {
    ModelConfig cfg = toy_config(Variant::full_context, 1, 2);
    cfg.input_dim = 8;
    cfg.output_classes = 5;
    cfg.frontend_window = 2;
    cfg.frontend_stride = 2;
    SyntheticTask task;
    task.kind = TaskKind::local_pattern;
    task.t = 24;
    CHECK_THROWS_AS(train<double>(cfg, task, 1, 0.05, 1, nullptr, 2), ConfigError);
}

TEST_CASE("a small transformer learns the local pattern task") {
    ModelConfig cfg;
    cfg.input_dim = 8;
    cfg.output_classes = 5;
    cfg.num_layers = 2;
    cfg.d_model = 16;
    cfg.num_heads = 2;
    cfg.ffn_dim = 32;
    cfg.variant = Variant::aug_mem;
    cfg.segment_b = 8;
    cfg.context_l = 0;
    cfg.context_r = 0;

    SyntheticTask task;
    task.kind = TaskKind::local_pattern;
    task.t = 48;

    TrainResult<double> res = train<double>(cfg, task, 25, 0.1, 11, nullptr, 16);
    CHECK(res.history.back().acc >= 0.90);
    CHECK(res.history.back().loss < res.history.front().loss);

    // held-out utterances, not the training pool
    SyntheticTask eval = task;
    const double acc = evaluate_final_accuracy(cfg, res.params, eval, 20, 5000);
    CHECK(acc >= 0.80);
}
