// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#pragma once

#include <algorithm>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lirf/blocknet.hpp"
#include "lirf/datasets.hpp"
#include "lirf/losses.hpp"
#include "lirf/training.hpp"

namespace lirf {

/// Anything that maps an input batch to class logits.
template <class P>
concept Predictor = requires(const P& p, const Tensor& x) {
    { p.logits(x) } -> std::same_as<Tensor>;
};

/// Row-wise argmax; ties go to the lowest class index.
inline std::vector<std::size_t> argmax_rows(const Tensor& logits) {
    const std::size_t B = logits.dim(0), K = logits.dim(1);
    std::vector<std::size_t> out(B);
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k) {
            if (logits.data()[b * K + k] > logits.data()[b * K + best]) best = k;
        }
        out[b] = best;
    }
    return out;
}

struct AccuracyCount {
    std::size_t correct = 0;
    std::size_t total = 0;
    double percent() const { return total ? 100.0 * static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Correct-prediction counts per true class.
template <Predictor P>
std::vector<AccuracyCount> per_class_counts(const P& predictor, const SampleSource& data,
                                            std::size_t batch_size = 256) {
    NoGradGuard ng;
    std::vector<AccuracyCount> counts(data.num_classes());
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        Batch b = make_batch(data, start, std::min(data.size(), start + batch_size));
        Tensor z = predictor.logits(b.x);
        if (z.rank() != 2 || z.dim(1) != data.num_classes()) {
            throw ShapeError("accuracy: predictor emits " + shape_str(z.shape()) + " for " +
                             std::to_string(data.num_classes()) + " classes");
        }
        const auto pred = argmax_rows(z);
        for (std::size_t i = 0; i < pred.size(); ++i) {
            auto& c = counts[static_cast<std::size_t>(b.y[i])];
            ++c.total;
            if (pred[i] == static_cast<std::size_t>(b.y[i])) ++c.correct;
        }
    }
    return counts;
}

template <Predictor P>
double accuracy(const P& predictor, const SampleSource& data) {
    AccuracyCount all;
    for (const auto& c : per_class_counts(predictor, data)) {
        all.correct += c.correct;
        all.total += c.total;
    }
    return all.percent();
}

inline double forgetting_f(double dep_acc_before, double dep_acc_after) { return dep_acc_before - dep_acc_after; }

/// Harmonic mean of preservation accuracy and forgetting; 0 when degenerate.
inline double h_mean(double pre_acc, double f) {
    const double denom = pre_acc + f;
    if (denom <= 0.0) return 0.0;
    return 2.0 * pre_acc * f / denom;
}

struct MetricsReport {
    double pre_acc = 0.0;
    double dep_acc = 0.0;
    double avg_acc = 0.0;
    double f = 0.0;
    double h_mean = 0.0;
    std::size_t n_pre = 0;
    std::size_t n_dep = 0;

    nlohmann::json to_json() const {
        return {{"pre_acc", pre_acc}, {"dep_acc", dep_acc}, {"avg_acc", avg_acc}, {"f", f},
                {"h_mean", h_mean},   {"n_pre", n_pre},     {"n_dep", n_dep}};
    }
    static MetricsReport from_json(const nlohmann::json& j) {
        MetricsReport m;
        m.pre_acc = j.at("pre_acc");
        m.dep_acc = j.at("dep_acc");
        m.avg_acc = j.at("avg_acc");
        m.f = j.at("f");
        m.h_mean = j.at("h_mean");
        m.n_pre = j.at("n_pre");
        m.n_dep = j.at("n_dep");
        return m;
    }
};

inline MetricsReport metrics_from_counts(const std::vector<AccuracyCount>& counts, const ClassPartition& part,
                                         std::optional<double> dep_acc_before = std::nullopt) {
    AccuracyCount pre, dep;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        auto& side = part.is_deposit(c) ? dep : pre;
        side.correct += counts[c].correct;
        side.total += counts[c].total;
    }
    MetricsReport m;
    m.pre_acc = pre.percent();
    m.dep_acc = dep.percent();
    m.n_pre = pre.total;
    m.n_dep = dep.total;
    m.avg_acc = AccuracyCount{pre.correct + dep.correct, pre.total + dep.total}.percent();
    if (dep_acc_before) {
        m.f = forgetting_f(*dep_acc_before, m.dep_acc);
        m.h_mean = h_mean(m.pre_acc, m.f);
    }
    return m;
}

/// Pre/Dep/Avg accuracy on a test set; F and H Mean when the deposit-side
/// accuracy before forgetting is known.
template <Predictor P>
MetricsReport evaluate(const P& predictor, const SampleSource& test, const ClassPartition& part,
                       std::optional<double> dep_acc_before = std::nullopt) {
    return metrics_from_counts(per_class_counts(predictor, test), part, dep_acc_before);
}

// ---- distillation attack ---------------------------------------------------------

enum class AttackMode { Logit, Attention };

inline const char* to_string(AttackMode m) { return m == AttackMode::Logit ? "logit" : "attention"; }
inline AttackMode attack_mode_from_string(const std::string& s) {
    if (s == "logit") return AttackMode::Logit;
    if (s == "attention") return AttackMode::Attention;
    throw ConfigError("mode", "unknown attack mode '" + s + "'");
}

/// Small plain CNN used as the default attack student.
inline BlockSpec plain_student_spec(Shape input, std::size_t num_classes) {
    BlockSpec s;
    s.input = std::move(input);
    s.blocks = {{BlockKind::ConvReluPool, 8}, {BlockKind::ConvReluPool, 16}, {BlockKind::ConvRelu, 16}};
    s.split = 2;
    s.num_classes = num_classes;
    return s;
}

struct AttackConfig {
    std::optional<BlockSpec> student; // plain student when unset
    AttackMode mode = AttackMode::Logit;
    double temperature = 4.0;
    double distill_weight = 1.0;
    std::size_t epochs = 10;
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw ConfigError("attack.epochs", "must be >= 1");
        if (!(temperature > 0.0)) throw ConfigError("attack.temperature", "must be > 0");
        if (distill_weight < 0.0) throw ConfigError("attack.distill_weight", "must be >= 0");
    }
};

/// Student objective on one batch: CE against ground truth plus the weighted
/// distillation term. Teacher outputs are constants.
inline Tensor attack_step_loss(const BlockNet& student, const Tensor& x, const std::vector<int>& y,
                               const Tensor& teacher_out, const AttackConfig& cfg) {
    if (cfg.mode == AttackMode::Logit) {
        Tensor z = student.forward_full(x);
        Tensor ce = loss_ce(z, y);
        if (cfg.distill_weight == 0.0) return ce;
        return ce + scale(loss_kd(z, teacher_out, cfg.temperature), cfg.distill_weight);
    }
    Tensor f = student.forward_lower(x);
    Tensor ce = loss_ce(student.forward_upper(f), y);
    if (cfg.distill_weight == 0.0) return ce;
    Tensor a = attention_map(f);
    if (a.shape() != teacher_out.shape()) {
        throw ShapeError("attack: student tap " + shape_str(f.shape()) + " gives attention " +
                         shape_str(a.shape()) + ", teacher gives " + shape_str(teacher_out.shape()));
    }
    Tensor d = a - teacher_out;
    return ce + scale(sum(square(d)), cfg.distill_weight / static_cast<double>(x.dim(0)));
}

/// Teacher outputs for every training sample: logits, or the unfiltered
/// attention map at the teacher's split.
inline Tensor teacher_targets(const BlockNet& teacher, const SampleSource& data, AttackMode mode) {
    NoGradGuard ng;
    std::vector<double> all;
    std::size_t width = 0;
    for (std::size_t start = 0; start < data.size(); start += 256) {
        Batch b = make_batch(data, start, std::min(data.size(), start + 256));
        Tensor out = mode == AttackMode::Logit ? teacher.forward_full(b.x)
                                               : attention_map(teacher.forward_lower(b.x));
        width = out.dim(1);
        all.insert(all.end(), out.data().begin(), out.data().end());
    }
    return Tensor(Shape{data.size(), width}, std::move(all));
}

/// Trains a fresh student from `teacher` on `train` and reports its accuracy
/// on `test`. The student never sees teacher gradients.
inline MetricsReport attack_distill(const BlockNet& teacher, const AttackConfig& cfg, const SampleSource& train,
                                    const SampleSource& test, const ClassPartition& part,
                                    BlockNet* student_out = nullptr) {
    cfg.validate();
    BlockSpec spec = cfg.student ? *cfg.student : plain_student_spec(train.sample_shape(), train.num_classes());
    BlockNet student = BlockNet::init(spec, cfg.seed ^ 0x5bd1e995ULL);
    const Tensor targets = teacher_targets(teacher, train, cfg.mode);
    if (cfg.mode == AttackMode::Attention) {
        const Shape ts = teacher.spec().feature_shape(teacher.split());
        const Shape ss = spec.feature_shape(spec.split);
        if (ts.size() != 3 || ss.size() != 3 || ts[1] * ts[2] != ss[1] * ss[2]) {
            throw ShapeError("attack: student tap " + shape_str(ss) + " incompatible with teacher tap " +
                             shape_str(ts));
        }
    }
    const std::size_t width = targets.dim(1);
    TrainConfig tc{cfg.epochs, cfg.learning_rate, cfg.momentum, cfg.batch_size, cfg.seed, false};
    run_minibatch_sgd(train, tc, student.trainable_parameters(),
                      [&](const Batch& b, std::span<const std::size_t> idx) {
                          std::vector<double> t;
                          t.reserve(idx.size() * width);
                          for (std::size_t i : idx) {
                              auto row = targets.data().subspan(i * width, width);
                              t.insert(t.end(), row.begin(), row.end());
                          }
                          return attack_step_loss(student, b.x, b.y, Tensor(Shape{idx.size(), width}, std::move(t)),
                                                  cfg);
                      });
    MetricsReport m = evaluate(student, test, part);
    if (student_out) *student_out = std::move(student);
    return m;
}

// ---- feature export ------------------------------------------------------------

enum class FeatureTap { Split, Final };

/// CSV with header f0..fk,label and one row per sample.
inline std::size_t export_features(const BlockNet& net, const SampleSource& data, FeatureTap tap,
                                   const std::filesystem::path& path) {
    NoGradGuard ng;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path.string());
    out.precision(17);
    std::size_t rows = 0;
    for (std::size_t start = 0; start < data.size(); start += 256) {
        Batch b = make_batch(data, start, std::min(data.size(), start + 256));
        Tensor f = flatten(tap == FeatureTap::Split ? net.forward_lower(b.x) : net.forward_full(b.x));
        const std::size_t width = f.dim(1);
        if (start == 0) {
            for (std::size_t k = 0; k < width; ++k) out << 'f' << k << ',';
            out << "label\n";
        }
        for (std::size_t r = 0; r < f.dim(0); ++r, ++rows) {
            for (std::size_t k = 0; k < width; ++k) out << f.data()[r * width + k] << ',';
            out << b.y[r] << '\n';
        }
    }
    return rows;
}

} // namespace lirf
