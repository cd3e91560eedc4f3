// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "test_util.hpp"

using namespace lirf;
using lirf::testing::randn;
using lirf::testing::scratch_dir;
using lirf::testing::tiny_dataset;
using lirf::testing::tiny_spec;

namespace {

// Predictor that returns a one-hot row for a fixed label lookup.
struct OneHot {
    const LabeledDataset* data;
    Tensor logits(const Tensor& x) const {
        // Identify the sample by exact match of its first value.
        const std::size_t B = x.dim(0), n = x.size() / B, C = data->num_classes();
        std::vector<double> z(B * C, 0.0);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < data->size(); ++i)
                if (data->samples()[i * n] == x.data()[b * n]) {
                    z[b * C + static_cast<std::size_t>(data->labels()[i])] = 1.0;
                    break;
                }
        return Tensor(Shape{B, C}, std::move(z));
    }
};

struct Constant {
    std::size_t C;
    Tensor logits(const Tensor& x) const { return Tensor(Shape{x.dim(0), C}, 0.5); }
};

struct Wrong {
    Tensor logits(const Tensor& x) const { return Tensor(Shape{x.dim(0), 3}, 0.0); }
};

LabeledDataset balanced(std::size_t C, std::size_t per) {
    SyntheticParams p;
    p.num_classes = C;
    p.shape = {1, 4, 4};
    return gen_synthetic(p, per, 3);
}

} // namespace

TEST(Metrics, ReferenceValues) {
    EXPECT_NEAR(forgetting_f(94.60, 15.00), 79.60, 1e-9);
    EXPECT_NEAR(forgetting_f(48.60, 1.18), 47.42, 1e-9);
    EXPECT_EQ(forgetting_f(37.5, 37.5), 0.0);
    EXPECT_NEAR(h_mean(93.41, 79.60), 85.95, 0.01);
    EXPECT_NEAR(h_mean(51.64, 47.42), 49.44, 0.01);
}

TEST(Metrics, HarmonicMeanProperties) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 100.0);
    for (int t = 0; t < 200; ++t) {
        const double a = u(rng), b = u(rng);
        EXPECT_NEAR(h_mean(a, b), h_mean(b, a), 1e-12);
        EXPECT_LE(h_mean(a, b), 2 * std::min(a, b) + 1e-12);
        EXPECT_NEAR(h_mean(a, a), a, 1e-12);
    }
    EXPECT_EQ(h_mean(0, 0), 0.0);
    EXPECT_EQ(h_mean(10, -10), 0.0);
    EXPECT_EQ(h_mean(5, -20), 0.0);
}

TEST(Accuracy, OneHotAndConstantPredictors) {
    auto d = balanced(10, 4);
    EXPECT_EQ(accuracy(OneHot{&d}, d), 100.0);
    // All-equal logits pick class 0, which holds a tenth of a balanced set.
    EXPECT_NEAR(accuracy(Constant{10}, d), 10.0, 1e-12);
    EXPECT_THROW(accuracy(Wrong{}, d), ShapeError);
}

TEST(Accuracy, ArgmaxTiesGoLow) {
    Tensor z({3, 4}, std::vector<double>{1, 3, 3, 0, 2, 2, 2, 2, -1, -5, -1, 0});
    EXPECT_EQ(argmax_rows(z), (std::vector<std::size_t>{1, 0, 3}));
}

TEST(Accuracy, MatchesLoopOracleAndWeightedAverage) {
    auto data = tiny_dataset(7, 5);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto net = BlockNet::init(tiny_spec(4), seed);
        auto part = ClassPartition::from_deposit(4, {seed % 4});
        auto m = evaluate(net, data, part, 80.0);
        // One sample at a time.
        std::size_t ok_pre = 0, n_pre = 0, ok_dep = 0, n_dep = 0;
        for (std::size_t i = 0; i < data.size(); ++i) {
            Batch b = make_batch(data, i, i + 1);
            auto z = net.forward_full(b.x).values();
            std::size_t best = 0;
            for (std::size_t k = 1; k < z.size(); ++k)
                if (z[k] > z[best]) best = k;
            const bool dep = part.is_deposit(static_cast<std::size_t>(b.y[0]));
            (dep ? n_dep : n_pre)++;
            if (best == static_cast<std::size_t>(b.y[0])) (dep ? ok_dep : ok_pre)++;
        }
        EXPECT_NEAR(m.pre_acc, 100.0 * ok_pre / n_pre, 1e-9);
        EXPECT_NEAR(m.dep_acc, 100.0 * ok_dep / n_dep, 1e-9);
        EXPECT_EQ(m.n_pre, n_pre);
        EXPECT_EQ(m.n_dep, n_dep);
        EXPECT_NEAR(m.avg_acc, (n_pre * m.pre_acc + n_dep * m.dep_acc) / (n_pre + n_dep), 1e-9);
        EXPECT_NEAR(m.f, 80.0 - m.dep_acc, 1e-12);
        EXPECT_NEAR(m.h_mean, h_mean(m.pre_acc, m.f), 1e-12);
        for (double v : {m.pre_acc, m.dep_acc, m.avg_acc}) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 100.0);
        }
        EXPECT_NEAR(MetricsReport::from_json(m.to_json()).avg_acc, m.avg_acc, 0.0);
    }
}

TEST(Attack, ZeroDistillWeightIsPlainCe) {
    auto data = tiny_dataset(2, 1);
    auto student = BlockNet::init(tiny_spec(4), 2);
    Batch b = make_batch(data, 0, data.size());
    std::mt19937_64 rng(3);
    Tensor teacher({data.size(), 4}, randn(data.size() * 4, rng));
    AttackConfig cfg;
    cfg.distill_weight = 0.0;
    EXPECT_EQ(attack_step_loss(student, b.x, b.y, teacher, cfg).item(),
              loss_ce(student.forward_full(b.x), b.y).item());
    cfg.distill_weight = 2.0;
    EXPECT_NEAR(attack_step_loss(student, b.x, b.y, teacher, cfg).item(),
                loss_ce(student.forward_full(b.x), b.y).item() +
                    2.0 * loss_kd(student.forward_full(b.x), teacher, cfg.temperature).item(),
                1e-12);
    cfg.mode = AttackMode::Attention;
    cfg.distill_weight = 0.0;
    EXPECT_EQ(attack_step_loss(student, b.x, b.y, teacher, cfg).item(),
              loss_ce(student.forward_full(b.x), b.y).item());
}

TEST(Attack, AttentionModeUsesUnfilteredMaps) {
    auto data = tiny_dataset(2, 1);
    auto student = BlockNet::init(tiny_spec(4), 2);
    Batch b = make_batch(data, 0, data.size());
    AttackConfig cfg;
    cfg.mode = AttackMode::Attention;
    Tensor a = attention_map(student.forward_lower(b.x));
    Tensor zero(a.shape(), 0.0);
    const double ce = loss_ce(student.forward_full(b.x), b.y).item();
    // Against an all-zero teacher map the penalty is the squared norm of the
    // student's unit maps, i.e. exactly 1 per sample.
    EXPECT_NEAR(attack_step_loss(student, b.x, b.y, zero, cfg).item(), ce + 1.0, 1e-12);
    EXPECT_THROW(attack_step_loss(student, b.x, b.y, Tensor({data.size(), 3}, 0.0), cfg), ShapeError);
}

TEST(Attack, ShapeAndConfigErrors) {
    auto data = tiny_dataset(2, 1);
    auto teacher = BlockNet::init(tiny_spec(4), 1);
    auto part = ClassPartition::from_deposit(4, {0});
    AttackConfig cfg;
    cfg.epochs = 1;
    cfg.mode = AttackMode::Attention;
    BlockSpec s = tiny_spec(4);
    s.blocks = {{BlockKind::ConvRelu, 3}, {BlockKind::ConvReluPool, 4}};
    cfg.student = s; // split tap 6x6 vs teacher 3x3
    EXPECT_THROW(attack_distill(teacher, cfg, data, data, part), ShapeError);
    cfg.student.reset();
    cfg.epochs = 0;
    EXPECT_THROW(attack_distill(teacher, cfg, data, data, part), ConfigError);
    cfg.epochs = 1;
    cfg.temperature = 0;
    EXPECT_THROW(attack_distill(teacher, cfg, data, data, part), ConfigError);
    EXPECT_THROW(attack_mode_from_string("feature"), ConfigError);
    EXPECT_EQ(attack_mode_from_string("attention"), AttackMode::Attention);
}

TEST(Attack, DeterministicAndTeacherUntouched) {
    auto data = tiny_dataset(4, 1);
    auto teacher = BlockNet::init(tiny_spec(4), 1);
    const auto before = teacher.to_checkpoint().to_bytes();
    auto part = ClassPartition::from_deposit(4, {0});
    AttackConfig cfg;
    cfg.epochs = 2;
    cfg.student = tiny_spec(4);
    BlockNet s1, s2;
    auto a = attack_distill(teacher, cfg, data, data, part, &s1);
    auto b = attack_distill(teacher, cfg, data, data, part, &s2);
    EXPECT_EQ(a.to_json(), b.to_json());
    EXPECT_EQ(s1.to_checkpoint().to_bytes(), s2.to_checkpoint().to_bytes());
    EXPECT_EQ(teacher.to_checkpoint().to_bytes(), before);
    cfg.mode = AttackMode::Attention;
    EXPECT_NO_THROW(attack_distill(teacher, cfg, data, data, part));
}

TEST(Features, RowsWidthsDeterminism) {
    auto data = tiny_dataset(3, 1);
    auto net = BlockNet::init(tiny_spec(4), 1);
    auto dir = scratch_dir("features");
    EXPECT_EQ(export_features(net, data, FeatureTap::Final, dir / "final.csv"), data.size());
    EXPECT_EQ(export_features(net, data, FeatureTap::Split, dir / "split.csv"), data.size());
    export_features(net, data, FeatureTap::Final, dir / "again.csv");
    auto slurp = [](const std::filesystem::path& p) {
        std::ifstream in(p);
        return std::string((std::istreambuf_iterator<char>(in)), {});
    };
    EXPECT_EQ(slurp(dir / "final.csv"), slurp(dir / "again.csv"));
    std::ifstream in(dir / "final.csv");
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "f0,f1,f2,f3,label");
    std::size_t lines = 0;
    for (std::string l; std::getline(in, l);) ++lines;
    EXPECT_EQ(lines, data.size());
    std::ifstream sp(dir / "split.csv");
    std::getline(sp, header);
    EXPECT_EQ(static_cast<std::size_t>(std::count(header.begin(), header.end(), ',')), numel(tiny_spec(4).feature_shape(1)));
}
