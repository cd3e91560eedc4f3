// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#include <gtest/gtest.h>

#include <random>

#include "test_util.hpp"

using namespace lirf;
using lirf::testing::fd_rel_error;
using lirf::testing::rand_param;
using lirf::testing::randn;

namespace {

constexpr int kTrials = 20;
constexpr double kTol = 1e-4;

// Keeps values away from 0 so relu/sqrt/log kinks are not straddled by the
// finite-difference step.
Tensor away_from_zero(Shape s, std::mt19937_64& rng) {
    auto v = randn(numel(s), rng);
    for (auto& x : v) x = (x >= 0 ? 0.2 : -0.2) + x;
    return Tensor::parameter(std::move(s), std::move(v));
}

Tensor positive(Shape s, std::mt19937_64& rng) {
    auto v = randn(numel(s), rng);
    for (auto& x : v) x = 0.5 + std::abs(x);
    return Tensor::parameter(std::move(s), std::move(v));
}

// Weighted sum so every output element gets a distinct upstream gradient.
Tensor probe(const Tensor& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor w(y.shape(), randn(y.size(), rng));
    return sum(y * w);
}

} // namespace

TEST(Tensor, ShapeAndValueChecks) {
    EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    Tensor t(Shape{2, 3}, 1.5);
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t.rank(), 2u);
    EXPECT_THROW(t.item(), ShapeError);
    EXPECT_DOUBLE_EQ(Tensor::scalar(4.0).item(), 4.0);
    EXPECT_EQ(shape_str({2, 3}), "[2x3]");
}

TEST(Tensor, BackwardRejectsNonScalarAndNonFinite) {
    Tensor p = Tensor::parameter({2}, {1.0, 2.0});
    EXPECT_THROW(backward(p * p), ShapeError);
    Tensor bad = Tensor::parameter({1}, {-1.0});
    EXPECT_THROW(backward(sum(log(bad))), NumericError);
}

TEST(Tensor, GradientsAccumulateOnLeaves) {
    Tensor p = Tensor::parameter({3}, {1.0, -2.0, 3.0});
    backward(sum(p * p));
    backward(sum(p * p));
    const auto g = p.grad();
    EXPECT_DOUBLE_EQ(g[0], 4.0);
    EXPECT_DOUBLE_EQ(g[1], -8.0);
    EXPECT_DOUBLE_EQ(g[2], 12.0);
}

TEST(Tensor, DiamondGraphSumsBothPaths) {
    Tensor p = Tensor::parameter({1}, {3.0});
    Tensor a = p * p;      // 9
    Tensor b = scale(p, 2); // 6
    backward(sum(a * b)); // 2 p^3 -> 6 p^2 = 54
    EXPECT_DOUBLE_EQ(p.grad()[0], 54.0);
}

TEST(Tensor, NoGradGuardBuildsNoGraph) {
    Tensor p = Tensor::parameter({2}, {1.0, 2.0});
    Tensor y;
    {
        NoGradGuard ng;
        EXPECT_FALSE(grad_enabled());
        y = p * p;
    }
    EXPECT_TRUE(grad_enabled());
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.is_leaf());
}

TEST(Tensor, CloneAndDetachAreIndependent) {
    Tensor p = Tensor::parameter({2}, {1.0, 2.0});
    Tensor c = p.clone();
    Tensor d = p.detach();
    c.mutable_data()[0] = 9.0;
    EXPECT_DOUBLE_EQ(p[0], 1.0);
    EXPECT_TRUE(c.requires_grad());
    EXPECT_FALSE(d.requires_grad());
    EXPECT_FALSE(c.same_node(p));
}

TEST(Ops, BroadcastForwardValues) {
    Tensor a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor row(Shape{1, 3}, {10, 20, 30});
    Tensor col(Shape{2, 1}, {100, 200});
    EXPECT_EQ((a + row).values(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
    EXPECT_EQ((a + col).values(), (std::vector<double>{101, 102, 103, 204, 205, 206}));
    EXPECT_EQ((a * Tensor::scalar(2)).values(), (std::vector<double>{2, 4, 6, 8, 10, 12}));
    EXPECT_THROW(a + Tensor(Shape{3, 2}), ShapeError);
}

TEST(Ops, ReductionsAndShapes) {
    Tensor a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_DOUBLE_EQ(sum(a).item(), 21.0);
    EXPECT_DOUBLE_EQ(mean(a).item(), 3.5);
    EXPECT_EQ(sum_axis(a, 0).values(), (std::vector<double>{5, 7, 9}));
    EXPECT_EQ(sum_axis(a, 1).values(), (std::vector<double>{6, 15}));
    EXPECT_EQ(reshape(a, {3, 2}).shape(), (Shape{3, 2}));
    EXPECT_THROW(reshape(a, {4, 2}), ShapeError);
    EXPECT_EQ(index_select(a, 1, {2, 0}).values(), (std::vector<double>{3, 1, 6, 4}));
    EXPECT_EQ(concat({a, a}, 0).shape(), (Shape{4, 3}));
    EXPECT_EQ(concat({a, a}, 1).values(), (std::vector<double>{1, 2, 3, 1, 2, 3, 4, 5, 6, 4, 5, 6}));
    EXPECT_EQ(pick(a, {2, 0}).values(), (std::vector<double>{3, 4}));
}

TEST(Ops, LogSoftmaxRowsNormalizeAndAreShiftInvariant) {
    std::mt19937_64 rng(3);
    Tensor z(Shape{4, 5}, randn(20, rng, 3.0));
    Tensor ls = log_softmax(z);
    for (std::size_t r = 0; r < 4; ++r) {
        double s = 0;
        for (std::size_t k = 0; k < 5; ++k) s += std::exp(ls.data()[r * 5 + k]);
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
    Tensor shifted = log_softmax(z + 1000.0);
    for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(shifted[i], ls[i], 1e-9);
}

TEST(Ops, L2NormalizeRowsHandlesZeroRow) {
    Tensor a(Shape{2, 2}, {3, 4, 0, 0});
    Tensor n = l2_normalize_rows(a);
    EXPECT_NEAR(n[0], 0.6, 1e-15);
    EXPECT_NEAR(n[1], 0.8, 1e-15);
    EXPECT_EQ(n[2], 0.0);
    EXPECT_EQ(n[3], 0.0);
}

TEST(Ops, WhereColumnsPicksExactValues) {
    Tensor a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b(Shape{2, 3}, {-1, -2, -3, -4, -5, -6});
    EXPECT_EQ(where_columns(a, b, {true, false, true}).values(), (std::vector<double>{-1, 2, -3, -4, 5, -6}));
}

TEST(Ops, MaskBelowZeroesSmallEntries) {
    Tensor a(Shape{4}, {0.01, 0.05, 0.2, -1.0});
    EXPECT_EQ(mask_below(a, 0.05).values(), (std::vector<double>{0.0, 0.05, 0.2, 0.0}));
}

// Brute-force direct convolution oracle.
TEST(Ops, Conv2dMatchesDirectLoops) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t B = 2, C = 1 + trial % 3, H = 5 + trial % 2, W = 4 + trial % 3, O = 2 + trial % 2, K = 3;
        const std::size_t stride = 1 + trial % 2, pad = trial % 2;
        Tensor x(Shape{B, C, H, W}, randn(B * C * H * W, rng));
        Tensor w(Shape{O, C, K, K}, randn(O * C * K * K, rng));
        Tensor b(Shape{O}, randn(O, rng));
        Tensor y = conv2d(x, w, b, stride, pad);
        const std::size_t OH = (H + 2 * pad - K) / stride + 1, OW = (W + 2 * pad - K) / stride + 1;
        ASSERT_EQ(y.shape(), (Shape{B, O, OH, OW}));
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t o = 0; o < O; ++o)
                for (std::size_t i = 0; i < OH; ++i)
                    for (std::size_t j = 0; j < OW; ++j) {
                        double acc = b[o];
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t ki = 0; ki < K; ++ki)
                                for (std::size_t kj = 0; kj < K; ++kj) {
                                    const long r = static_cast<long>(i * stride + ki) - static_cast<long>(pad);
                                    const long s = static_cast<long>(j * stride + kj) - static_cast<long>(pad);
                                    if (r < 0 || s < 0 || r >= static_cast<long>(H) || s >= static_cast<long>(W)) continue;
                                    acc += x[((n * C + c) * H + r) * W + s] * w[((o * C + c) * K + ki) * K + kj];
                                }
                        EXPECT_NEAR(y[((n * O + o) * OH + i) * OW + j], acc, 1e-12);
                    }
    }
}

TEST(Ops, Conv2dIsLinearInInput) {
    std::mt19937_64 rng(5);
    Tensor x1(Shape{1, 2, 5, 5}, randn(50, rng));
    Tensor x2(Shape{1, 2, 5, 5}, randn(50, rng));
    Tensor w(Shape{3, 2, 3, 3}, randn(54, rng));
    Tensor zero_b(Shape{3}, 0.0);
    Tensor lhs = conv2d(x1 * 2.0 + x2, w, zero_b, 1, 1);
    Tensor rhs = conv2d(x1, w, zero_b, 1, 1) * 2.0 + conv2d(x2, w, zero_b, 1, 1);
    for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-12);
}

TEST(Ops, AvgPoolFloorsOddSizes) {
    Tensor x(Shape{1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor y = avg_pool2x2(x);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_DOUBLE_EQ(y[0], 3.0);
}

TEST(Ops, LinearMatchesHandProduct) {
    Tensor x(Shape{1, 2}, {1, 2});
    Tensor w(Shape{2, 2}, {1, 1, 0, 3});
    Tensor b(Shape{2}, {0.5, -1});
    EXPECT_EQ(linear(x, w, b).values(), (std::vector<double>{3.5, 5.0}));
}

TEST(Ops, ForwardIsDeterministic) {
    std::mt19937_64 rng(1);
    Tensor x(Shape{2, 1, 8, 8}, randn(128, rng));
    Tensor w(Shape{4, 1, 3, 3}, randn(36, rng));
    Tensor b(Shape{4}, randn(4, rng));
    EXPECT_EQ(conv2d(x, w, b, 1, 1).values(), conv2d(x, w, b, 1, 1).values());
}

// ---- finite-difference checks, one per differentiable op ---------------------------

#define FD_CASE(name, ...)                                                     \
    TEST(OpsGradient, name) {                                                 \
        for (int trial = 0; trial < kTrials; ++trial) {                       \
            std::mt19937_64 rng(1000 + trial);                                \
            __VA_ARGS__                                                       \
        }                                                                     \
    }

FD_CASE(AddSubMulBroadcast, {
    Tensor a = rand_param({3, 4}, rng);
    Tensor b = rand_param({1, 4}, rng);
    Tensor c = rand_param({3, 1}, rng);
    EXPECT_LT(fd_rel_error([&] { return probe((a + b) * c - b, trial); }, {a, b, c}), kTol);
})

FD_CASE(Div, {
    Tensor a = rand_param({2, 3}, rng);
    Tensor b = positive({2, 3}, rng);
    EXPECT_LT(fd_rel_error([&] { return probe(a / b, trial); }, {a, b}), kTol);
})

FD_CASE(ScaleAddScalar, {
    Tensor a = rand_param({5}, rng);
    EXPECT_LT(fd_rel_error([&] { return probe(scale(a, -1.7) + 0.3, trial); }, {a}), kTol);
})

FD_CASE(Relu, {
    Tensor a = away_from_zero({4, 3}, rng);
    EXPECT_LT(fd_rel_error([&] { return probe(relu(a), trial); }, {a}), kTol);
})

FD_CASE(ExpLog, {
    Tensor a = rand_param({6}, rng, 0.5);
    Tensor p = positive({6}, rng);
    EXPECT_LT(fd_rel_error([&] { return probe(exp(a) + log(p), trial); }, {a, p}), kTol);
})

FD_CASE(SquareSqrt, {
    Tensor a = rand_param({6}, rng);
    Tensor p = positive({6}, rng);
    EXPECT_LT(fd_rel_error([&] { return probe(square(a) + sqrt(p), trial); }, {a, p}), kTol);
})

FD_CASE(MaskBelowAwayFromThreshold, {
    Tensor a = away_from_zero({8}, rng);
    EXPECT_LT(fd_rel_error([&] { return probe(mask_below(a, 0.0), trial); }, {a}), kTol);
})

FD_CASE(SumMeanSumAxis, {
    Tensor a = rand_param({3, 4, 2}, rng);
    EXPECT_LT(fd_rel_error([&] { return probe(sum_axis(a, 1), trial) + mean(a) * 3.0; }, {a}), kTol);
})

FD_CASE(ReshapeConcatIndexSelect, {
    Tensor a = rand_param({2, 3}, rng);
    Tensor b = rand_param({2, 2}, rng);
    EXPECT_LT(fd_rel_error([&] { return probe(index_select(concat({a, b}, 1), 1, {4, 0, 2, 0}), trial); }, {a, b}),
              kTol);
    EXPECT_LT(fd_rel_error([&] { return probe(reshape(a, {3, 2}), trial); }, {a}), kTol);
})

FD_CASE(PickLogSoftmax, {
    Tensor z = rand_param({4, 5}, rng, 2.0);
    std::vector<int> y{0, 4, 2, 2};
    EXPECT_LT(fd_rel_error([&] { return sum(pick(log_softmax(z), y)); }, {z}), kTol);
})

FD_CASE(L2NormalizeRows, {
    Tensor a = rand_param({3, 5}, rng);
    EXPECT_LT(fd_rel_error([&] { return probe(l2_normalize_rows(a), trial); }, {a}), kTol);
})

FD_CASE(WhereColumns, {
    Tensor a = rand_param({3, 4}, rng);
    Tensor b = rand_param({3, 4}, rng);
    EXPECT_LT(fd_rel_error([&] { return probe(where_columns(a, b, {true, false, false, true}), trial); }, {a, b}),
              kTol);
})

FD_CASE(Linear, {
    Tensor x = rand_param({3, 4}, rng);
    Tensor w = rand_param({2, 4}, rng);
    Tensor b = rand_param({2}, rng);
    EXPECT_LT(fd_rel_error([&] { return probe(linear(x, w, b), trial); }, {x, w, b}), kTol);
})

FD_CASE(Conv2d, {
    const std::size_t stride = 1 + trial % 2, pad = trial % 2;
    Tensor x = rand_param({2, 2, 5, 5}, rng);
    Tensor w = rand_param({3, 2, 3, 3}, rng);
    Tensor b = rand_param({3}, rng);
    EXPECT_LT(fd_rel_error([&] { return probe(conv2d(x, w, b, stride, pad), trial); }, {x, w, b}), kTol);
})

FD_CASE(AvgPool, {
    Tensor x = rand_param({2, 2, 5, 4}, rng);
    EXPECT_LT(fd_rel_error([&] { return probe(avg_pool2x2(x), trial); }, {x}), kTol);
})
