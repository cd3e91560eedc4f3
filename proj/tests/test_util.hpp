// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lirf.hpp"

namespace lirf::testing {

inline std::vector<double> randn(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

inline Tensor rand_param(Shape s, std::mt19937_64& rng, double scale = 1.0) {
    const std::size_t n = numel(s);
    return Tensor::parameter(std::move(s), randn(n, rng, scale));
}

/// Largest per-input relative error between the autodiff gradient and a
/// central difference: |g - g_fd| / max(|g|, |g_fd|, floor), in vector norm.
inline double fd_rel_error(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h = 1e-5,
                           double floor = 1e-7) {
    for (auto& in : inputs) in.drop_grad();
    Tensor loss = f();
    backward(loss);
    double worst = 0.0;
    for (auto& in : inputs) {
        const std::vector<double> g = in.grad();
        std::vector<double> num(in.size());
        auto data = in.mutable_data();
        for (std::size_t i = 0; i < in.size(); ++i) {
            const double keep = data[i];
            double lp, lm;
            {
                NoGradGuard ng;
                data[i] = keep + h;
                lp = f().item();
                data[i] = keep - h;
                lm = f().item();
            }
            data[i] = keep;
            num[i] = (lp - lm) / (2 * h);
        }
        double diff = 0, na = 0, nn = 0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            diff += (g[i] - num[i]) * (g[i] - num[i]);
            na += g[i] * g[i];
            nn += num[i] * num[i];
        }
        const double denom = std::max({std::sqrt(na), std::sqrt(nn), floor});
        worst = std::max(worst, std::sqrt(diff) / denom);
    }
    return worst;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("lirf_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

/// Tiny BlockNet for gradient checks: 1x6x6 input, two conv blocks, head.
inline BlockSpec tiny_spec(std::size_t num_classes = 4) {
    BlockSpec s;
    s.input = {1, 6, 6};
    s.blocks = {{BlockKind::ConvReluPool, 3}, {BlockKind::ConvRelu, 4}};
    s.kernel = 3;
    s.split = 1;
    s.num_classes = num_classes;
    return s;
}

inline LabeledDataset tiny_dataset(std::size_t per_class, std::uint64_t seed, std::size_t num_classes = 4,
                                   Shape shape = {1, 6, 6}) {
    SyntheticParams p;
    p.num_classes = num_classes;
    p.shape = std::move(shape);
    p.noise = 0.3;
    return gen_synthetic(p, per_class, seed);
}

inline std::vector<int> rand_labels(std::size_t n, std::size_t C, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> d(0, static_cast<int>(C) - 1);
    std::vector<int> y(n);
    for (auto& v : y) v = d(rng);
    return y;
}

// Target, original and vault on tiny_spec with a single deposit class; the
// target's lower blocks are perturbed so it differs from the original.
struct TinyDeposit {
    BlockNet target, original;
    DepositVault vault;
    ClassPartition part;
    Tensor x;
    std::vector<int> y, yr;
};

inline TinyDeposit tiny_deposit(std::uint64_t seed) {
    TinyDeposit d;
    d.part = ClassPartition::from_deposit(4, {0});
    d.original = BlockNet::init(tiny_spec(4), seed);
    d.original.freeze_all();
    d.target = d.original.clone();
    // Perturb so target and original differ.
    std::mt19937_64 rng(seed + 99);
    std::normal_distribution<double> n(0.0, 0.1);
    for (auto& p : d.target.lower_parameters()) {
        for (auto& v : p.mutable_data()) v += n(rng);
        p.set_requires_grad(true);
    }
    d.vault.spec = d.original.spec();
    d.vault.partition = d.part;
    d.vault.blocks = prune_lower(d.original, 0.5, &d.vault.plan);
    for (auto& p : d.vault.parameters()) p.set_requires_grad(true);
    d.x = Tensor({3, 1, 6, 6}, randn(3 * 36, rng));
    d.y = {0, 0, 0};
    d.yr = rand_labels(3, 4, rng);
    return d;
}

inline std::vector<Tensor> trainables(const TinyDeposit& d) {
    std::vector<Tensor> ps = d.target.trainable_parameters();
    for (auto& p : d.vault.parameters()) ps.push_back(p);
    return ps;
}

// Plan checker written against the stated pruning rules only. Returns an
// empty string for a valid plan.
inline std::string plan_violation(const std::vector<Block>& lower, const PrunePlan& plan, double p) {
    if (plan.kept.size() != lower.size()) return "layer count";
    for (std::size_t i = 0; i < lower.size(); ++i) {
        const std::size_t O = lower[i].weight.dim(0);
        const auto& k = plan.kept[i];
        const bool last = i + 1 == lower.size();
        const std::size_t want =
            last ? O : std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil((1 - p) * O - 1e-9)));
        if (k.size() != want) return "layer " + std::to_string(i) + " keeps " + std::to_string(k.size());
        for (std::size_t j = 0; j < k.size(); ++j) {
            if (k[j] >= O) return "out of range";
            if (j && k[j] <= k[j - 1]) return "not increasing";
        }
        if (last) continue;
        // Every dropped channel scores no higher than every kept one; on equal
        // scores the kept index is the lower one.
        std::vector<double> s(O, 0.0);
        auto w = lower[i].weight.values();
        const std::size_t per = w.size() / O;
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t q = 0; q < per; ++q) s[o] += std::fabs(w[o * per + q]);
        for (std::size_t a : k)
            for (std::size_t d = 0; d < O; ++d) {
                if (std::find(k.begin(), k.end(), d) != k.end()) continue;
                if (s[d] > s[a] || (s[d] == s[a] && d < a)) {
                    return "dropped " + std::to_string(d) + " outranks kept " + std::to_string(a);
                }
            }
    }
    return {};
}

} // namespace lirf::testing
