// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lirf/blocknet.hpp"

namespace lirf {

/// Kept output channels (or units) per lower block.
struct PrunePlan {
    double prune_rate = 0.0;
    std::vector<std::vector<std::size_t>> kept;

    bool operator==(const PrunePlan&) const = default;

    nlohmann::json to_json() const { return {{"prune_rate", prune_rate}, {"kept", kept}}; }
    static PrunePlan from_json(const nlohmann::json& j) {
        return {j.at("prune_rate").get<double>(), j.at("kept").get<std::vector<std::vector<std::size_t>>>()};
    }
};

/// L1 norm of each output filter: score[o] = sum |w[o, ...]|.
inline std::vector<double> rank_filters(const Tensor& weights) {
    if (weights.rank() < 2) throw ShapeError("rank_filters: expected a weight tensor, got " + shape_str(weights.shape()));
    const std::size_t O = weights.dim(0), per = weights.size() / O;
    std::vector<double> scores(O, 0.0);
    const auto w = weights.data();
    for (std::size_t o = 0; o < O; ++o)
        for (std::size_t k = 0; k < per; ++k) scores[o] += std::abs(w[o * per + k]);
    return scores;
}

inline std::size_t kept_count(std::size_t channels, double prune_rate) {
    const double keep = (1.0 - prune_rate) * static_cast<double>(channels);
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(keep - 1e-9)));
}

/// One-shot per-layer plan. The last block keeps every output channel so the
/// pruned module still feeds the unpruned upper blocks.
inline PrunePlan build_plan(std::span<const Block> lower, double prune_rate) {
    if (!(prune_rate >= 0.0 && prune_rate < 1.0)) {
        throw DataError("build_plan: prune rate " + std::to_string(prune_rate) + " outside [0, 1)");
    }
    PrunePlan plan;
    plan.prune_rate = prune_rate;
    for (std::size_t i = 0; i < lower.size(); ++i) {
        const std::size_t O = lower[i].out_width();
        std::vector<std::size_t> order(O);
        std::iota(order.begin(), order.end(), std::size_t{0});
        if (i + 1 < lower.size()) {
            const auto scores = rank_filters(lower[i].weight);
            std::stable_sort(order.begin(), order.end(),
                             [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
            order.resize(kept_count(O, prune_rate));
            std::sort(order.begin(), order.end());
        }
        plan.kept.push_back(std::move(order));
    }
    return plan;
}

/// Copies the kept filters (and the matching input slices of the following
/// block) into a new, smaller block stack.
inline std::vector<Block> apply_plan(std::span<const Block> lower, const PrunePlan& plan) {
    if (plan.kept.size() != lower.size()) {
        throw DataError("apply_plan: plan covers " + std::to_string(plan.kept.size()) + " blocks, module has " +
                        std::to_string(lower.size()));
    }
    for (std::size_t i = 0; i < lower.size(); ++i) {
        const auto& k = plan.kept[i];
        const std::size_t O = lower[i].out_width();
        if (k.empty() || !std::is_sorted(k.begin(), k.end()) ||
            std::adjacent_find(k.begin(), k.end()) != k.end() || k.back() >= O) {
            throw DataError("apply_plan: inconsistent kept list for block " + std::to_string(i));
        }
        if (i + 1 == lower.size() && k.size() != O) {
            throw DataError("apply_plan: last block must keep all " + std::to_string(O) + " outputs");
        }
    }

    std::vector<Block> out;
    for (std::size_t i = 0; i < lower.size(); ++i) {
        const Block& src = lower[i];
        const auto& keep_out = plan.kept[i];
        std::vector<std::size_t> keep_in;
        if (i == 0) {
            keep_in.resize(src.in_width());
            std::iota(keep_in.begin(), keep_in.end(), std::size_t{0});
        } else if (is_conv(src.kind) || !is_conv(lower[i - 1].kind)) {
            keep_in = plan.kept[i - 1];
        } else {
            // Linear after conv: each kept channel owns a contiguous run of
            // flattened spatial positions.
            const std::size_t spatial = src.in_width() / lower[i - 1].out_width();
            for (std::size_t c : plan.kept[i - 1])
                for (std::size_t s = 0; s < spatial; ++s) keep_in.push_back(c * spatial + s);
        }

        const std::size_t per_in = is_conv(src.kind) ? src.weight.dim(2) * src.weight.dim(3) : 1;
        Shape ws = src.weight.shape();
        ws[0] = keep_out.size();
        ws[1] = keep_in.size();
        std::vector<double> w;
        w.reserve(numel(ws));
        const auto sw = src.weight.data();
        for (std::size_t o : keep_out)
            for (std::size_t c : keep_in) {
                const auto begin = sw.begin() + static_cast<std::ptrdiff_t>((o * src.in_width() + c) * per_in);
                w.insert(w.end(), begin, begin + static_cast<std::ptrdiff_t>(per_in));
            }
        std::vector<double> b;
        for (std::size_t o : keep_out) b.push_back(src.bias.data()[o]);
        out.push_back({src.kind, Tensor::parameter(std::move(ws), std::move(w)),
                       Tensor::parameter({keep_out.size()}, std::move(b))});
    }
    return out;
}

inline std::vector<Block> prune_lower(const BlockNet& net, double prune_rate, PrunePlan* plan_out = nullptr) {
    PrunePlan plan = build_plan(net.lower_blocks(), prune_rate);
    auto blocks = apply_plan(net.lower_blocks(), plan);
    if (plan_out) *plan_out = std::move(plan);
    return blocks;
}

} // namespace lirf
