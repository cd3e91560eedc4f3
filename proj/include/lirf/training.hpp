// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "lirf/blocknet.hpp"
#include "lirf/datasets.hpp"
#include "lirf/losses.hpp"
#include "lirf/sgd.hpp"

namespace lirf {

struct TrainConfig {
    std::size_t epochs = 20;
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    bool augment = true;
};

/// Seeded minibatch loop. `step_loss` gets the (possibly augmented) batch and
/// the dataset indices it came from and returns the loss to minimize.
/// Returns the mean loss of every epoch.
inline std::vector<double> run_minibatch_sgd(
    const SampleSource& data, const TrainConfig& cfg, std::vector<Tensor> params,
    const std::function<Tensor(const Batch&, std::span<const std::size_t>)>& step_loss,
    const std::function<void(std::size_t epoch, double mean_loss)>& on_epoch = {}) {
    if (cfg.batch_size == 0) throw ConfigError("batch_size", "must be positive");
    Sgd opt(std::move(params), cfg.learning_rate, cfg.momentum);
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> history;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::span<const std::size_t> idx(order.data() + start, end - start);
            Batch batch = make_batch(data, idx);
            if (cfg.augment) batch.x = apply_augment(batch.x, draw_augment(idx.size(), rng));
            opt.zero_grad();
            Tensor loss = step_loss(batch, idx);
            backward(loss);
            opt.step();
            total += loss.item() * static_cast<double>(idx.size());
            seen += idx.size();
        }
        history.push_back(total / static_cast<double>(seen));
        if (on_epoch) on_epoch(epoch, history.back());
    }
    return history;
}

/// Plain cross-entropy training of every trainable parameter.
inline std::vector<double> train_supervised(BlockNet& net, const SampleSource& data, const TrainConfig& cfg) {
    return run_minibatch_sgd(data, cfg, net.trainable_parameters(),
                             [&](const Batch& b, std::span<const std::size_t>) {
                                 return loss_ce(net.forward_full(b.x), b.y);
                             });
}

} // namespace lirf
