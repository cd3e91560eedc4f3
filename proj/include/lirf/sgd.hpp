// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "lirf/tensor.hpp"

namespace lirf {

/// SGD with heavy-ball momentum: v <- m*v + g; p <- p - lr*v.
class Sgd {
  public:
    Sgd(std::vector<Tensor> params, double learning_rate, double momentum = 0.0)
        : params_(std::move(params)), lr_(learning_rate), momentum_(momentum) {
        velocity_.reserve(params_.size());
        for (const auto& p : params_) velocity_.emplace_back(p.size(), 0.0);
    }

    double learning_rate() const noexcept { return lr_; }
    double momentum() const noexcept { return momentum_; }
    void set_learning_rate(double lr) noexcept { lr_ = lr; }
    const std::vector<Tensor>& params() const noexcept { return params_; }
    const std::vector<double>& velocity(std::size_t i) const { return velocity_.at(i); }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    /// Applies one update and clears gradients to zero.
    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (!params_[i].has_grad()) {
                throw Error("sgd_step: parameter " + std::to_string(i) + " " +
                            shape_str(params_[i].shape()) + " has no gradient");
            }
        }
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto p = params_[i].mutable_data();
            auto g = params_[i].mutable_grad();
            auto& v = velocity_[i];
            for (std::size_t k = 0; k < p.size(); ++k) {
                v[k] = momentum_ * v[k] + g[k];
                p[k] -= lr_ * v[k];
                g[k] = 0.0;
            }
        }
    }

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> velocity_;
    double lr_;
    double momentum_;
};

} // namespace lirf
