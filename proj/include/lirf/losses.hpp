// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "lirf/blocknet.hpp"
#include "lirf/ops.hpp"

namespace lirf {

enum class Side { Deposit, Preservation };

/// Disjoint split of {0..C-1} into deposit and preservation classes.
class ClassPartition {
  public:
    ClassPartition() = default;

    static ClassPartition from_deposit(std::size_t num_classes, std::vector<std::size_t> deposit) {
        ClassPartition p;
        p.num_classes_ = num_classes;
        std::set<std::size_t> dep(deposit.begin(), deposit.end());
        if (dep.size() != deposit.size()) throw DataError("partition: duplicate deposit class");
        for (std::size_t c : dep) {
            if (c >= num_classes) {
                throw DataError("partition: class " + std::to_string(c) + " outside [0, " +
                                std::to_string(num_classes) + ")");
            }
        }
        p.deposit_.assign(dep.begin(), dep.end());
        for (std::size_t c = 0; c < num_classes; ++c) {
            if (!dep.count(c)) p.preservation_.push_back(c);
        }
        if (p.deposit_.empty() || p.preservation_.empty()) {
            throw DataError("partition: deposit and preservation sides must both be nonempty");
        }
        return p;
    }

    /// The first ceil(fraction * C) class indices go to the deposit side.
    static ClassPartition first_fraction(std::size_t num_classes, double fraction) {
        if (!(fraction > 0.0 && fraction < 1.0)) {
            throw DataError("partition: deposit fraction must be in (0, 1)");
        }
        const auto k = static_cast<std::size_t>(
            std::ceil(fraction * static_cast<double>(num_classes) - 1e-9));
        std::vector<std::size_t> dep;
        for (std::size_t c = 0; c < k; ++c) dep.push_back(c);
        return from_deposit(num_classes, dep);
    }

    std::size_t num_classes() const noexcept { return num_classes_; }
    const std::vector<std::size_t>& deposit() const noexcept { return deposit_; }
    const std::vector<std::size_t>& preservation() const noexcept { return preservation_; }
    const std::vector<std::size_t>& side(Side s) const noexcept {
        return s == Side::Deposit ? deposit_ : preservation_;
    }

    bool is_deposit(std::size_t c) const {
        return std::binary_search(deposit_.begin(), deposit_.end(), c);
    }

    std::vector<bool> deposit_mask() const {
        std::vector<bool> m(num_classes_, false);
        for (std::size_t c : deposit_) m[c] = true;
        return m;
    }

    bool operator==(const ClassPartition&) const = default;

    nlohmann::json to_json() const {
        return {{"num_classes", num_classes_}, {"deposit", deposit_}, {"preservation", preservation_}};
    }

    static ClassPartition from_json(const nlohmann::json& j) {
        auto p = from_deposit(j.at("num_classes").get<std::size_t>(),
                              j.at("deposit").get<std::vector<std::size_t>>());
        if (j.contains("preservation") &&
            j.at("preservation").get<std::vector<std::size_t>>() != p.preservation_) {
            throw DataError("partition: preservation list is not the complement of deposit");
        }
        return p;
    }

  private:
    std::size_t num_classes_ = 0;
    std::vector<std::size_t> deposit_;
    std::vector<std::size_t> preservation_;
};

/// Balancing weights and knobs of the deposit objective.
struct LossWeights {
    double lambda_at = 1.0;
    double lambda_kp = 10.0;
    double lambda_pt = 10.0;
    double lambda_re = 10.0;
    double temperature = 10.0;
    double epsilon = 0.05;
    // false: softmax over all classes, then restrict the KL sum to the side.
    bool select_then_softmax = true;

    void validate() const {
        if (!(temperature > 0.0)) throw ConfigError("lirf.temperature", "must be > 0");
        if (lambda_at < 0 || lambda_kp < 0 || lambda_pt < 0 || lambda_re < 0) {
            throw ConfigError("lirf.lambda_*", "weights must be >= 0");
        }
        if (epsilon < 0) throw ConfigError("lirf.epsilon", "must be >= 0");
    }
};

// ---- filters and attention --------------------------------------------------

/// Columns of `z` belonging to one side of the partition, in index order.
inline Tensor filter_select(const Tensor& z, const ClassPartition& part, Side side) {
    if (z.rank() != 2 || z.dim(1) != part.num_classes()) {
        throw ShapeError("filter_select: logits " + shape_str(z.shape()) + " do not have " +
                         std::to_string(part.num_classes()) + " columns");
    }
    return index_select(z, 1, part.side(side));
}

/// Channel sum of squared activations, flattened and L2-normalized per sample.
inline Tensor attention_map(const Tensor& features) {
    if (features.rank() != 4) {
        throw ShapeError("attention_map: expected [B x C x H x W], got " + shape_str(features.shape()));
    }
    const std::size_t B = features.dim(0), HW = features.dim(2) * features.dim(3);
    return l2_normalize_rows(reshape(sum_axis(square(features), 1), Shape{B, HW}));
}

inline Tensor activation_filter(const Tensor& a, double epsilon) { return mask_below(a, epsilon); }

/// Squared distance between filtered attention maps, averaged over the batch.
inline Tensor loss_at(const Tensor& f1, const Tensor& f2, double epsilon) {
    if (f1.shape() != f2.shape()) {
        throw ShapeError("loss_at: feature shapes " + shape_str(f1.shape()) + " and " +
                         shape_str(f2.shape()) + " differ");
    }
    Tensor d = activation_filter(attention_map(f1), epsilon) - activation_filter(attention_map(f2), epsilon);
    return scale(sum(square(d)), 1.0 / static_cast<double>(f1.dim(0)));
}

// ---- classification and distillation ---------------------------------------

inline Tensor loss_ce(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw ShapeError("loss_ce: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
    }
    return scale(sum(pick(log_softmax(logits), labels)), -1.0 / static_cast<double>(labels.size()));
}

struct KdSelector {
    const ClassPartition* partition;
    Side side;
    bool select_then_softmax = true;
};

/// T^2 * KL(softmax(teacher/T) || softmax(student/T)), batch-averaged. With a
/// selector, both logit sets are restricted to one partition side first and
/// the softmax runs over that subset.
inline Tensor loss_kd(const Tensor& student, const Tensor& teacher, double temperature,
                      std::optional<KdSelector> selector = std::nullopt) {
    if (student.shape() != teacher.shape() || student.rank() != 2) {
        throw ShapeError("loss_kd: student " + shape_str(student.shape()) + " vs teacher " +
                         shape_str(teacher.shape()));
    }
    const double inv_t = 1.0 / temperature;
    Tensor log_ps, log_pt;
    if (selector && !selector->select_then_softmax) {
        log_ps = filter_select(log_softmax(scale(student, inv_t)), *selector->partition, selector->side);
        log_pt = filter_select(log_softmax(scale(teacher, inv_t)), *selector->partition, selector->side);
    } else {
        Tensor s = student, t = teacher;
        if (selector) {
            s = filter_select(s, *selector->partition, selector->side);
            t = filter_select(t, *selector->partition, selector->side);
        }
        log_ps = log_softmax(scale(s, inv_t));
        log_pt = log_softmax(scale(t, inv_t));
    }
    Tensor kl = sum(exp(log_pt) * (log_pt - log_ps));
    return scale(kl, temperature * temperature / static_cast<double>(student.dim(0)));
}

// ---- deposit objective ------------------------------------------------------

/// Knowledge removal: CE against random labels minus the attention term that
/// pushes the target's split features away from the original's.
inline Tensor loss_kr(const Tensor& target_logits, const std::vector<int>& random_labels,
                      const Tensor& target_features, const Tensor& original_features,
                      double lambda_at, double epsilon) {
    Tensor ce = loss_ce(target_logits, random_labels);
    if (lambda_at == 0.0) return ce;
    return ce - scale(loss_at(target_features, original_features, epsilon), lambda_at);
}

inline Tensor loss_kr(const BlockNet& target, const BlockNet& original, const Tensor& x,
                      const std::vector<int>& random_labels, double lambda_at, double epsilon) {
    Tensor ft = target.forward_lower(x);
    Tensor zt = target.forward_upper(ft);
    Tensor fo;
    {
        NoGradGuard ng;
        fo = original.forward_lower(x);
    }
    return loss_kr(zt, random_labels, ft, fo, lambda_at, epsilon);
}

/// Preservation-class distillation from the original.
inline Tensor loss_kp(const Tensor& target_logits, const Tensor& original_logits,
                      const ClassPartition& part, double temperature, bool select_then_softmax = true) {
    return loss_kd(target_logits, original_logits, temperature,
                   KdSelector{&part, Side::Preservation, select_then_softmax});
}

inline Tensor loss_kp(const BlockNet& target, const BlockNet& original, const Tensor& x,
                      const ClassPartition& part, double temperature) {
    Tensor zo;
    {
        NoGradGuard ng;
        zo = original.forward_full(x);
    }
    return loss_kp(target.forward_full(x), zo, part, temperature);
}

/// Deposit-class distillation from the original into the vault branch.
inline Tensor loss_pt(const Tensor& vault_branch_logits, const Tensor& original_logits,
                      const ClassPartition& part, double temperature, bool select_then_softmax = true) {
    return loss_kd(vault_branch_logits, original_logits, temperature,
                   KdSelector{&part, Side::Deposit, select_then_softmax});
}

/// Preservation columns from the target, deposit columns from the vault branch.
inline Tensor compose_recover_logits(const Tensor& target_logits, const Tensor& vault_branch_logits,
                                     const ClassPartition& part) {
    if (target_logits.rank() != 2 || target_logits.dim(1) != part.num_classes()) {
        throw ShapeError("compose_recover_logits: logits " + shape_str(target_logits.shape()) +
                         " do not have " + std::to_string(part.num_classes()) + " columns");
    }
    return where_columns(target_logits, vault_branch_logits, part.deposit_mask());
}

inline Tensor loss_re(const Tensor& recover_logits, const std::vector<int>& labels) {
    return loss_ce(recover_logits, labels);
}

/// Everything the deposit objective reads for one batch.
struct DepositForward {
    Tensor target_features;
    Tensor target_logits;
    Tensor original_features; // constant
    Tensor original_logits;   // constant
    std::optional<Tensor> vault_logits;
};

struct LossTerms {
    Tensor kr, kp, pt, re, all;
};

/// L_kr + lambda_kp L_kp + lambda_re L_re + lambda_pt L_pt. Terms whose weight
/// is zero are not evaluated and report 0.
inline LossTerms loss_all(const DepositForward& fwd, const std::vector<int>& labels,
                          const std::vector<int>& random_labels, const ClassPartition& part,
                          const LossWeights& w) {
    LossTerms t;
    t.kr = loss_kr(fwd.target_logits, random_labels, fwd.target_features, fwd.original_features,
                   w.lambda_at, w.epsilon);
    t.kp = t.pt = t.re = Tensor::scalar(0.0);
    Tensor all = t.kr;
    if (w.lambda_kp != 0.0) {
        t.kp = loss_kp(fwd.target_logits, fwd.original_logits, part, w.temperature, w.select_then_softmax);
        all = all + scale(t.kp, w.lambda_kp);
    }
    if (w.lambda_re != 0.0 || w.lambda_pt != 0.0) {
        if (!fwd.vault_logits) throw Error("loss_all: vault branch logits required");
    }
    if (w.lambda_re != 0.0) {
        t.re = loss_re(compose_recover_logits(fwd.target_logits, *fwd.vault_logits, part), labels);
        all = all + scale(t.re, w.lambda_re);
    }
    if (w.lambda_pt != 0.0) {
        t.pt = loss_pt(*fwd.vault_logits, fwd.original_logits, part, w.temperature, w.select_then_softmax);
        all = all + scale(t.pt, w.lambda_pt);
    }
    t.all = all;
    return t;
}

} // namespace lirf
