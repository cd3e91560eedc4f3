// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lirf/blocknet.hpp"
#include "lirf/datasets.hpp"
#include "lirf/eval.hpp"
#include "lirf/losses.hpp"
#include "lirf/pruner.hpp"
#include "lirf/training.hpp"

namespace lirf {

struct DepositVault;

struct DepositConfig {
    LossWeights weights;
    std::size_t epochs = 20;
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    double prune_rate = 0.5;
    std::optional<std::size_t> split; // defaults to the original's split
    bool augment = true;
    bool resample_random_labels = false;
    bool exclude_true_label = false;
    // Called after every epoch with the current target and vault.
    std::function<void(std::size_t, const BlockNet&, const DepositVault&)> on_epoch;

    void validate() const {
        weights.validate();
        if (!(prune_rate >= 0.0 && prune_rate < 1.0)) throw ConfigError("lirf.prune_rate", "must be in [0, 1)");
        if (batch_size == 0) throw ConfigError("lirf.batch_size", "must be positive");
        if (!(learning_rate > 0.0)) throw ConfigError("lirf.lr", "must be > 0");
    }
};

/// Pruned copy of the lower blocks holding the deposited classes' knowledge.
/// It has no head: predictions need a compatible upper part.
struct DepositVault {
    BlockSpec spec; // spec of the network it was deposited from (split included)
    std::vector<Block> blocks;
    ClassPartition partition;
    PrunePlan plan;
    std::uint64_t provenance = 0; // checksum of that network

    double prune_rate() const noexcept { return plan.prune_rate; }
    std::size_t split() const noexcept { return spec.split; }
    std::size_t parameter_count() const { return lirf::parameter_count(blocks); }

    Tensor features(const Tensor& x) const { return forward_blocks(blocks, x); }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> ps;
        for (const auto& b : blocks) {
            ps.push_back(b.weight);
            ps.push_back(b.bias);
        }
        return ps;
    }

    DepositVault clone() const {
        DepositVault v = *this;
        v.blocks.clear();
        for (const auto& b : blocks) v.blocks.push_back(b.clone());
        return v;
    }

    nlohmann::json sidecar() const {
        return {{"partition", partition.to_json()}, {"n", spec.split},         {"p", plan.prune_rate},
                {"plan", plan.to_json()},           {"spec", spec.to_json()}, {"provenance", hex64(provenance)}};
    }

    Checkpoint to_checkpoint() const {
        Checkpoint ck;
        ck.header = {{"kind", "vault"}, {"spec", spec.to_json()}, {"partition", partition.to_json()}};
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string prefix = "vault" + std::to_string(i);
            ck.header["block_kinds"].push_back(to_string(blocks[i].kind));
            ck.tensors.push_back({prefix + ".weight", blocks[i].weight.shape(), blocks[i].weight.values()});
            ck.tensors.push_back({prefix + ".bias", blocks[i].bias.shape(), blocks[i].bias.values()});
        }
        return ck;
    }

    /// Writes `<stem>.ckpt` and `<stem>.json`.
    void save(const std::filesystem::path& stem) const {
        to_checkpoint().save(stem.string() + ".ckpt");
        std::ofstream(stem.string() + ".json") << sidecar().dump(2) << '\n';
    }

    static DepositVault load(const std::filesystem::path& stem) {
        const Checkpoint ck = Checkpoint::load(stem.string() + ".ckpt");
        std::ifstream in(stem.string() + ".json");
        if (!in) throw Error("missing vault sidecar " + stem.string() + ".json");
        nlohmann::json side;
        try {
            side = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("vault sidecar: ") + e.what());
        }
        if (ck.header.value("kind", "") != "vault") throw SpecMismatchError("checkpoint does not hold a vault");
        DepositVault v;
        v.spec = BlockSpec::from_json(side.at("spec"));
        if (!(BlockSpec::from_json(ck.header.at("spec")) == v.spec)) {
            throw SpecMismatchError("vault checkpoint and sidecar disagree on spec");
        }
        v.partition = ClassPartition::from_json(side.at("partition"));
        v.plan = PrunePlan::from_json(side.at("plan"));
        v.provenance = std::stoull(side.at("provenance").get<std::string>(), nullptr, 16);
        const auto kinds = ck.header.at("block_kinds").get<std::vector<std::string>>();
        for (std::size_t i = 0; i < kinds.size(); ++i) {
            const std::string prefix = "vault" + std::to_string(i);
            const NamedTensor* w = ck.find(prefix + ".weight");
            const NamedTensor* b = ck.find(prefix + ".bias");
            if (!w || !b) throw SpecMismatchError("vault checkpoint missing block " + std::to_string(i));
            v.blocks.push_back({block_kind_from_string(kinds[i]), Tensor::parameter(w->shape, w->values),
                                Tensor::parameter(b->shape, b->values)});
        }
        if (v.blocks.size() != v.spec.split || v.plan.kept.size() != v.blocks.size()) {
            throw SpecMismatchError("vault block count does not match its split index");
        }
        return v;
    }
};

struct EpochLosses {
    double kr = 0, kp = 0, pt = 0, re = 0, all = 0;
};

struct DepositReport {
    std::vector<EpochLosses> epochs;
    std::uint64_t seed = 0;
    std::string config_hash;
    nlohmann::json metrics = nlohmann::json::object();

    nlohmann::json to_json() const {
        nlohmann::json e = nlohmann::json::array();
        for (const auto& l : epochs) {
            e.push_back({{"L_kr", l.kr}, {"L_kp", l.kp}, {"L_pt", l.pt}, {"L_re", l.re}, {"L_all", l.all}});
        }
        return {{"epochs", e}, {"seed", seed}, {"config_hash", config_hash}, {"metrics", metrics}};
    }
};

struct DepositResult {
    BlockNet target;
    DepositVault vault;
    DepositReport report;
};

/// Random relabelling of the deposit samples.
inline std::vector<int> draw_random_labels(const SampleSource& data, std::size_t num_classes, bool exclude_true,
                                           std::mt19937_64& rng) {
    std::vector<int> out(data.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (exclude_true) {
            std::uniform_int_distribution<int> d(0, static_cast<int>(num_classes) - 2);
            const int r = d(rng);
            out[i] = r >= data.label(i) ? r + 1 : r;
        } else {
            std::uniform_int_distribution<int> d(0, static_cast<int>(num_classes) - 1);
            out[i] = d(rng);
        }
    }
    return out;
}

/// Vault branch: pruned lower module followed by the network's upper part.
inline Tensor vault_branch_logits(const BlockNet& net, const DepositVault& vault, const Tensor& x) {
    return net.forward_upper(vault.features(x));
}

/// Knowledge deposit. Reads only `deposit_set`. The target starts as a copy of
/// `original` with its upper part frozen; the vault starts as a pruned copy of
/// the original lower blocks. Both are trained jointly on L_all.
inline DepositResult deposit(const BlockNet& original, const SampleSource& deposit_set, const ClassPartition& part,
                             const DepositConfig& cfg) {
    cfg.validate();
    if (part.num_classes() != original.num_classes() || deposit_set.num_classes() != original.num_classes()) {
        throw DataError("deposit: class count mismatch between network, data and partition");
    }
    if (deposit_set.size() == 0) throw DataError("deposit: empty deposit set");
    for (std::size_t i = 0; i < deposit_set.size(); ++i) {
        const int y = deposit_set.label(i);
        if (!part.is_deposit(static_cast<std::size_t>(y))) {
            throw DataError("deposit: sample " + std::to_string(i) + " has preservation-class label " +
                            std::to_string(y));
        }
    }

    const std::size_t split = cfg.split.value_or(original.split());
    BlockNet teacher = original.with_split(split).clone();
    teacher.freeze_all();

    DepositResult res;
    res.target = teacher.clone();
    for (auto& p : res.target.lower_parameters()) p.set_requires_grad(true);
    res.target.freeze_upper();

    res.vault.spec = teacher.spec();
    res.vault.partition = part;
    res.vault.provenance = original.checksum();
    res.vault.blocks = prune_lower(teacher, cfg.prune_rate, &res.vault.plan);
    res.report.seed = cfg.seed;

    std::mt19937_64 label_rng(cfg.seed ^ 0x2545f4914f6cdd1dULL);
    std::vector<int> random_labels =
        draw_random_labels(deposit_set, part.num_classes(), cfg.exclude_true_label, label_rng);

    const LossWeights& w = cfg.weights;
    const bool use_vault = w.lambda_pt != 0.0 || w.lambda_re != 0.0;
    std::vector<Tensor> params = res.target.trainable_parameters();
    for (auto& p : res.vault.parameters()) params.push_back(p);

    EpochLosses acc;
    std::size_t seen = 0;
    TrainConfig tc{cfg.epochs, cfg.learning_rate, cfg.momentum, cfg.batch_size, cfg.seed, cfg.augment};
    run_minibatch_sgd(
        deposit_set, tc, params,
        [&](const Batch& b, std::span<const std::size_t> idx) {
            std::vector<int> yr;
            for (std::size_t i : idx) yr.push_back(random_labels[i]);
            DepositForward fwd;
            {
                NoGradGuard ng;
                fwd.original_features = teacher.forward_lower(b.x);
                fwd.original_logits = teacher.forward_upper(fwd.original_features);
            }
            fwd.target_features = res.target.forward_lower(b.x);
            fwd.target_logits = res.target.forward_upper(fwd.target_features);
            if (use_vault) fwd.vault_logits = vault_branch_logits(res.target, res.vault, b.x);
            LossTerms t = loss_all(fwd, b.y, yr, part, w);
            const double n = static_cast<double>(idx.size());
            acc.kr += t.kr.item() * n;
            acc.kp += t.kp.item() * n;
            acc.pt += t.pt.item() * n;
            acc.re += t.re.item() * n;
            seen += idx.size();
            return t.all;
        },
        [&](std::size_t epoch, double mean_all) {
            const double n = static_cast<double>(seen);
            res.report.epochs.push_back({acc.kr / n, acc.kp / n, acc.pt / n, acc.re / n, mean_all});
            acc = {};
            seen = 0;
            if (cfg.resample_random_labels) {
                random_labels = draw_random_labels(deposit_set, part.num_classes(), cfg.exclude_true_label, label_rng);
            }
            if (cfg.on_epoch) cfg.on_epoch(epoch, res.target, res.vault);
        });
    return res;
}

/// Composite predictor: target logits, with each withdrawn vault's deposit
/// columns replaced by its branch logits. Holds shared handles, trains nothing.
class RecoverNet {
  public:
    RecoverNet(BlockNet target, std::vector<DepositVault> vaults)
        : target_(std::move(target)), vaults_(std::move(vaults)) {}

    const BlockNet& target() const noexcept { return target_; }
    const std::vector<DepositVault>& vaults() const noexcept { return vaults_; }

    Tensor logits(const Tensor& x) const {
        Tensor z = target_.forward_full(x);
        for (const auto& v : vaults_) {
            z = compose_recover_logits(z, vault_branch_logits(target_, v, x), v.partition);
        }
        return z;
    }

  private:
    BlockNet target_;
    std::vector<DepositVault> vaults_;
};

inline void check_vault_compatible(const BlockNet& target, const DepositVault& vault) {
    BlockSpec ts = target.spec();
    if (!(ts == vault.spec)) {
        throw SpecMismatchError("withdraw: vault was deposited from " + vault.spec.to_json().dump() +
                                ", target is " + ts.to_json().dump());
    }
    if (vault.partition.num_classes() != target.num_classes()) {
        throw SpecMismatchError("withdraw: vault partition class count differs from target");
    }
    if (vault.blocks.size() != target.split()) {
        throw SpecMismatchError("withdraw: vault depth differs from the target split");
    }
    const Shape want = target.spec().feature_shape(target.split());
    Shape in = target.spec().input;
    std::size_t c = in[0];
    for (const auto& b : vault.blocks) {
        if (b.in_width() != c && !(b.kind == BlockKind::LinearRelu)) {
            throw SpecMismatchError("withdraw: vault blocks do not chain");
        }
        c = b.out_width();
    }
    if (c != want[0]) throw SpecMismatchError("withdraw: vault output width does not feed the upper part");
}

/// Knowledge withdrawal. No data, no parameter updates.
inline RecoverNet withdraw(const BlockNet& target, const DepositVault& vault) {
    check_vault_compatible(target, vault);
    return RecoverNet(target, {vault});
}

inline RecoverNet withdraw(const BlockNet& target, const std::vector<DepositVault>& vaults) {
    std::set<std::size_t> seen;
    for (const auto& v : vaults) {
        check_vault_compatible(target, v);
        for (std::size_t c : v.partition.deposit()) {
            if (!seen.insert(c).second) throw SpecMismatchError("withdraw: vaults overlap on class " + std::to_string(c));
        }
    }
    return RecoverNet(target, vaults);
}

// ---- multi-group scenarios ------------------------------------------------------------

struct ScenarioEvent {
    enum class Kind { Deposit, Withdraw } kind;
    std::vector<std::size_t> classes;
};

struct ScenarioStep {
    std::string event; // "initial", "deposit", "withdraw"
    std::vector<std::size_t> classes;
    std::vector<std::size_t> forgotten; // deposited and not withdrawn
    double pre_acc = 0, dep_acc = 0, avg_acc = 0, f = 0, h = 0;
    double mean_a = 0, mean_f = 0, mean_h = 0; // averaged over deposit/withdraw steps so far

    nlohmann::json to_json() const {
        return {{"event", event},     {"classes", classes}, {"forgotten", forgotten}, {"pre_acc", pre_acc},
                {"dep_acc", dep_acc}, {"avg_acc", avg_acc}, {"f", f},                 {"h", h},
                {"mean_a", mean_a},   {"mean_f", mean_f},   {"mean_h", mean_h}};
    }
};

/// Runs deposit/withdraw events in order, one vault per deposited group. After
/// each event the current predictor (target plus withdrawn vaults) is scored:
/// A on classes not currently forgotten, F as the accuracy drop on forgotten
/// classes relative to the original, H their harmonic mean.
inline std::vector<ScenarioStep> run_scenario(const BlockNet& original, const LabeledDataset& train,
                                              const LabeledDataset& test, const std::vector<ScenarioEvent>& schedule,
                                              const DepositConfig& cfg) {
    const std::size_t C = original.num_classes();
    const auto original_counts = per_class_counts(original, test);

    BlockNet target = original;
    std::map<std::vector<std::size_t>, DepositVault> vaults;
    std::set<std::vector<std::size_t>> withdrawn;
    std::set<std::size_t> forgotten;
    std::set<std::size_t> used;

    std::vector<ScenarioStep> steps;
    double sum_a = 0, sum_f = 0, sum_h = 0;
    auto score = [&](std::string event, std::vector<std::size_t> classes) {
        std::vector<DepositVault> active;
        for (const auto& g : withdrawn) active.push_back(vaults.at(g));
        const auto counts = active.empty() ? per_class_counts(target, test)
                                           : per_class_counts(RecoverNet(target, active), test);
        AccuracyCount pre, dep, orig_dep;
        for (std::size_t c = 0; c < C; ++c) {
            const bool gone = forgotten.count(c) > 0;
            auto& side = gone ? dep : pre;
            side.correct += counts[c].correct;
            side.total += counts[c].total;
            if (gone) {
                orig_dep.correct += original_counts[c].correct;
                orig_dep.total += original_counts[c].total;
            }
        }
        ScenarioStep s;
        s.event = std::move(event);
        s.classes = std::move(classes);
        s.forgotten.assign(forgotten.begin(), forgotten.end());
        s.pre_acc = pre.percent();
        s.dep_acc = dep.percent();
        s.avg_acc = AccuracyCount{pre.correct + dep.correct, pre.total + dep.total}.percent();
        s.f = dep.total ? forgetting_f(orig_dep.percent(), s.dep_acc) : 0.0;
        s.h = h_mean(s.pre_acc, s.f);
        if (!steps.empty()) {
            sum_a += s.pre_acc;
            sum_f += s.f;
            sum_h += s.h;
            const double k = static_cast<double>(steps.size());
            s.mean_a = sum_a / k;
            s.mean_f = sum_f / k;
            s.mean_h = sum_h / k;
        } else {
            s.mean_a = s.pre_acc;
        }
        steps.push_back(std::move(s));
    };

    score("initial", {});
    for (std::size_t e = 0; e < schedule.size(); ++e) {
        auto group = schedule[e].classes;
        std::sort(group.begin(), group.end());
        if (schedule[e].kind == ScenarioEvent::Kind::Deposit) {
            for (std::size_t c : group) {
                if (!used.insert(c).second) {
                    throw DataError("scenario: class " + std::to_string(c) + " already belongs to a deposited group");
                }
            }
            const ClassPartition part = ClassPartition::from_deposit(C, group);
            const LabeledDataset d_r = train.filter([&](int y) { return part.is_deposit(static_cast<std::size_t>(y)); });
            DepositConfig step_cfg = cfg;
            step_cfg.seed = cfg.seed + 1000 * (e + 1);
            DepositResult r = deposit(target, d_r, part, step_cfg);
            target = r.target;
            vaults.emplace(group, std::move(r.vault));
            forgotten.insert(group.begin(), group.end());
            score("deposit", group);
        } else {
            if (!vaults.count(group)) throw DataError("scenario: withdraw of a group that was never deposited");
            if (!withdrawn.insert(group).second) throw DataError("scenario: group withdrawn twice");
            for (std::size_t c : group) forgotten.erase(c);
            score("withdraw", group);
        }
    }
    return steps;
}

} // namespace lirf
