// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lirf/config.hpp"
#include "lirf/datasets.hpp"
#include "lirf/deposit.hpp"
#include "lirf/eval.hpp"
#include "lirf/training.hpp"

namespace lirf {

namespace fs = std::filesystem;

inline std::string utc_timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

/// One experiment rooted at <out>/<config-hash>/.
class Run {
  public:
    Run(ExperimentConfig cfg, fs::path out_root)
        : cfg_(std::move(cfg)), root_(std::move(out_root)), hash_(config_hash(cfg_)) {}

    const ExperimentConfig& config() const noexcept { return cfg_; }
    const std::string& hash() const noexcept { return hash_; }
    fs::path base() const { return root_ / hash_; }
    fs::path dir(const std::string& command) const { return base() / command; }

    /// Fails with a PrerequisiteError naming `command` when `file` is absent,
    /// and with a ConfigError when the producing run used another config.
    fs::path require(const std::string& command, const std::string& file) const {
        const fs::path p = dir(command) / file;
        const fs::path manifest = dir(command) / "manifest.json";
        if (!fs::exists(p) || !fs::exists(manifest)) {
            throw PrerequisiteError(command, "missing " + p.string() + "; run `lirf " + command + "` first");
        }
        const auto m = read_json(manifest);
        if (m.value("config_hash", "") != hash_) {
            throw ConfigError("config", p.string() + " was produced by config " + m.value("config_hash", "?") +
                                            ", current config is " + hash_);
        }
        return p;
    }

    void write_manifest(const std::string& command, const std::map<std::string, fs::path>& artifacts,
                        const std::string& started) const {
        nlohmann::json paths = nlohmann::json::object();
        for (const auto& [name, p] : artifacts) {
            if (!fs::exists(p)) throw Error("manifest: artifact " + p.string() + " does not exist");
            paths[name] = p.string();
        }
        write_json(dir(command) / "manifest.json", {{"command", command},
                                                    {"config_hash", hash_},
                                                    {"seed", cfg_.seed},
                                                    {"artifacts", paths},
                                                    {"started_at", started},
                                                    {"finished_at", utc_timestamp()},
                                                    {"engine_version", kEngineVersion}});
    }

    void write_config() const { write_json(base() / "config.json", to_json(cfg_)); }

  private:
    ExperimentConfig cfg_;
    fs::path root_;
    std::string hash_;
};

inline TrainTest load_data(const ExperimentConfig& cfg) {
    const auto& d = cfg.dataset;
    if (d.source == "file") {
        TrainTest tt{LabeledDataset::load(d.train_path), LabeledDataset::load(d.test_path)};
        if (tt.train.num_classes() != d.num_classes || tt.test.num_classes() != d.num_classes) {
            throw ConfigError("dataset.num_classes", "does not match the dataset files");
        }
        if (tt.train.sample_shape() != d.shape || tt.test.sample_shape() != d.shape) {
            throw ConfigError("dataset.shape", "does not match the dataset files");
        }
        return tt;
    }
    SyntheticParams p;
    p.num_classes = d.num_classes;
    p.shape = d.shape;
    p.template_seed = d.template_seed;
    p.noise = d.noise;
    p.max_shift = d.max_shift;
    return gen_synthetic_split(p, d.train_per_class, d.test_per_class, d.seed);
}

struct CommandResult {
    fs::path dir;
    nlohmann::json report;
};

namespace detail {

inline nlohmann::json report_header(const Run& run, const std::string& command) {
    return {{"command", command}, {"config_hash", run.hash()}, {"seed", run.config().seed}};
}

inline BlockNet load_original(const Run& run) {
    return BlockNet::load(run.require("train", "original.ckpt"), run.config().model_spec());
}

inline BlockNet load_target(const Run& run) {
    return BlockNet::load(run.require("deposit", "target.ckpt"), run.config().model_spec());
}

inline DepositVault load_vault(const Run& run) {
    const fs::path ck = run.require("deposit", "vault.ckpt");
    return DepositVault::load(ck.parent_path() / "vault");
}

} // namespace detail

/// Trains the original network on the full training split.
inline CommandResult cmd_train(const Run& run) {
    const std::string started = utc_timestamp();
    const auto& cfg = run.config();
    run.write_config();
    const TrainTest data = load_data(cfg);
    BlockNet net = BlockNet::init(cfg.model_spec(), cfg.seed);
    const auto history = train_supervised(net, data.train, cfg.train_config());

    const fs::path dir = run.dir("train");
    fs::create_directories(dir);
    net.save(dir / "original.ckpt");
    nlohmann::json report = detail::report_header(run, "train");
    report["train_loss"] = history;
    report["metrics"] = evaluate(net, data.test, cfg.partition()).to_json();
    report["checksum"] = hex64(net.checksum());
    write_json(dir / "metrics.json", report);
    run.write_manifest("train", {{"checkpoint", dir / "original.ckpt"}, {"report", dir / "metrics.json"}}, started);
    return {dir, report};
}

/// Deposits the configured classes: writes the target network and the vault.
inline CommandResult cmd_deposit(const Run& run) {
    const std::string started = utc_timestamp();
    const auto& cfg = run.config();
    const BlockNet original = detail::load_original(run);
    const TrainTest data = load_data(cfg);
    const ClassPartition part = cfg.partition();
    const LabeledDataset d_r = data.train.filter([&](int y) { return part.is_deposit(static_cast<std::size_t>(y)); });

    DepositResult r = deposit(original, d_r, part, cfg.deposit_config());
    const MetricsReport before = evaluate(original, data.test, part);
    r.report.config_hash = run.hash();
    r.report.metrics = {{"original", before.to_json()},
                        {"target", evaluate(r.target, data.test, part, before.dep_acc).to_json()}};

    const fs::path dir = run.dir("deposit");
    fs::create_directories(dir);
    r.target.save(dir / "target.ckpt");
    r.vault.save(dir / "vault");
    nlohmann::json report = detail::report_header(run, "deposit");
    report.update(r.report.to_json());
    report["vault_parameters"] = r.vault.parameter_count();
    report["target_checksum"] = hex64(r.target.checksum());
    write_json(dir / "report.json", report);
    run.write_manifest("deposit",
                       {{"target", dir / "target.ckpt"},
                        {"vault", dir / "vault.ckpt"},
                        {"vault_sidecar", dir / "vault.json"},
                        {"report", dir / "report.json"}},
                       started);
    return {dir, report};
}

/// Composes target and vault into the recover net. Nothing is trained; the
/// artifact is a record of the composed pieces and their checksums.
inline CommandResult cmd_withdraw(const Run& run) {
    const std::string started = utc_timestamp();
    const auto& cfg = run.config();
    const BlockNet target = detail::load_target(run);
    const DepositVault vault = detail::load_vault(run);
    const RecoverNet recover = withdraw(target, vault);
    const TrainTest data = load_data(cfg);
    const ClassPartition part = cfg.partition();

    const fs::path dir = run.dir("withdraw");
    fs::create_directories(dir);
    nlohmann::json composition = {
        {"target", (run.dir("deposit") / "target.ckpt").string()},
        {"target_checksum", hex64(target.checksum())},
        {"vault", (run.dir("deposit") / "vault.ckpt").string()},
        {"vault_checksum", hex64(vault.to_checkpoint().checksum())},
        {"deposit_classes", vault.partition.deposit()},
    };
    write_json(dir / "recover.json", composition);
    nlohmann::json report = detail::report_header(run, "withdraw");
    report["metrics"] = evaluate(recover, data.test, part).to_json();
    write_json(dir / "metrics.json", report);
    run.write_manifest("withdraw", {{"recover", dir / "recover.json"}, {"report", dir / "metrics.json"}}, started);
    return {dir, report};
}

/// Scores original, target and recover net side by side.
inline CommandResult cmd_eval(const Run& run) {
    const std::string started = utc_timestamp();
    const auto& cfg = run.config();
    const BlockNet original = detail::load_original(run);
    const BlockNet target = detail::load_target(run);
    const DepositVault vault = detail::load_vault(run);
    if (vault.provenance != original.checksum()) {
        throw SpecMismatchError("eval: vault was not deposited from this original network");
    }
    const TrainTest data = load_data(cfg);
    const ClassPartition part = cfg.partition();

    const MetricsReport orig = evaluate(original, data.test, part);
    nlohmann::json report = detail::report_header(run, "eval");
    report["metrics"] = {{"original", orig.to_json()},
                         {"target", evaluate(target, data.test, part, orig.dep_acc).to_json()},
                         {"recover", evaluate(withdraw(target, vault), data.test, part).to_json()}};

    const fs::path dir = run.dir("eval");
    fs::create_directories(dir);
    std::map<std::string, fs::path> artifacts{{"report", dir / "eval.json"}};
    if (cfg.eval.export_features) {
        for (const auto& [name, net] : {std::pair<std::string, const BlockNet*>{"original", &original},
                                        std::pair<std::string, const BlockNet*>{"target", &target}}) {
            for (const auto& [tap_name, tap] : {std::pair<std::string, FeatureTap>{"split", FeatureTap::Split},
                                                std::pair<std::string, FeatureTap>{"final", FeatureTap::Final}}) {
                const fs::path p = dir / ("features_" + name + "_" + tap_name + ".csv");
                export_features(*net, data.test, tap, p);
                artifacts["features_" + name + "_" + tap_name] = p;
            }
        }
    }
    write_json(dir / "eval.json", report);
    run.write_manifest("eval", artifacts, started);
    return {dir, report};
}

/// Distills fresh students from the original and from the target and reports
/// how much deposit-class knowledge each student picks up.
inline CommandResult cmd_attack(const Run& run) {
    const std::string started = utc_timestamp();
    const auto& cfg = run.config();
    const BlockNet original = detail::load_original(run);
    const BlockNet target = detail::load_target(run);
    const TrainTest data = load_data(cfg);
    const ClassPartition part = cfg.partition();
    const LabeledDataset train =
        cfg.eval.attack_train_set == "deposit"
            ? data.train.filter([&](int y) { return part.is_deposit(static_cast<std::size_t>(y)); })
            : data.train;

    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < cfg.eval.attacks.size(); ++i) {
        const AttackConfig ac = cfg.attack_config(i);
        const MetricsReport from_original = attack_distill(original, ac, train, data.test, part);
        const MetricsReport from_target = attack_distill(target, ac, train, data.test, part);
        rows.push_back({{"mode", to_string(ac.mode)},
                        {"temperature", ac.temperature},
                        {"from_original", from_original.to_json()},
                        {"from_target", from_target.to_json()},
                        {"delta_pre", from_target.pre_acc - from_original.pre_acc},
                        {"delta_dep", from_target.dep_acc - from_original.dep_acc}});
    }
    nlohmann::json report = detail::report_header(run, "attack");
    report["train_set"] = cfg.eval.attack_train_set;
    report["attacks"] = rows;
    const fs::path dir = run.dir("attack");
    write_json(dir / "attack.json", report);
    run.write_manifest("attack", {{"report", dir / "attack.json"}}, started);
    return {dir, report};
}

inline std::string sweep_csv_header() { return "n,p,pre_acc,dep_acc,recover_avg_acc"; }

/// Deposit and withdraw at every (split, prune rate) grid point.
inline CommandResult cmd_sweep(const Run& run) {
    const std::string started = utc_timestamp();
    const auto& cfg = run.config();
    const BlockNet original = detail::load_original(run);
    const TrainTest data = load_data(cfg);
    const ClassPartition part = cfg.partition();
    const LabeledDataset d_r = data.train.filter([&](int y) { return part.is_deposit(static_cast<std::size_t>(y)); });
    const double dep_before = evaluate(original, data.test, part).dep_acc;

    std::ostringstream csv;
    csv << sweep_csv_header() << '\n';
    csv << std::setprecision(10);
    nlohmann::json points = nlohmann::json::array();
    for (std::size_t n : cfg.sweep.n_grid) {
        for (double p : cfg.sweep.p_grid) {
            DepositConfig dc = cfg.deposit_config();
            dc.split = n;
            dc.prune_rate = p;
            const DepositResult r = deposit(original, d_r, part, dc);
            const MetricsReport t = evaluate(r.target, data.test, part, dep_before);
            const MetricsReport rec = evaluate(withdraw(r.target, r.vault), data.test, part);
            csv << n << ',' << p << ',' << t.pre_acc << ',' << t.dep_acc << ',' << rec.avg_acc << '\n';
            points.push_back({{"n", n},
                              {"p", p},
                              {"target", t.to_json()},
                              {"recover", rec.to_json()},
                              {"vault_parameters", r.vault.parameter_count()}});
        }
    }
    const fs::path dir = run.dir("sweep");
    fs::create_directories(dir);
    std::ofstream(dir / "sweep.csv") << csv.str();
    nlohmann::json report = detail::report_header(run, "sweep");
    report["points"] = points;
    write_json(dir / "sweep.json", report);
    run.write_manifest("sweep", {{"csv", dir / "sweep.csv"}, {"report", dir / "sweep.json"}}, started);
    return {dir, report};
}

} // namespace lirf
