// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "test_util.hpp"

using namespace lirf;
using lirf::testing::scratch_dir;

namespace {

namespace fs = std::filesystem;

struct CliResult {
    int code;
    std::string out;
};

CliResult cli(const std::string& args, const fs::path& dir) {
    const fs::path log = dir / "cli.log";
    const std::string cmd = std::string(LIRF_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Small enough that every command finishes in well under a second.
nlohmann::json tiny_config() {
    nlohmann::json j = to_json(ExperimentConfig{});
    j["dataset"]["num_classes"] = 4;
    j["dataset"]["shape"] = {1, 8, 8};
    j["dataset"]["train_per_class"] = 6;
    j["dataset"]["test_per_class"] = 3;
    j["model"]["epochs"] = 1;
    j["lirf"]["epochs"] = 1;
    j["eval"]["attacks"][0]["epochs"] = 1;
    j["sweep"]["n_grid"] = {1, 2};
    j["sweep"]["p_grid"] = {0.5, 0.9};
    return j;
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j) {
    const fs::path p = dir / "config.json";
    std::ofstream(p) << j.dump(2);
    return p;
}

} // namespace

TEST(Config, DefaultsMatchReferenceSettings) {
    ExperimentConfig c;
    EXPECT_EQ(c.lirf.learning_rate, 0.01);
    EXPECT_EQ(c.lirf.momentum, 0.9);
    EXPECT_EQ(c.lirf.epochs, 20u);
    EXPECT_EQ(c.lirf.lambda_kp, 10.0);
    EXPECT_EQ(c.lirf.lambda_pt, 10.0);
    EXPECT_EQ(c.lirf.lambda_re, 10.0);
    EXPECT_EQ(c.lirf.prune_rate, 0.5);
    EXPECT_EQ(c.lirf.temperature, 10.0);
    EXPECT_EQ(c.model.split, 2u);
    EXPECT_EQ(c.partition().deposit(), (std::vector<std::size_t>{0, 1, 2}));
    auto d = c.deposit_config();
    EXPECT_EQ(d.weights.lambda_kp, 10.0);
    EXPECT_EQ(d.prune_rate, 0.5);
    EXPECT_EQ(d.batch_size, 32u);
}

TEST(Config, RoundTrip) {
    ExperimentConfig c;
    EXPECT_EQ(parse_config(to_json(c)), c);
    c = with_overrides(c, {"lirf.temperature=4", "lirf.deposit_classes=[1,5]", "model.blocks.0.width=8",
                           "eval.attacks.0.mode=attention", "eval.attacks.0.student_blocks=[{\"kind\":\"conv-relu-pool\",\"width\":4},{\"kind\":\"conv-relu-pool\",\"width\":6},{\"kind\":\"conv-relu\",\"width\":8}]",
                           "output=elsewhere"});
    EXPECT_EQ(c.lirf.temperature, 4.0);
    EXPECT_EQ(c.lirf.deposit_classes, (std::vector<std::size_t>{1, 5}));
    EXPECT_EQ(c.model.blocks[0].width, 8u);
    EXPECT_EQ(c.eval.attacks[0].mode, AttackMode::Attention);
    ASSERT_TRUE(c.eval.attacks[0].student_blocks.has_value());
    EXPECT_EQ(c.eval.attacks[0].student_blocks->size(), 3u);
    EXPECT_EQ(c.output, "elsewhere");
    EXPECT_EQ(parse_config(to_json(c)), c);
    EXPECT_EQ(parse_config_text(to_json(c).dump()), c);
}

TEST(Config, UnknownKeysAndBadValuesCarryPaths) {
    auto j = to_json(ExperimentConfig{});
    j["lirf"]["lamda_kp"] = 3;
    try {
        parse_config(j);
        FAIL() << "accepted a typo";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("lirf.lamda_kp"), std::string::npos) << e.what();
    }
    EXPECT_THROW(with_overrides(ExperimentConfig{}, {"lirf.nope=1"}), ConfigError);
    EXPECT_THROW(with_overrides(ExperimentConfig{}, {"lirf.temperature"}), ConfigError);
    EXPECT_THROW(with_overrides(ExperimentConfig{}, {"model.blocks.9.width=3"}), ConfigError);
    EXPECT_THROW(with_overrides(ExperimentConfig{}, {"lirf.temperature=0"}), ConfigError);
    EXPECT_THROW(with_overrides(ExperimentConfig{}, {"lirf.epochs=-1"}), ConfigError);
    EXPECT_THROW(with_overrides(ExperimentConfig{}, {"lirf.prune_rate=1"}), ConfigError);
    EXPECT_THROW(with_overrides(ExperimentConfig{}, {"model.split=4"}), ConfigError);
    EXPECT_THROW(with_overrides(ExperimentConfig{}, {"sweep.n_grid=[4]"}), ConfigError);
    EXPECT_THROW(with_overrides(ExperimentConfig{}, {"lirf.deposit_classes=[10]"}), ConfigError);
    EXPECT_THROW(with_overrides(ExperimentConfig{}, {"eval.attack_train_set=\"half\""}), ConfigError);
    EXPECT_THROW(with_overrides(ExperimentConfig{}, {"dataset.source=\"file\""}), ConfigError);
    EXPECT_THROW(parse_config_text("{not json"), ConfigError);
}

TEST(Config, HashCoversEverythingButOutput) {
    ExperimentConfig a, b;
    EXPECT_EQ(config_hash(a), config_hash(b));
    b.output = "other";
    EXPECT_EQ(config_hash(a), config_hash(b));
    b.seed = 1;
    EXPECT_NE(config_hash(a), config_hash(b));
    b = a;
    b.lirf.lambda_at = 0;
    EXPECT_NE(config_hash(a), config_hash(b));
    EXPECT_EQ(config_hash(a).size(), 16u);
}

TEST(Config, DefaultsTableListsFlatKeys) {
    auto rows = defaults_table();
    auto find = [&](const std::string& k) {
        for (auto& [key, v] : rows)
            if (key == k) return v;
        return std::string("<missing>");
    };
    EXPECT_EQ(find("lirf.lambda_kp"), "10.0");
    EXPECT_EQ(find("lirf.temperature"), "10.0");
    EXPECT_EQ(find("model.split"), "2");
    EXPECT_EQ(find("sweep.n_grid"), "[1,2,3]");
}

TEST(Cli, ExitCodes) {
    auto dir = scratch_dir("cli_codes");
    EXPECT_EQ(cli("defaults", dir).code, 0);
    auto d = cli("defaults --json", dir);
    EXPECT_EQ(d.code, 0);
    EXPECT_EQ(parse_config_text(d.out), ExperimentConfig{});
    EXPECT_EQ(cli("train --set lirf.bogus=1 --out " + dir.string(), dir).code, 2);
    EXPECT_EQ(cli("train --config " + (dir / "missing.json").string(), dir).code, 2);
    EXPECT_EQ(cli("frobnicate", dir).code, 2);
    auto cfg = write_config(dir, tiny_config());
    auto w = cli("withdraw --config " + cfg.string() + " --out " + (dir / "runs").string(), dir);
    EXPECT_EQ(w.code, 3);
    EXPECT_NE(w.out.find("deposit"), std::string::npos) << w.out;
    auto dep = cli("deposit --config " + cfg.string() + " --out " + (dir / "runs").string(), dir);
    EXPECT_EQ(dep.code, 3);
    EXPECT_NE(dep.out.find("train"), std::string::npos) << dep.out;
}

TEST(Cli, PipelineManifestsSweepAndIdempotence) {
    auto dir = scratch_dir("cli_pipeline");
    auto cfg_path = write_config(dir, tiny_config());
    const std::string common = " --config " + cfg_path.string() + " --seed 3 --out " + (dir / "runs").string();
    for (const char* cmd : {"train", "deposit", "withdraw", "eval", "attack", "sweep"}) {
        auto r = cli(std::string(cmd) + common, dir);
        ASSERT_EQ(r.code, 0) << cmd << ": " << r.out;
    }
    ExperimentConfig c = with_overrides(parse_config(tiny_config()), {"seed=3"});
    const fs::path base = dir / "runs" / config_hash(c);
    for (const char* cmd : {"train", "deposit", "withdraw", "eval", "attack", "sweep"}) {
        const fs::path m = base / cmd / "manifest.json";
        ASSERT_TRUE(fs::exists(m)) << m;
        auto j = nlohmann::json::parse(slurp(m));
        EXPECT_EQ(j.at("command"), cmd);
        EXPECT_EQ(j.at("config_hash"), config_hash(c));
        EXPECT_EQ(j.at("seed"), 3);
        EXPECT_EQ(j.at("engine_version"), kEngineVersion);
        for (const auto& [name, path] : j.at("artifacts").items()) {
            EXPECT_TRUE(fs::exists(path.get<std::string>())) << name;
        }
    }
    // Sweep: one row per grid point, fixed header.
    std::ifstream csv(base / "sweep" / "sweep.csv");
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "n,p,pre_acc,dep_acc,recover_avg_acc");
    std::size_t rows = 0;
    while (std::getline(csv, line)) ++rows;
    EXPECT_EQ(rows, 4u);

    // Re-running gives bit-identical artifacts.
    const auto ckpt = slurp(base / "train" / "original.ckpt");
    const auto target = slurp(base / "deposit" / "target.ckpt");
    const auto report = nlohmann::json::parse(slurp(base / "deposit" / "report.json"));
    ASSERT_EQ(cli(std::string("train") + common, dir).code, 0);
    ASSERT_EQ(cli(std::string("deposit") + common, dir).code, 0);
    EXPECT_EQ(slurp(base / "train" / "original.ckpt"), ckpt);
    EXPECT_EQ(slurp(base / "deposit" / "target.ckpt"), target);
    auto again = nlohmann::json::parse(slurp(base / "deposit" / "report.json"));
    again.erase("started_at");
    again.erase("finished_at");
    auto first = report;
    first.erase("started_at");
    first.erase("finished_at");
    EXPECT_EQ(again, first);

    // A tampered manifest is refused.
    auto m = nlohmann::json::parse(slurp(base / "deposit" / "manifest.json"));
    m["config_hash"] = "0000000000000000";
    std::ofstream(base / "deposit" / "manifest.json") << m.dump();
    EXPECT_EQ(cli(std::string("eval") + common, dir).code, 2);
}

TEST(Pipeline, TrainWithZeroEpochsIsNearChance) {
    auto dir = scratch_dir("pipeline_zero");
    auto j = tiny_config();
    j["model"]["epochs"] = 0;
    j["dataset"]["test_per_class"] = 50;
    ExperimentConfig c = parse_config(j);
    lirf::Run run(c, dir);
    auto r = cmd_train(run);
    const double avg = r.report.at("metrics").at("avg_acc");
    EXPECT_LT(avg, 60.0);
}

TEST(Pipeline, FileDatasetSource) {
    auto dir = scratch_dir("pipeline_file");
    SyntheticParams p;
    p.num_classes = 4;
    p.shape = {1, 8, 8};
    auto tt = gen_synthetic_split(p, 3, 2, 1);
    tt.train.save(dir / "train.lds");
    tt.test.save(dir / "test.lds");
    auto j = tiny_config();
    j["dataset"]["source"] = "file";
    j["dataset"]["train_path"] = (dir / "train.lds").string();
    j["dataset"]["test_path"] = (dir / "test.lds").string();
    auto data = load_data(parse_config(j));
    EXPECT_EQ(data.train, tt.train);
    j["dataset"]["num_classes"] = 5;
    EXPECT_THROW(load_data(parse_config(j)), Error);
}
