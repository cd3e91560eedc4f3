// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "lirf.hpp"

namespace {

struct Options {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> overrides;
};

lirf::ExperimentConfig resolve(const Options& o) {
    lirf::ExperimentConfig cfg = o.config_path.empty() ? lirf::ExperimentConfig{} : lirf::load_config(o.config_path);
    std::vector<std::string> sets = o.overrides;
    if (o.seed) sets.push_back("seed=" + std::to_string(*o.seed));
    if (!o.out.empty()) sets.push_back("output=" + nlohmann::json(o.out).dump());
    return lirf::with_overrides(cfg, sets);
}

void print_metrics(const std::string& label, const nlohmann::json& m) {
    std::printf("  %-10s pre %6.2f  dep %6.2f  avg %6.2f", label.c_str(), m.at("pre_acc").get<double>(),
                m.at("dep_acc").get<double>(), m.at("avg_acc").get<double>());
    if (m.at("f").get<double>() != 0.0) {
        std::printf("  F %6.2f  H %6.2f", m.at("f").get<double>(), m.at("h_mean").get<double>());
    }
    std::printf("\n");
}

int run_command(const std::string& name, const Options& o) {
    const lirf::ExperimentConfig cfg = resolve(o);
    const lirf::Run run(cfg, cfg.output);
    lirf::CommandResult r;
    if (name == "train") r = lirf::cmd_train(run);
    else if (name == "deposit") r = lirf::cmd_deposit(run);
    else if (name == "withdraw") r = lirf::cmd_withdraw(run);
    else if (name == "eval") r = lirf::cmd_eval(run);
    else if (name == "attack") r = lirf::cmd_attack(run);
    else r = lirf::cmd_sweep(run);

    std::printf("%s -> %s\n", name.c_str(), r.dir.string().c_str());
    const auto& rep = r.report;
    if (rep.contains("metrics")) {
        const auto& m = rep.at("metrics");
        if (m.contains("pre_acc")) {
            print_metrics(name, m);
        } else {
            for (const auto& [k, v] : m.items()) print_metrics(k, v);
        }
    }
    if (rep.contains("attacks")) {
        for (const auto& a : rep.at("attacks")) {
            std::printf("  %-9s T=%-5g student<-original dep %6.2f pre %6.2f | student<-target dep %6.2f pre %6.2f\n",
                        a.at("mode").get<std::string>().c_str(), a.at("temperature").get<double>(),
                        a.at("from_original").at("dep_acc").get<double>(),
                        a.at("from_original").at("pre_acc").get<double>(),
                        a.at("from_target").at("dep_acc").get<double>(),
                        a.at("from_target").at("pre_acc").get<double>());
        }
    }
    if (rep.contains("points")) std::printf("  %zu grid points written to sweep.csv\n", rep.at("points").size());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"lirf: deposit and withdraw class knowledge in block networks"};
    app.require_subcommand(1);
    Options opts;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opts.config_path, "experiment config (JSON)");
        sub->add_option("--seed", opts.seed, "override the top-level seed");
        sub->add_option("--out", opts.out, "output root directory");
        sub->add_option("--set", opts.overrides, "override key.path=value (repeatable)");
    };
    std::string active;
    const std::pair<const char*, const char*> commands[] = {
        {"train", "train the original network"},
        {"deposit", "move the deposit classes into a vault, producing the target network"},
        {"withdraw", "compose target and vault into the recover network"},
        {"eval", "score original, target and recover networks"},
        {"attack", "distill students from original and target"},
        {"sweep", "deposit and withdraw over the split/prune-rate grid"},
    };
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        add_common(sub);
        sub->callback([&active, name] { active = name; });
    }
    bool as_json = false;
    auto* defaults = app.add_subcommand("defaults", "print the default configuration");
    defaults->add_flag("--json", as_json, "emit the full default config as JSON");
    defaults->callback([&active] { active = "defaults"; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (active == "defaults") {
            if (as_json) {
                std::cout << lirf::to_json(lirf::ExperimentConfig{}).dump(2) << '\n';
            } else {
                for (const auto& [k, v] : lirf::defaults_table()) std::cout << k << " = " << v << '\n';
            }
            return 0;
        }
        return run_command(active, opts);
    } catch (const lirf::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const lirf::PrerequisiteError& e) {
        std::cerr << "missing prerequisite: " << e.what() << '\n';
        return 3;
    } catch (const lirf::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
