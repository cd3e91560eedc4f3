// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "lirf/binary_io.hpp"
#include "lirf/blocknet.hpp"
#include "lirf/deposit.hpp"
#include "lirf/eval.hpp"
#include "lirf/losses.hpp"

namespace lirf {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "64-bit size_t expected");

inline constexpr const char* kEngineVersion = "0.1.0";

struct DatasetConfig {
    std::string source = "synthetic"; // synthetic | file
    std::size_t num_classes = 10;
    Shape shape{1, 16, 16};
    std::size_t train_per_class = 100;
    std::size_t test_per_class = 50;
    double noise = 1.0;
    std::size_t max_shift = 1;
    std::uint64_t template_seed = 7;
    std::uint64_t seed = 1;
    std::string train_path;
    std::string test_path;

    bool operator==(const DatasetConfig&) const = default;
};

struct ModelConfig {
    std::vector<BlockConfig> blocks = BlockSpec::desk_default().blocks;
    std::size_t kernel = 3;
    std::size_t split = 2;
    std::size_t epochs = 20;
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::size_t batch_size = 32;
    bool augment = true;

    bool operator==(const ModelConfig&) const = default;
};

struct LirfConfig {
    std::vector<std::size_t> deposit_classes; // empty: use deposit_fraction
    double deposit_fraction = 0.3;
    double lambda_at = 1.0;
    double lambda_kp = 10.0;
    double lambda_pt = 10.0;
    double lambda_re = 10.0;
    double temperature = 10.0;
    double epsilon = 0.05;
    double prune_rate = 0.5;
    std::size_t epochs = 20;
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::size_t batch_size = 32;
    bool augment = true;
    bool resample_y_r = false;
    bool exclude_true_label = false;
    bool select_then_softmax = true;

    bool operator==(const LirfConfig&) const = default;
};

struct AttackEntry {
    AttackMode mode = AttackMode::Logit;
    double temperature = 4.0;
    double distill_weight = 1.0;
    std::size_t epochs = 10;
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::size_t batch_size = 32;
    std::optional<std::vector<BlockConfig>> student_blocks; // plain student when unset
    std::size_t student_split = 2;

    bool operator==(const AttackEntry&) const = default;
};

struct EvalConfig {
    std::vector<AttackEntry> attacks{AttackEntry{}};
    std::string attack_train_set = "full"; // full | deposit
    bool export_features = false;

    bool operator==(const EvalConfig&) const = default;
};

struct SweepConfig {
    std::vector<std::size_t> n_grid{1, 2, 3};
    std::vector<double> p_grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};

    bool operator==(const SweepConfig&) const = default;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    DatasetConfig dataset;
    ModelConfig model;
    LirfConfig lirf;
    EvalConfig eval;
    SweepConfig sweep;
    std::string output = "runs";

    bool operator==(const ExperimentConfig&) const = default;

    BlockSpec model_spec() const {
        BlockSpec s;
        s.input = dataset.shape;
        s.blocks = model.blocks;
        s.kernel = model.kernel;
        s.split = model.split;
        s.num_classes = dataset.num_classes;
        return s;
    }

    ClassPartition partition() const {
        if (!lirf.deposit_classes.empty()) return ClassPartition::from_deposit(dataset.num_classes, lirf.deposit_classes);
        return ClassPartition::first_fraction(dataset.num_classes, lirf.deposit_fraction);
    }

    TrainConfig train_config() const {
        return {model.epochs, model.learning_rate, model.momentum, model.batch_size, seed, model.augment};
    }

    DepositConfig deposit_config() const {
        DepositConfig d;
        d.weights = {lirf.lambda_at, lirf.lambda_kp,   lirf.lambda_pt,          lirf.lambda_re,
                     lirf.temperature, lirf.epsilon, lirf.select_then_softmax};
        d.epochs = lirf.epochs;
        d.learning_rate = lirf.learning_rate;
        d.momentum = lirf.momentum;
        d.batch_size = lirf.batch_size;
        d.seed = seed + 1;
        d.prune_rate = lirf.prune_rate;
        d.split = model.split;
        d.augment = lirf.augment;
        d.resample_random_labels = lirf.resample_y_r;
        d.exclude_true_label = lirf.exclude_true_label;
        return d;
    }

    AttackConfig attack_config(std::size_t i) const {
        const AttackEntry& e = eval.attacks.at(i);
        AttackConfig a;
        if (e.student_blocks) {
            BlockSpec s;
            s.input = dataset.shape;
            s.blocks = *e.student_blocks;
            s.kernel = model.kernel;
            s.split = e.student_split;
            s.num_classes = dataset.num_classes;
            a.student = s;
        }
        a.mode = e.mode;
        a.temperature = e.temperature;
        a.distill_weight = e.distill_weight;
        a.epochs = e.epochs;
        a.learning_rate = e.learning_rate;
        a.momentum = e.momentum;
        a.batch_size = e.batch_size;
        a.seed = seed + 2 + i;
        return a;
    }
};

// ---- emit -------------------------------------------------------------------------

namespace detail {

inline nlohmann::json blocks_to_json(const std::vector<BlockConfig>& blocks) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& b : blocks) a.push_back({{"kind", to_string(b.kind)}, {"width", b.width}});
    return a;
}

} // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
    using nlohmann::json;
    const auto& d = c.dataset;
    const auto& m = c.model;
    const auto& l = c.lirf;
    json attacks = json::array();
    for (const auto& a : c.eval.attacks) {
        attacks.push_back({{"mode", to_string(a.mode)},
                           {"temperature", a.temperature},
                           {"distill_weight", a.distill_weight},
                           {"epochs", a.epochs},
                           {"lr", a.learning_rate},
                           {"momentum", a.momentum},
                           {"batch_size", a.batch_size},
                           {"student_blocks", a.student_blocks ? detail::blocks_to_json(*a.student_blocks) : json(nullptr)},
                           {"student_split", a.student_split}});
    }
    return {
        {"seed", c.seed},
        {"output", c.output},
        {"dataset",
         {{"source", d.source},
          {"num_classes", d.num_classes},
          {"shape", d.shape},
          {"train_per_class", d.train_per_class},
          {"test_per_class", d.test_per_class},
          {"noise", d.noise},
          {"max_shift", d.max_shift},
          {"template_seed", d.template_seed},
          {"seed", d.seed},
          {"train_path", d.train_path},
          {"test_path", d.test_path}}},
        {"model",
         {{"blocks", detail::blocks_to_json(m.blocks)},
          {"kernel", m.kernel},
          {"split", m.split},
          {"epochs", m.epochs},
          {"lr", m.learning_rate},
          {"momentum", m.momentum},
          {"batch_size", m.batch_size},
          {"augment", m.augment}}},
        {"lirf",
         {{"deposit_classes", l.deposit_classes},
          {"deposit_fraction", l.deposit_fraction},
          {"lambda_at", l.lambda_at},
          {"lambda_kp", l.lambda_kp},
          {"lambda_pt", l.lambda_pt},
          {"lambda_re", l.lambda_re},
          {"temperature", l.temperature},
          {"epsilon", l.epsilon},
          {"prune_rate", l.prune_rate},
          {"epochs", l.epochs},
          {"lr", l.learning_rate},
          {"momentum", l.momentum},
          {"batch_size", l.batch_size},
          {"augment", l.augment},
          {"resample_y_r", l.resample_y_r},
          {"exclude_true_label", l.exclude_true_label},
          {"select_then_softmax", l.select_then_softmax}}},
        {"eval",
         {{"attacks", attacks},
          {"attack_train_set", c.eval.attack_train_set},
          {"export_features", c.eval.export_features}}},
        {"sweep", {{"n_grid", c.sweep.n_grid}, {"p_grid", c.sweep.p_grid}}},
    };
}

// ---- strict parse -----------------------------------------------------------------

namespace detail {

/// Walks one JSON object, rejecting keys that nobody asked for.
class StrictObject {
  public:
    StrictObject(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) throw ConfigError(key(k), "unknown key");
        }
    }

    std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

    const nlohmann::json* get(const std::string& k) {
        seen_.insert(k);
        auto it = j_.find(k);
        return it == j_.end() ? nullptr : &*it;
    }

    void read(const std::string& k, double& out) {
        if (auto v = get(k)) {
            if (!v->is_number()) throw ConfigError(key(k), "expected a number");
            out = v->get<double>();
        }
    }
    void read(const std::string& k, std::size_t& out) {
        if (auto v = get(k)) out = as_unsigned(*v, key(k));
    }
    void read(const std::string& k, bool& out) {
        if (auto v = get(k)) {
            if (!v->is_boolean()) throw ConfigError(key(k), "expected true or false");
            out = v->get<bool>();
        }
    }
    void read(const std::string& k, std::string& out) {
        if (auto v = get(k)) {
            if (!v->is_string()) throw ConfigError(key(k), "expected a string");
            out = v->get<std::string>();
        }
    }
    void read(const std::string& k, std::vector<std::size_t>& out) {
        if (auto v = get(k)) {
            if (!v->is_array()) throw ConfigError(key(k), "expected an array");
            out.clear();
            for (std::size_t i = 0; i < v->size(); ++i) out.push_back(as_unsigned((*v)[i], key(k) + "." + std::to_string(i)));
        }
    }
    void read(const std::string& k, std::vector<double>& out) {
        if (auto v = get(k)) {
            if (!v->is_array()) throw ConfigError(key(k), "expected an array");
            out.clear();
            for (std::size_t i = 0; i < v->size(); ++i) {
                if (!(*v)[i].is_number()) throw ConfigError(key(k) + "." + std::to_string(i), "expected a number");
                out.push_back((*v)[i].get<double>());
            }
        }
    }
    void read(const std::string& k, std::vector<BlockConfig>& out) {
        if (auto v = get(k)) out = parse_blocks(*v, key(k));
    }

    static std::size_t as_unsigned(const nlohmann::json& v, const std::string& path) {
        if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
            throw ConfigError(path, "expected a non-negative integer");
        }
        return v.get<std::size_t>();
    }

    static std::vector<BlockConfig> parse_blocks(const nlohmann::json& v, const std::string& path) {
        if (!v.is_array()) throw ConfigError(path, "expected an array of blocks");
        std::vector<BlockConfig> out;
        for (std::size_t i = 0; i < v.size(); ++i) {
            StrictObject b(v[i], path + "." + std::to_string(i));
            std::string kind = "conv_relu_pool";
            std::size_t width = 0;
            b.read("kind", kind);
            b.read("width", width);
            b.finish();
            try {
                out.push_back({block_kind_from_string(kind), width});
            } catch (const Error& e) {
                throw ConfigError(b.key("kind"), e.what());
            }
        }
        return out;
    }

  private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

} // namespace detail

inline void validate(const ExperimentConfig& c) {
    const auto& d = c.dataset;
    if (d.source != "synthetic" && d.source != "file") throw ConfigError("dataset.source", "must be synthetic or file");
    if (d.source == "file" && (d.train_path.empty() || d.test_path.empty())) {
        throw ConfigError("dataset.train_path", "file source needs train_path and test_path");
    }
    if (d.num_classes < 2) throw ConfigError("dataset.num_classes", "must be >= 2");
    if (d.shape.size() != 3 || numel(d.shape) == 0) throw ConfigError("dataset.shape", "must be [C, H, W] with nonzero dims");
    if (d.source == "synthetic" && (d.train_per_class == 0 || d.test_per_class == 0)) {
        throw ConfigError("dataset.train_per_class", "synthetic sizes must be positive");
    }
    if (d.noise < 0) throw ConfigError("dataset.noise", "must be >= 0");
    try {
        c.model_spec().validate();
    } catch (const SpecMismatchError& e) {
        throw ConfigError("model", e.what());
    }
    if (c.model.batch_size == 0) throw ConfigError("model.batch_size", "must be positive");
    if (!(c.model.learning_rate > 0)) throw ConfigError("model.lr", "must be > 0");
    try {
        (void)c.partition();
    } catch (const DataError& e) {
        throw ConfigError(c.lirf.deposit_classes.empty() ? "lirf.deposit_fraction" : "lirf.deposit_classes", e.what());
    }
    c.deposit_config().validate();
    for (std::size_t i = 0; i < c.eval.attacks.size(); ++i) {
        try {
            AttackConfig a = c.attack_config(i);
            a.validate();
            if (a.student) a.student->validate();
        } catch (const ConfigError& e) {
            throw ConfigError("eval.attacks." + std::to_string(i) + "." + e.path().substr(e.path().find('.') + 1), e.message());
        } catch (const SpecMismatchError& e) {
            throw ConfigError("eval.attacks." + std::to_string(i) + ".student_blocks", e.what());
        }
    }
    if (c.eval.attack_train_set != "full" && c.eval.attack_train_set != "deposit") {
        throw ConfigError("eval.attack_train_set", "must be full or deposit");
    }
    if (c.sweep.n_grid.empty() || c.sweep.p_grid.empty()) throw ConfigError("sweep", "grids must be nonempty");
    for (std::size_t n : c.sweep.n_grid) {
        if (n < 1 || n >= c.model.blocks.size()) throw ConfigError("sweep.n_grid", "split outside [1, block count)");
    }
    for (double p : c.sweep.p_grid) {
        if (!(p >= 0.0 && p < 1.0)) throw ConfigError("sweep.p_grid", "prune rates must be in [0, 1)");
    }
}

/// Strict parse: missing keys take defaults, unknown keys are errors.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
    ExperimentConfig c;
    {
        detail::StrictObject root(j, "");
        root.read("seed", c.seed);
        root.read("output", c.output);
        if (auto v = root.get("dataset")) {
            detail::StrictObject o(*v, "dataset");
            auto& d = c.dataset;
            o.read("source", d.source);
            o.read("num_classes", d.num_classes);
            o.read("shape", d.shape);
            o.read("train_per_class", d.train_per_class);
            o.read("test_per_class", d.test_per_class);
            o.read("noise", d.noise);
            o.read("max_shift", d.max_shift);
            o.read("template_seed", d.template_seed);
            o.read("seed", d.seed);
            o.read("train_path", d.train_path);
            o.read("test_path", d.test_path);
            o.finish();
        }
        if (auto v = root.get("model")) {
            detail::StrictObject o(*v, "model");
            auto& m = c.model;
            o.read("blocks", m.blocks);
            o.read("kernel", m.kernel);
            o.read("split", m.split);
            o.read("epochs", m.epochs);
            o.read("lr", m.learning_rate);
            o.read("momentum", m.momentum);
            o.read("batch_size", m.batch_size);
            o.read("augment", m.augment);
            o.finish();
        }
        if (auto v = root.get("lirf")) {
            detail::StrictObject o(*v, "lirf");
            auto& l = c.lirf;
            o.read("deposit_classes", l.deposit_classes);
            o.read("deposit_fraction", l.deposit_fraction);
            o.read("lambda_at", l.lambda_at);
            o.read("lambda_kp", l.lambda_kp);
            o.read("lambda_pt", l.lambda_pt);
            o.read("lambda_re", l.lambda_re);
            o.read("temperature", l.temperature);
            o.read("epsilon", l.epsilon);
            o.read("prune_rate", l.prune_rate);
            o.read("epochs", l.epochs);
            o.read("lr", l.learning_rate);
            o.read("momentum", l.momentum);
            o.read("batch_size", l.batch_size);
            o.read("augment", l.augment);
            o.read("resample_y_r", l.resample_y_r);
            o.read("exclude_true_label", l.exclude_true_label);
            o.read("select_then_softmax", l.select_then_softmax);
            o.finish();
        }
        if (auto v = root.get("eval")) {
            detail::StrictObject o(*v, "eval");
            if (auto a = o.get("attacks")) {
                if (!a->is_array()) throw ConfigError("eval.attacks", "expected an array");
                c.eval.attacks.clear();
                for (std::size_t i = 0; i < a->size(); ++i) {
                    detail::StrictObject ao((*a)[i], "eval.attacks." + std::to_string(i));
                    AttackEntry e;
                    std::string mode = to_string(e.mode);
                    ao.read("mode", mode);
                    try {
                        e.mode = attack_mode_from_string(mode);
                    } catch (const ConfigError& err) {
                        throw ConfigError(ao.key("mode"), err.message());
                    }
                    ao.read("temperature", e.temperature);
                    ao.read("distill_weight", e.distill_weight);
                    ao.read("epochs", e.epochs);
                    ao.read("lr", e.learning_rate);
                    ao.read("momentum", e.momentum);
                    ao.read("batch_size", e.batch_size);
                    if (auto s = ao.get("student_blocks"); s && !s->is_null()) {
                        e.student_blocks = detail::StrictObject::parse_blocks(*s, ao.key("student_blocks"));
                    }
                    ao.read("student_split", e.student_split);
                    ao.finish();
                    c.eval.attacks.push_back(std::move(e));
                }
            }
            o.read("attack_train_set", c.eval.attack_train_set);
            o.read("export_features", c.eval.export_features);
            o.finish();
        }
        if (auto v = root.get("sweep")) {
            detail::StrictObject o(*v, "sweep");
            o.read("n_grid", c.sweep.n_grid);
            o.read("p_grid", c.sweep.p_grid);
            o.finish();
        }
        root.finish();
    }
    validate(c);
    return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
    }
    return parse_config(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("--config", "cannot read " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_config_text(text);
}

/// Applies `key.path=value`. The value is read as JSON when it parses, as a
/// plain string otherwise. Array elements are addressed by index.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key.path=value");
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    nlohmann::json* cur = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        nlohmann::json* next = nullptr;
        if (cur->is_object()) {
            auto it = cur->find(part);
            if (it == cur->end()) throw ConfigError(path, "unknown key");
            next = &*it;
        } else if (cur->is_array()) {
            std::size_t idx = 0;
            try {
                std::size_t used = 0;
                idx = std::stoul(part, &used);
                if (used != part.size()) throw std::invalid_argument(part);
            } catch (const std::exception&) {
                throw ConfigError(path, "'" + part + "' is not an array index");
            }
            if (idx >= cur->size()) throw ConfigError(path, "array index out of range");
            next = &(*cur)[idx];
        } else {
            throw ConfigError(path, "cannot descend into a scalar");
        }
        if (dot == std::string::npos) {
            *next = std::move(value);
            return;
        }
        cur = next;
        start = dot + 1;
    }
}

inline ExperimentConfig with_overrides(const ExperimentConfig& base, const std::vector<std::string>& overrides) {
    nlohmann::json j = to_json(base);
    for (const auto& o : overrides) apply_override(j, o);
    return parse_config(j);
}

/// CRC-64 of the canonical JSON form, output location excluded.
inline std::string config_hash(const ExperimentConfig& c) {
    nlohmann::json j = to_json(c);
    j.erase("output");
    const std::string s = j.dump();
    return hex64(crc64(std::string_view(s)));
}

/// `key.path = value` rows of the defaults; arrays stay whole.
inline std::vector<std::pair<std::string, std::string>> defaults_table() {
    std::vector<std::pair<std::string, std::string>> rows;
    auto walk = [&](auto&& self, const nlohmann::json& j, const std::string& prefix) -> void {
        for (const auto& [k, v] : j.items()) {
            const std::string key = prefix.empty() ? k : prefix + "." + k;
            if (v.is_object()) {
                self(self, v, key);
            } else {
                rows.emplace_back(key, v.dump());
            }
        }
    };
    walk(walk, to_json(ExperimentConfig{}), "");
    return rows;
}

} // namespace lirf
