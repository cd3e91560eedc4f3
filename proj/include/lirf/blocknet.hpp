// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lirf/checkpoint.hpp"
#include "lirf/ops.hpp"
#include "lirf/tensor.hpp"

namespace lirf {

enum class BlockKind { ConvReluPool, ConvRelu, LinearRelu };

inline const char* to_string(BlockKind k) {
    switch (k) {
    case BlockKind::ConvReluPool: return "conv-relu-pool";
    case BlockKind::ConvRelu: return "conv-relu";
    case BlockKind::LinearRelu: return "linear-relu";
    }
    return "?";
}

inline BlockKind block_kind_from_string(const std::string& s) {
    if (s == "conv-relu-pool") return BlockKind::ConvReluPool;
    if (s == "conv-relu") return BlockKind::ConvRelu;
    if (s == "linear-relu") return BlockKind::LinearRelu;
    throw FormatError("unknown block kind '" + s + "'");
}

inline bool is_conv(BlockKind k) { return k != BlockKind::LinearRelu; }

struct BlockConfig {
    BlockKind kind = BlockKind::ConvReluPool;
    std::size_t width = 16; // output channels (conv) or units (linear)

    bool operator==(const BlockConfig&) const = default;
};

/// Architecture of a block classifier. `split` is the number of blocks in the
/// lower part; blocks [split, end) plus the head form the upper part.
struct BlockSpec {
    Shape input{1, 16, 16}; // C x H x W
    std::vector<BlockConfig> blocks;
    std::size_t kernel = 3;
    std::size_t split = 2;
    std::size_t num_classes = 10;

    bool operator==(const BlockSpec&) const = default;

    static BlockSpec desk_default(Shape input = {1, 16, 16}, std::size_t num_classes = 10) {
        BlockSpec s;
        s.input = std::move(input);
        s.blocks = {{BlockKind::ConvReluPool, 16},
                    {BlockKind::ConvReluPool, 32},
                    {BlockKind::ConvReluPool, 64},
                    {BlockKind::ConvRelu, 64}};
        s.split = 2;
        s.num_classes = num_classes;
        return s;
    }

    std::size_t total_blocks() const noexcept { return blocks.size(); }

    /// Per-sample output shape of block i-1 (i == 0 gives the input shape).
    Shape feature_shape(std::size_t i) const {
        Shape s = input;
        for (std::size_t b = 0; b < i; ++b) s = next_shape(s, blocks.at(b), b);
        return s;
    }

    std::size_t head_inputs() const { return numel(feature_shape(blocks.size())); }

    void validate() const {
        if (input.size() != 3 || numel(input) == 0) {
            throw SpecMismatchError("spec: input must be C x H x W, got " + shape_str(input));
        }
        if (blocks.size() < 2) throw SpecMismatchError("spec: need at least 2 blocks");
        if (split < 1 || split >= blocks.size()) {
            throw SpecMismatchError("spec: split " + std::to_string(split) + " must be in [1, " +
                                    std::to_string(blocks.size()) + ")");
        }
        if (num_classes < 2) throw SpecMismatchError("spec: need at least 2 classes");
        if (kernel == 0 || kernel % 2 == 0) throw SpecMismatchError("spec: kernel must be odd");
        for (const auto& b : blocks) {
            if (b.width == 0) throw SpecMismatchError("spec: zero-width block");
        }
        feature_shape(blocks.size());
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["input"] = input;
        j["kernel"] = kernel;
        j["split"] = split;
        j["num_classes"] = num_classes;
        j["blocks"] = nlohmann::json::array();
        for (const auto& b : blocks) j["blocks"].push_back({{"kind", to_string(b.kind)}, {"width", b.width}});
        return j;
    }

    static BlockSpec from_json(const nlohmann::json& j) {
        BlockSpec s;
        s.input = j.at("input").get<Shape>();
        s.kernel = j.at("kernel").get<std::size_t>();
        s.split = j.at("split").get<std::size_t>();
        s.num_classes = j.at("num_classes").get<std::size_t>();
        s.blocks.clear();
        for (const auto& b : j.at("blocks")) {
            s.blocks.push_back({block_kind_from_string(b.at("kind").get<std::string>()),
                                b.at("width").get<std::size_t>()});
        }
        return s;
    }

  private:
    Shape next_shape(const Shape& s, const BlockConfig& b, std::size_t index) const {
        if (is_conv(b.kind)) {
            if (s.size() != 3) {
                throw SpecMismatchError("spec: conv block " + std::to_string(index) +
                                        " follows a linear block");
            }
            Shape o{b.width, s[1], s[2]};
            if (b.kind == BlockKind::ConvReluPool) {
                if (s[1] < 2 || s[2] < 2) {
                    throw SpecMismatchError("spec: block " + std::to_string(index) +
                                            " cannot pool a " + shape_str(s) + " map");
                }
                o[1] /= 2;
                o[2] /= 2;
            }
            return o;
        }
        return Shape{b.width};
    }
};

/// One block's parameters. Conv weights are O x I x K x K, linear weights O x I.
struct Block {
    BlockKind kind = BlockKind::ConvReluPool;
    Tensor weight;
    Tensor bias;

    std::size_t out_width() const { return weight.dim(0); }
    std::size_t in_width() const { return weight.dim(1); }

    Block clone() const { return {kind, weight.clone(), bias.clone()}; }
};

inline Tensor forward_block(const Block& b, const Tensor& x) {
    if (is_conv(b.kind)) {
        const std::size_t pad = b.weight.dim(2) / 2;
        Tensor y = relu(conv2d(x, b.weight, b.bias, 1, pad));
        return b.kind == BlockKind::ConvReluPool ? avg_pool2x2(y) : y;
    }
    return relu(linear(flatten(x), b.weight, b.bias));
}

inline Tensor forward_blocks(std::span<const Block> blocks, Tensor x) {
    for (const auto& b : blocks) x = forward_block(b, x);
    return x;
}

inline std::size_t parameter_count(std::span<const Block> blocks) {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.weight.size() + b.bias.size();
    return n;
}

class BlockNet {
  public:
    BlockNet() = default;

    /// He-normal weights, zero biases, deterministic in `seed`.
    static BlockNet init(const BlockSpec& spec, std::uint64_t seed) {
        spec.validate();
        std::mt19937_64 rng(seed);
        BlockNet net;
        net.spec_ = spec;
        Shape in = spec.input;
        for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
            const auto& bc = spec.blocks[i];
            Shape wshape = is_conv(bc.kind) ? Shape{bc.width, in[0], spec.kernel, spec.kernel}
                                            : Shape{bc.width, numel(in)};
            const std::size_t fan_in = numel(wshape) / bc.width;
            net.blocks_.push_back({bc.kind, he_normal(wshape, fan_in, 2.0, rng),
                                   Tensor::parameter({bc.width}, std::vector<double>(bc.width, 0.0))});
            in = spec.feature_shape(i + 1);
        }
        const std::size_t f = numel(in);
        net.head_w_ = he_normal({spec.num_classes, f}, f, 1.0, rng);
        net.head_b_ = Tensor::parameter({spec.num_classes}, std::vector<double>(spec.num_classes, 0.0));
        return net;
    }

    const BlockSpec& spec() const noexcept { return spec_; }
    std::size_t split() const noexcept { return spec_.split; }
    std::size_t num_classes() const noexcept { return spec_.num_classes; }

    const std::vector<Block>& blocks() const noexcept { return blocks_; }
    std::vector<Block>& blocks() noexcept { return blocks_; }
    std::span<const Block> lower_blocks() const { return std::span(blocks_).first(spec_.split); }
    std::span<const Block> upper_blocks() const { return std::span(blocks_).subspan(spec_.split); }
    const Tensor& head_weight() const noexcept { return head_w_; }
    const Tensor& head_bias() const noexcept { return head_b_; }

    /// Output of blocks [0, split).
    Tensor forward_lower(const Tensor& x) const {
        check_batch("forward_lower", x, spec_.input);
        return forward_blocks(lower_blocks(), x);
    }

    /// Blocks [split, end), flatten, head.
    Tensor forward_upper(const Tensor& features) const {
        check_batch("forward_upper", features, spec_.feature_shape(spec_.split));
        return head(forward_blocks(upper_blocks(), features));
    }

    Tensor forward_full(const Tensor& x) const { return forward_upper(forward_lower(x)); }
    Tensor logits(const Tensor& x) const { return forward_full(x); }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> ps;
        for (const auto& b : blocks_) {
            ps.push_back(b.weight);
            ps.push_back(b.bias);
        }
        ps.push_back(head_w_);
        ps.push_back(head_b_);
        return ps;
    }

    std::vector<Tensor> lower_parameters() const {
        std::vector<Tensor> ps;
        for (const auto& b : lower_blocks()) {
            ps.push_back(b.weight);
            ps.push_back(b.bias);
        }
        return ps;
    }

    std::vector<Tensor> upper_parameters() const {
        std::vector<Tensor> ps;
        for (const auto& b : upper_blocks()) {
            ps.push_back(b.weight);
            ps.push_back(b.bias);
        }
        ps.push_back(head_w_);
        ps.push_back(head_b_);
        return ps;
    }

    /// Parameters an optimizer may update.
    std::vector<Tensor> trainable_parameters() const {
        std::vector<Tensor> ps;
        for (auto& p : parameters()) {
            if (p.requires_grad()) ps.push_back(p);
        }
        return ps;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p.size();
        return n;
    }

    void freeze_upper() {
        for (auto& p : upper_parameters()) p.set_requires_grad(false);
    }

    void freeze_all() {
        for (auto& p : parameters()) p.set_requires_grad(false);
    }

    /// Deep copy; gradient flags are preserved, gradients are not.
    BlockNet clone() const {
        BlockNet n;
        n.spec_ = spec_;
        for (const auto& b : blocks_) n.blocks_.push_back(b.clone());
        n.head_w_ = head_w_.clone();
        n.head_b_ = head_b_.clone();
        return n;
    }

    /// Same parameters (shared storage) viewed with a different split index.
    BlockNet with_split(std::size_t split) const {
        BlockNet n = *this;
        n.spec_.split = split;
        n.spec_.validate();
        return n;
    }

    void zero_head() {
        for (auto& v : head_w_.mutable_data()) v = 0.0;
        for (auto& v : head_b_.mutable_data()) v = 0.0;
    }

    Checkpoint to_checkpoint() const {
        Checkpoint ck;
        ck.header = {{"kind", "blocknet"}, {"spec", spec_.to_json()}};
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const std::string prefix = "block" + std::to_string(i);
            ck.tensors.push_back({prefix + ".weight", blocks_[i].weight.shape(), blocks_[i].weight.values()});
            ck.tensors.push_back({prefix + ".bias", blocks_[i].bias.shape(), blocks_[i].bias.values()});
        }
        ck.tensors.push_back({"head.weight", head_w_.shape(), head_w_.values()});
        ck.tensors.push_back({"head.bias", head_b_.shape(), head_b_.values()});
        return ck;
    }

    /// `expected`, when given, must match the stored spec exactly.
    static BlockNet from_checkpoint(const Checkpoint& ck, const std::optional<BlockSpec>& expected = {}) {
        if (ck.header.value("kind", "") != "blocknet") {
            throw SpecMismatchError("checkpoint does not hold a blocknet");
        }
        BlockSpec spec;
        try {
            spec = BlockSpec::from_json(ck.header.at("spec"));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("checkpoint spec header: ") + e.what());
        }
        if (expected && !(*expected == spec)) {
            throw SpecMismatchError("checkpoint spec " + spec.to_json().dump() +
                                    " does not match expected " + expected->to_json().dump());
        }
        spec.validate();
        BlockNet net = init(spec, 0);
        for (auto& p : net.named_parameters()) {
            const NamedTensor* t = ck.find(p.first);
            if (!t || t->shape != p.second.shape()) {
                throw SpecMismatchError("checkpoint tensor '" + p.first + "' missing or misshapen");
            }
            std::copy(t->values.begin(), t->values.end(), p.second.mutable_data().begin());
        }
        return net;
    }

    void save(const std::filesystem::path& path) const { to_checkpoint().save(path); }

    static BlockNet load(const std::filesystem::path& path, const std::optional<BlockSpec>& expected = {}) {
        return from_checkpoint(Checkpoint::load(path), expected);
    }

    /// CRC-64 of the serialized checkpoint; identifies the exact parameter values.
    std::uint64_t checksum() const { return to_checkpoint().checksum(); }

    std::vector<std::pair<std::string, Tensor>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const std::string prefix = "block" + std::to_string(i);
            out.emplace_back(prefix + ".weight", blocks_[i].weight);
            out.emplace_back(prefix + ".bias", blocks_[i].bias);
        }
        out.emplace_back("head.weight", head_w_);
        out.emplace_back("head.bias", head_b_);
        return out;
    }

  private:
    static Tensor he_normal(Shape shape, std::size_t fan_in, double gain, std::mt19937_64& rng) {
        std::normal_distribution<double> dist(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
        std::vector<double> v(numel(shape));
        for (auto& x : v) x = dist(rng);
        return Tensor::parameter(std::move(shape), std::move(v));
    }

    Tensor head(const Tensor& features) const { return linear(flatten(features), head_w_, head_b_); }

    static void check_batch(const char* op, const Tensor& x, const Shape& per_sample) {
        bool ok = x.rank() == per_sample.size() + 1;
        for (std::size_t d = 0; ok && d < per_sample.size(); ++d) ok = x.dim(d + 1) == per_sample[d];
        if (!ok) {
            throw ShapeError(std::string(op) + ": expected [B x " + shape_str(per_sample).substr(1) +
                             ", got " + shape_str(x.shape()));
        }
    }

    BlockSpec spec_;
    std::vector<Block> blocks_;
    Tensor head_w_;
    Tensor head_b_;
};

} // namespace lirf
