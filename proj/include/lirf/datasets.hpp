// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lirf/binary_io.hpp"
#include "lirf/losses.hpp"
#include "lirf/tensor.hpp"

namespace lirf {

/// Read-only, indexable labeled samples. Training loops only see data through
/// this interface, so a wrapper can audit exactly what was read.
class SampleSource {
  public:
    virtual ~SampleSource() = default;
    virtual std::size_t size() const = 0;
    virtual const Shape& sample_shape() const = 0;
    virtual std::size_t num_classes() const = 0;
    virtual int label(std::size_t i) const = 0;
    virtual void read_sample(std::size_t i, std::span<double> out) const = 0;
};

class LabeledDataset final : public SampleSource {
  public:
    LabeledDataset() = default;
    LabeledDataset(Shape sample_shape, std::vector<double> samples, std::vector<int> labels,
                   std::size_t num_classes, std::string split = "train")
        : shape_(std::move(sample_shape)), samples_(std::move(samples)), labels_(std::move(labels)),
          num_classes_(num_classes), split_(std::move(split)) {
        validate();
    }

    std::size_t size() const override { return labels_.size(); }
    const Shape& sample_shape() const override { return shape_; }
    std::size_t num_classes() const override { return num_classes_; }
    int label(std::size_t i) const override { return labels_.at(i); }
    void read_sample(std::size_t i, std::span<double> out) const override {
        const std::size_t n = numel(shape_);
        std::copy_n(samples_.begin() + static_cast<std::ptrdiff_t>(i * n), n, out.begin());
    }

    const std::vector<int>& labels() const noexcept { return labels_; }
    const std::vector<double>& samples() const noexcept { return samples_; }
    const std::string& split() const noexcept { return split_; }
    void set_split(std::string s) { split_ = std::move(s); }

    bool operator==(const LabeledDataset& o) const {
        return shape_ == o.shape_ && samples_ == o.samples_ && labels_ == o.labels_ &&
               num_classes_ == o.num_classes_ && split_ == o.split_;
    }

    void validate() const {
        if (labels_.empty()) throw DataError("dataset: no samples");
        if (samples_.size() != labels_.size() * numel(shape_)) {
            throw DataError("dataset: " + std::to_string(samples_.size()) + " values for " +
                            std::to_string(labels_.size()) + " samples of " + shape_str(shape_));
        }
        for (int y : labels_) {
            if (y < 0 || static_cast<std::size_t>(y) >= num_classes_) {
                throw DataError("dataset: label " + std::to_string(y) + " outside [0, " +
                                std::to_string(num_classes_) + ")");
            }
        }
        if (!all_finite(samples_)) throw DataError("dataset: non-finite sample value");
    }

    /// Samples whose label satisfies `keep`, in original order.
    template <class Pred>
    LabeledDataset filter(Pred keep) const {
        const std::size_t n = numel(shape_);
        std::vector<double> xs;
        std::vector<int> ys;
        for (std::size_t i = 0; i < labels_.size(); ++i) {
            if (!keep(labels_[i])) continue;
            xs.insert(xs.end(), samples_.begin() + static_cast<std::ptrdiff_t>(i * n),
                      samples_.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
            ys.push_back(labels_[i]);
        }
        if (ys.empty()) throw DataError("dataset: filter left no samples");
        return LabeledDataset(shape_, std::move(xs), std::move(ys), num_classes_, split_);
    }

    // LDS1 container: "LDS1" | u32 version | u32 C | u32 N | u32 rank |
    // u32 dims[rank] (per-sample shape) | f64 samples | u32 labels | u64 CRC-64
    static constexpr std::uint32_t kVersion = 1;

    std::vector<std::uint8_t> to_bytes() const {
        ByteWriter w;
        w.bytes("LDS1");
        w.u32(kVersion);
        w.u32(static_cast<std::uint32_t>(num_classes_));
        w.u32(static_cast<std::uint32_t>(labels_.size()));
        w.u32(static_cast<std::uint32_t>(shape_.size()));
        for (std::size_t d : shape_) w.u32(static_cast<std::uint32_t>(d));
        for (double v : samples_) w.f64(v);
        for (int y : labels_) w.u32(static_cast<std::uint32_t>(y));
        w.seal();
        return w.buffer();
    }

    void save(const std::filesystem::path& path) const { write_bytes(path, to_bytes()); }

    static LabeledDataset from_bytes(std::vector<std::uint8_t> bytes, const std::string& what,
                                     std::string split = "train") {
        if (bytes.size() < 4 || std::string_view(reinterpret_cast<const char*>(bytes.data()), 4) != "LDS1") {
            throw FormatError(what + ": bad magic");
        }
        ByteReader r(std::move(bytes));
        r.verify_checksum(what);
        r.bytes(4);
        if (const auto v = r.u32(); v != kVersion) {
            throw FormatError(what + ": unsupported version " + std::to_string(v));
        }
        const std::size_t C = r.u32();
        const std::size_t N = r.u32();
        const std::uint32_t rank = r.u32();
        if (rank > 8) throw FormatError(what + ": rank too large");
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32());
        const std::size_t total = N * numel(shape);
        if (total * 8 + N * 4 != r.remaining()) throw FormatError(what + ": payload size mismatch");
        std::vector<double> xs(total);
        for (auto& v : xs) v = r.f64();
        std::vector<int> ys(N);
        for (auto& y : ys) {
            const std::uint32_t raw = r.u32();
            if (raw >= C) {
                throw DataError(what + ": label " + std::to_string(raw) + " outside [0, " +
                                std::to_string(C) + ")");
            }
            y = static_cast<int>(raw);
        }
        return LabeledDataset(std::move(shape), std::move(xs), std::move(ys), C, std::move(split));
    }

    static LabeledDataset load(const std::filesystem::path& path, std::string split = "train") {
        return from_bytes(read_bytes(path), path.string(), std::move(split));
    }

    void export_labels_csv(const std::filesystem::path& path) const {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path);
        out << "index,label\n";
        for (std::size_t i = 0; i < labels_.size(); ++i) out << i << ',' << labels_[i] << '\n';
    }

  private:
    Shape shape_;
    std::vector<double> samples_;
    std::vector<int> labels_;
    std::size_t num_classes_ = 0;
    std::string split_ = "train";
};

/// Forwards to another source and counts every read.
class CountingSource final : public SampleSource {
  public:
    explicit CountingSource(const SampleSource& inner) : inner_(inner) {}

    std::size_t size() const override { return inner_.size(); }
    const Shape& sample_shape() const override { return inner_.sample_shape(); }
    std::size_t num_classes() const override { return inner_.num_classes(); }
    int label(std::size_t i) const override {
        ++label_reads_;
        return inner_.label(i);
    }
    void read_sample(std::size_t i, std::span<double> out) const override {
        ++sample_reads_;
        inner_.read_sample(i, out);
    }

    std::size_t sample_reads() const noexcept { return sample_reads_; }
    std::size_t label_reads() const noexcept { return label_reads_; }

  private:
    const SampleSource& inner_;
    mutable std::atomic<std::size_t> sample_reads_{0};
    mutable std::atomic<std::size_t> label_reads_{0};
};

struct Batch {
    Tensor x;
    std::vector<int> y;
};

inline Batch make_batch(const SampleSource& src, std::span<const std::size_t> indices) {
    const std::size_t n = numel(src.sample_shape());
    Shape shape{indices.size()};
    shape.insert(shape.end(), src.sample_shape().begin(), src.sample_shape().end());
    Tensor x(shape);
    std::vector<int> y;
    y.reserve(indices.size());
    auto data = x.mutable_data();
    for (std::size_t k = 0; k < indices.size(); ++k) {
        src.read_sample(indices[k], data.subspan(k * n, n));
        y.push_back(src.label(indices[k]));
    }
    return {x, std::move(y)};
}

inline Batch make_batch(const SampleSource& src, std::size_t begin, std::size_t end) {
    std::vector<std::size_t> idx(end - begin);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    return make_batch(src, idx);
}

// ---- synthetic data -----------------------------------------------------------

/// Class-conditional textured images: a fixed smooth random template per class,
/// randomly translated, plus white noise.
struct SyntheticParams {
    std::size_t num_classes = 10;
    Shape shape{1, 16, 16};
    std::uint64_t template_seed = 7;
    double noise = 1.0;
    std::size_t max_shift = 1;

    bool operator==(const SyntheticParams&) const = default;
};

namespace detail {

inline std::vector<double> make_template(const Shape& s, std::mt19937_64& rng) {
    const std::size_t C = s[0], H = s[1], W = s[2];
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> white(C * H * W);
    for (auto& v : white) v = normal(rng);
    // 3x3 box blur with wrap-around, then unit variance.
    std::vector<double> t(white.size(), 0.0);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                double acc = 0.0;
                for (std::size_t dy = 0; dy < 3; ++dy)
                    for (std::size_t dx = 0; dx < 3; ++dx)
                        acc += white[(c * H + (y + H + dy - 1) % H) * W + (x + W + dx - 1) % W];
                t[(c * H + y) * W + x] = acc / 9.0;
            }
    double m = 0.0, sq = 0.0;
    for (double v : t) m += v;
    m /= static_cast<double>(t.size());
    for (double v : t) sq += (v - m) * (v - m);
    const double sd = std::sqrt(sq / static_cast<double>(t.size()));
    for (auto& v : t) v = (v - m) / sd;
    return t;
}

} // namespace detail

inline LabeledDataset gen_synthetic(const SyntheticParams& p, std::size_t per_class_n, std::uint64_t seed,
                                    std::string split = "train") {
    if (p.num_classes < 2) throw DataError("gen_synthetic: need at least 2 classes");
    if (p.shape.size() != 3 || numel(p.shape) == 0) {
        throw DataError("gen_synthetic: shape must be C x H x W");
    }
    if (per_class_n == 0) throw DataError("gen_synthetic: per_class_n must be positive");
    std::mt19937_64 trng(p.template_seed);
    std::vector<std::vector<double>> templates;
    for (std::size_t c = 0; c < p.num_classes; ++c) templates.push_back(detail::make_template(p.shape, trng));

    const std::size_t C = p.shape[0], H = p.shape[1], W = p.shape[2], n = C * H * W;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<long> shift(-static_cast<long>(p.max_shift), static_cast<long>(p.max_shift));
    std::vector<double> xs;
    std::vector<int> ys;
    xs.reserve(per_class_n * p.num_classes * n);
    for (std::size_t i = 0; i < per_class_n; ++i) {
        for (std::size_t cls = 0; cls < p.num_classes; ++cls) {
            const long sy = shift(rng), sx = shift(rng);
            const auto& t = templates[cls];
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t y = 0; y < H; ++y)
                    for (std::size_t x = 0; x < W; ++x) {
                        const auto ty = static_cast<std::size_t>((static_cast<long>(y + H) + sy) % static_cast<long>(H));
                        const auto tx = static_cast<std::size_t>((static_cast<long>(x + W) + sx) % static_cast<long>(W));
                        xs.push_back(t[(c * H + ty) * W + tx] + p.noise * normal(rng));
                    }
            ys.push_back(static_cast<int>(cls));
        }
    }
    return LabeledDataset(p.shape, std::move(xs), std::move(ys), p.num_classes, std::move(split));
}

struct TrainTest {
    LabeledDataset train;
    LabeledDataset test;
};

/// Train and test drawn from the same class templates with independent noise.
inline TrainTest gen_synthetic_split(const SyntheticParams& p, std::size_t train_per_class,
                                     std::size_t test_per_class, std::uint64_t seed) {
    return {gen_synthetic(p, train_per_class, seed, "train"),
            gen_synthetic(p, test_per_class, seed ^ 0x9e3779b97f4a7c15ULL, "test")};
}

// ---- partitioning -------------------------------------------------------------

struct PartitionedData {
    LabeledDataset deposit_train, deposit_test;
    LabeledDataset preservation_train, preservation_test;
    ClassPartition partition;
};

inline PartitionedData partition(const LabeledDataset& train, const LabeledDataset& test,
                                 const ClassPartition& part) {
    if (train.num_classes() != part.num_classes() || test.num_classes() != part.num_classes()) {
        throw DataError("partition: class count mismatch");
    }
    auto dep = [&](int y) { return part.is_deposit(static_cast<std::size_t>(y)); };
    auto pre = [&](int y) { return !part.is_deposit(static_cast<std::size_t>(y)); };
    return {train.filter(dep), test.filter(dep), train.filter(pre), test.filter(pre), part};
}

// ---- augmentation ---------------------------------------------------------------

struct AugmentDraw {
    bool flip = false;
    std::size_t crop_y = 2, crop_x = 2; // offset into the 2-padded image; 2 == no shift
};

inline constexpr std::size_t kAugmentPad = 2;

/// Mirrors every image of a [B x C x H x W] tensor left-right.
inline Tensor hflip(const Tensor& x) {
    Tensor out(x.shape());
    const std::size_t W = x.dim(3), rows = x.size() / W;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < W; ++c) out.mutable_data()[r * W + c] = x.data()[r * W + (W - 1 - c)];
    return out;
}

inline std::vector<AugmentDraw> draw_augment(std::size_t batch, std::mt19937_64& rng) {
    std::bernoulli_distribution coin(0.5);
    std::uniform_int_distribution<std::size_t> off(0, 2 * kAugmentPad);
    std::vector<AugmentDraw> draws(batch);
    for (auto& d : draws) {
        d.flip = coin(rng);
        d.crop_y = off(rng);
        d.crop_x = off(rng);
    }
    return draws;
}

inline Tensor apply_augment(const Tensor& x, const std::vector<AugmentDraw>& draws) {
    if (x.rank() != 4 || draws.size() != x.dim(0)) {
        throw ShapeError("augment: expected one draw per image of " + shape_str(x.shape()));
    }
    const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out(x.shape());
    auto o = out.mutable_data();
    const auto in = x.data();
    for (std::size_t b = 0; b < draws.size(); ++b) {
        const auto& d = draws[b];
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx) {
                    // Output (y, xx) reads padded (y + crop_y, xx + crop_x).
                    const long sy = static_cast<long>(y + d.crop_y) - static_cast<long>(kAugmentPad);
                    const long sx0 = static_cast<long>(xx + d.crop_x) - static_cast<long>(kAugmentPad);
                    double v = 0.0;
                    if (sy >= 0 && sy < static_cast<long>(H) && sx0 >= 0 && sx0 < static_cast<long>(W)) {
                        const std::size_t sx = d.flip ? W - 1 - static_cast<std::size_t>(sx0)
                                                       : static_cast<std::size_t>(sx0);
                        v = in[((b * C + c) * H + static_cast<std::size_t>(sy)) * W + sx];
                    }
                    o[((b * C + c) * H + y) * W + xx] = v;
                }
    }
    return out;
}

/// Per-sample random horizontal flip (p = 0.5) and pad-2 random crop.
inline Tensor augment(const Tensor& x, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return apply_augment(x, draw_augment(x.dim(0), rng));
}

} // namespace lirf
