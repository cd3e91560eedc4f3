// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "lirf/binary_io.hpp"
#include "lirf/tensor.hpp"

namespace lirf {

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

/// On-disk layout (all integers little-endian):
///   "LIRF" | u32 version | u64 header length | JSON header bytes
///   | u64 tensor count | per tensor: u32 name length, name, u32 rank,
///     u64 dims[rank], f64 payload[prod(dims)]
///   | u64 CRC-64/XZ of every preceding byte
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;
    static constexpr char kMagic[4] = {'L', 'I', 'R', 'F'};

    std::uint32_t version = kVersion;
    nlohmann::json header;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const {
        for (const auto& t : tensors) {
            if (t.name == name) return &t;
        }
        return nullptr;
    }

    std::vector<std::uint8_t> to_bytes() const {
        ByteWriter w;
        w.bytes(std::string_view(kMagic, 4));
        w.u32(version);
        const std::string hdr = header.dump();
        w.u64(hdr.size());
        w.bytes(hdr);
        w.u64(tensors.size());
        for (const auto& t : tensors) {
            w.u32(static_cast<std::uint32_t>(t.name.size()));
            w.bytes(t.name);
            w.u32(static_cast<std::uint32_t>(t.shape.size()));
            for (std::size_t d : t.shape) w.u64(d);
            for (double v : t.values) w.f64(v);
        }
        w.seal();
        return w.buffer();
    }

    std::uint64_t checksum() const {
        const auto bytes = to_bytes();
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes[bytes.size() - 8 + i]} << (8 * i);
        return v;
    }

    void save(const std::filesystem::path& path) const { write_bytes(path, to_bytes()); }

    static Checkpoint from_bytes(std::vector<std::uint8_t> bytes, const std::string& what) {
        ByteReader r(std::move(bytes));
        r.verify_checksum(what);
        Checkpoint ck;
        if (r.bytes(4) != std::string_view(kMagic, 4)) throw FormatError(what + ": bad magic");
        ck.version = r.u32();
        if (ck.version != kVersion) {
            throw FormatError(what + ": unsupported version " + std::to_string(ck.version));
        }
        const std::uint64_t hdr_len = r.u64();
        if (hdr_len > r.remaining()) throw FormatError(what + ": header length out of range");
        try {
            ck.header = nlohmann::json::parse(r.bytes(hdr_len));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(what + ": bad header: " + e.what());
        }
        const std::uint64_t count = r.u64();
        for (std::uint64_t i = 0; i < count; ++i) {
            NamedTensor t;
            t.name = r.bytes(r.u32());
            const std::uint32_t rank = r.u32();
            if (rank > 8) throw FormatError(what + ": tensor '" + t.name + "' rank too large");
            for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(r.u64());
            const std::size_t n = numel(t.shape);
            if (n * 8 > r.remaining()) throw FormatError(what + ": tensor '" + t.name + "' truncated");
            t.values.resize(n);
            for (auto& v : t.values) v = r.f64();
            ck.tensors.push_back(std::move(t));
        }
        if (!r.at_end()) throw FormatError(what + ": trailing bytes");
        return ck;
    }

    static Checkpoint load(const std::filesystem::path& path) {
        return from_bytes(read_bytes(path), path.string());
    }
};

} // namespace lirf
