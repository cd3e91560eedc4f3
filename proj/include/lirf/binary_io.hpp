// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <boost/crc.hpp>

#include "lirf/errors.hpp"

namespace lirf {

/// CRC-64/XZ (ECMA-182 polynomial, reflected, all-ones init and xor-out).
inline std::uint64_t crc64(const std::uint8_t* data, std::size_t n) {
    boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true> crc;
    crc.process_bytes(data, n);
    return crc.checksum();
}

inline std::uint64_t crc64(const std::vector<std::uint8_t>& bytes) {
    return crc64(bytes.data(), bytes.size());
}

inline std::uint64_t crc64(std::string_view s) {
    return crc64(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

/// Little-endian byte sink.
class ByteWriter {
  public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
    void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

    /// Appends the CRC-64 of everything written so far.
    void seal() { u64(crc64(buf_)); }

    const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }

    void write_file(const std::filesystem::path& path) const { write_bytes(path, buf_); }

  private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    std::vector<std::uint8_t> buf_;
};

/// Little-endian byte source over an in-memory buffer. Running past the end
/// throws ChecksumError since the only way to get there is a damaged file.
class ByteReader {
  public:
    explicit ByteReader(std::vector<std::uint8_t> bytes) : buf_(std::move(bytes)) {}

    static ByteReader from_file(const std::filesystem::path& path) { return ByteReader(read_bytes(path)); }

    /// Checks the trailing CRC-64 and hides it from subsequent reads.
    void verify_checksum(const std::string& what) {
        if (buf_.size() < 8) throw ChecksumError(what + ": file too short for checksum");
        const std::size_t body = buf_.size() - 8;
        std::uint64_t stored = 0;
        for (int i = 0; i < 8; ++i) stored |= std::uint64_t{buf_[body + i]} << (8 * i);
        if (crc64(buf_.data(), body) != stored) throw ChecksumError(what + ": checksum mismatch");
        end_ = body;
    }

    std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    double f64() { return std::bit_cast<double>(get(8)); }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    std::size_t remaining() const noexcept { return limit() - pos_; }
    bool at_end() const noexcept { return pos_ == limit(); }

  private:
    std::size_t limit() const noexcept { return std::min(end_, buf_.size()); }
    void need(std::size_t n) const {
        if (pos_ + n > limit()) throw ChecksumError("unexpected end of data");
    }
    std::uint64_t get(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= std::uint64_t{buf_[pos_ + i]} << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }

    std::vector<std::uint8_t> buf_;
    std::size_t pos_ = 0;
    std::size_t end_ = static_cast<std::size_t>(-1);
};

} // namespace lirf
