#pragma once

// Little-endian binary primitives and the CRC-64/XZ checksum used by the
// dataset and checkpoint formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "vse/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

namespace vse::io {

namespace detail {

inline const std::array<std::uint64_t, 256>& crc64_table() {
    static const std::array<std::uint64_t, 256> table = [] {
        std::array<std::uint64_t, 256> t{};
        const std::uint64_t poly = 0xC96C5795D7870F42ull;  // reflected ECMA-182
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint64_t crc = i;
            for (int j = 0; j < 8; ++j) crc = (crc >> 1) ^ ((crc & 1) ? poly : 0);
            t[i] = crc;
        }
        return t;
    }();
    return table;
}

}  // namespace detail

// CRC-64/XZ over a byte range; can be chained by feeding the previous value.
inline std::uint64_t crc64(const void* data, std::size_t len, std::uint64_t crc = 0) {
    const auto& table = detail::crc64_table();
    const auto* p = static_cast<const unsigned char*>(data);
    crc = ~crc;
    for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xFF] ^ (crc >> 8);
    return ~crc;
}

// Byte sink that tracks a running checksum.
class ChecksumWriter {
public:
    explicit ChecksumWriter(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw FileFormatError("cannot open for writing: " + path);
    }

    void bytes(const void* data, std::size_t len) {
        out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
        crc_ = crc64(data, len, crc_);
    }
    void u32(std::uint32_t v) { bytes(&v, sizeof v); }
    void u64(std::uint64_t v) { bytes(&v, sizeof v); }
    void f64(double v) { bytes(&v, sizeof v); }
    void f64_array(const double* data, std::size_t count) { bytes(data, count * sizeof(double)); }
    void str(const std::string& s) { bytes(s.data(), s.size()); }

    std::uint64_t crc() const { return crc_; }

    // Appends the running checksum (not itself checksummed) and closes.
    void finish_with_crc() {
        const std::uint64_t c = crc_;
        out_.write(reinterpret_cast<const char*>(&c), sizeof c);
        out_.close();
        if (!out_) throw FileFormatError("write failed while closing");
    }

private:
    std::ofstream out_;
    std::uint64_t crc_ = 0;
};

class ChecksumReader {
public:
    explicit ChecksumReader(const std::string& path) {
        std::ifstream in(path, std::ios::binary | std::ios::ate);
        if (!in) throw FileFormatError("cannot open for reading: " + path);
        const auto size = in.tellg();
        in.seekg(0);
        buf_.resize(static_cast<std::size_t>(size));
        in.read(buf_.data(), size);
        if (!in) throw TruncationError("short read: " + path);
    }

    std::size_t remaining() const { return buf_.size() - pos_; }

    void bytes(void* out, std::size_t len) {
        if (remaining() < len) throw TruncationError("file truncated");
        std::memcpy(out, buf_.data() + pos_, len);
        pos_ += len;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, sizeof v);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        bytes(&v, sizeof v);
        return v;
    }
    void f64_array(double* out, std::size_t count) { bytes(out, count * sizeof(double)); }
    std::string str(std::size_t len) {
        std::string s(len, '\0');
        bytes(s.data(), len);
        return s;
    }

    // Verifies that the file ends with the CRC of everything before it and
    // that the cursor sits exactly at that trailer.
    void verify_trailing_crc() {
        if (remaining() != sizeof(std::uint64_t))
            throw TruncationError("unexpected payload size before checksum trailer");
        const std::uint64_t expected = crc64(buf_.data(), pos_);
        std::uint64_t stored;
        bytes(&stored, sizeof stored);
        if (stored != expected) throw ChecksumError("checksum mismatch");
    }

private:
    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

}  // namespace vse::io
