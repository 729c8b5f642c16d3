#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "nervq/errors.hpp"

namespace nervq {

// Little-endian byte serialization, independent of host order.

inline void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

inline void put_u16le(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_u64le(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_f64le(std::vector<std::uint8_t>& out, double v) {
    put_u64le(out, std::bit_cast<std::uint64_t>(v));
}

inline void put_bytes(std::vector<std::uint8_t>& out, std::span<const std::uint8_t> b) {
    out.insert(out.end(), b.begin(), b.end());
}

inline void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
    put_u32le(out, static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

/// Bounds-checked sequential reader; throws TruncatedStreamError on overrun.
class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }
    bool done() const { return pos_ == data_.size(); }

    std::uint8_t u8() { return take(1)[0]; }

    std::uint16_t u16le() {
        auto b = take(2);
        return static_cast<std::uint16_t>(b[0] | (static_cast<std::uint16_t>(b[1]) << 8));
    }

    std::uint32_t u32le() {
        auto b = take(4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
        return v;
    }

    std::uint64_t u64le() {
        auto b = take(8);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
        return v;
    }

    double f64le() { return std::bit_cast<double>(u64le()); }

    std::string string() {
        const std::uint32_t n = u32le();
        auto b = take(n);
        return std::string(b.begin(), b.end());
    }

    std::span<const std::uint8_t> take(std::size_t n) {
        if (remaining() < n) {
            throw TruncatedStreamError("truncated stream: need " + std::to_string(n) + " bytes at offset " +
                                       std::to_string(pos_) + ", have " + std::to_string(remaining()));
        }
        auto out = data_.subspan(pos_, n);
        pos_ += n;
        return out;
    }

private:
    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
std::uint32_t crc32(std::span<const std::uint8_t> data);

/// IEEE 754 binary16 conversions, round-to-nearest-even on the way down.
std::uint16_t f64_to_f16_bits(double v);
double f16_bits_to_f64(std::uint16_t bits);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const std::uint8_t> data);

} // namespace nervq
