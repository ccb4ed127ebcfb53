#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace speechprune {

using Bytes = std::vector<uint8_t>;

// Little-endian encoding regardless of host byte order.
class ByteWriter {
public:
    void u32(uint32_t v);
    void u64(uint64_t v);
    void f32(float v);
    void f64(double v);
    void raw(std::string_view s);
    void raw(const uint8_t* data, size_t n);

    Bytes& bytes() { return buf_; }

private:
    Bytes buf_;
};

class ByteReader {
public:
    ByteReader(const uint8_t* data, size_t size, std::string context)
        : data_(data), size_(size), context_(std::move(context)) {}

    uint32_t u32();
    uint64_t u64();
    float f32();
    double f64();
    std::string raw(size_t n);
    const uint8_t* take(size_t n);
    size_t remaining() const { return size_ - pos_; }
    size_t position() const { return pos_; }

private:
    const uint8_t* data_;
    size_t size_;
    size_t pos_ = 0;
    std::string context_;
};

Bytes read_file(const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it into place.
void atomic_write(const std::filesystem::path& path, const uint8_t* data, size_t size);
void atomic_write(const std::filesystem::path& path, std::string_view text);

std::string sha256_hex(const uint8_t* data, size_t size);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

uint32_t crc32_of(const uint8_t* data, size_t size);

}  // namespace speechprune
