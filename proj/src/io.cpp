#include "io.hpp"

#include "common.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace speechprune {

namespace fs = std::filesystem;

void ByteWriter::u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
}

void ByteWriter::u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
}

void ByteWriter::f32(float v) { u32(std::bit_cast<uint32_t>(v)); }

void ByteWriter::f64(double v) { u64(std::bit_cast<uint64_t>(v)); }

void ByteWriter::raw(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

void ByteWriter::raw(const uint8_t* data, size_t n) { buf_.insert(buf_.end(), data, data + n); }

const uint8_t* ByteReader::take(size_t n) {
    require(n <= remaining(), ErrorCode::io, context_ + ": truncated (needed " + std::to_string(n) +
                                                 " bytes at offset " + std::to_string(pos_) + ")");
    const uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
}

uint32_t ByteReader::u32() {
    const uint8_t* p = take(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<uint32_t>(p[i]) << (8 * i);
    }
    return v;
}

uint64_t ByteReader::u64() {
    const uint8_t* p = take(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<uint64_t>(p[i]) << (8 * i);
    }
    return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::raw(size_t n) {
    const uint8_t* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
}

Bytes read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorCode::io, "cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = static_cast<size_t>(in.tellg());
    in.seekg(0);
    Bytes data(size);
    if (size > 0) {
        in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(size));
    }
    require(in.good() || size == 0, ErrorCode::io, "read failed for " + path.string());
    return data;
}

void atomic_write(const fs::path& path, const uint8_t* data, size_t size) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), ErrorCode::io, "cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(size));
        require(out.good(), ErrorCode::io, "write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

void atomic_write(const fs::path& path, std::string_view text) {
    atomic_write(path, reinterpret_cast<const uint8_t*>(text.data()), text.size());
}

std::string sha256_hex(const uint8_t* data, size_t size) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) {
        os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    }
    return os.str();
}

std::string sha256_hex(std::string_view text) {
    return sha256_hex(reinterpret_cast<const uint8_t*>(text.data()), text.size());
}

std::string sha256_file(const fs::path& path) {
    const Bytes data = read_file(path);
    return sha256_hex(data.data(), data.size());
}

uint32_t crc32_of(const uint8_t* data, size_t size) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed large buffers in chunks.
    while (size > 0) {
        const auto chunk = static_cast<uInt>(std::min<size_t>(size, 1u << 30));
        crc = crc32(crc, data, chunk);
        data += chunk;
        size -= chunk;
    }
    return static_cast<uint32_t>(crc);
}

}  // namespace speechprune
