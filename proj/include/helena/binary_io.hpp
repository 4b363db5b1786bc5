#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "helena/errors.hpp"

namespace helena::io {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

/// Append-only little-endian byte buffer.
class ByteWriter {
   public:
    void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u16(std::uint16_t v) { raw(&v, sizeof v); }
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void u64(std::uint64_t v) { raw(&v, sizeof v); }
    void f32(float v) { raw(&v, sizeof v); }
    void f32s(std::span<const float> v) { raw(v.data(), v.size_bytes()); }

    const std::vector<char>& buffer() const { return buf_; }

   private:
    void raw(const void* p, std::size_t n) {
        const char* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    std::vector<char> buf_;
};

/// Bounds-checked little-endian reader; running past the end is a FormatError.
class ByteReader {
   public:
    ByteReader(std::span<const char> data, std::string what) : data_(data), what_(std::move(what)) {}

    std::string bytes(std::size_t n) {
        need(n);
        std::string s(data_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    std::uint8_t u8() { return read<std::uint8_t>(); }
    std::uint16_t u16() { return read<std::uint16_t>(); }
    std::uint32_t u32() { return read<std::uint32_t>(); }
    std::uint64_t u64() { return read<std::uint64_t>(); }
    float f32() { return read<float>(); }
    void f32s(std::span<float> out) {
        need(out.size_bytes());
        std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
        pos_ += out.size_bytes();
    }

    std::size_t remaining() const { return data_.size() - pos_; }
    std::size_t position() const { return pos_; }

   private:
    template <typename V>
    V read() {
        need(sizeof(V));
        V v;
        std::memcpy(&v, data_.data() + pos_, sizeof(V));
        pos_ += sizeof(V);
        return v;
    }
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) {
            throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_) + " (needed " + std::to_string(n) +
                              " more)");
        }
    }

    std::span<const char> data_;
    std::size_t pos_ = 0;
    std::string what_;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed on '" + path.string() + "'");
    return data;
}

/// Writes to a sibling temporary and renames it into place, so readers never
/// observe a partially written file.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const char> data) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        out.flush();
        if (!out) {
            std::error_code ignored;
            std::filesystem::remove(tmp, ignored);
            throw IoError("write failed on '" + tmp.string() + "'");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot move output into place at '" + path.string() + "'");
    }
}

inline void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
    write_file_atomic(path, std::span<const char>(text.data(), text.size()));
}

}  // namespace helena::io
