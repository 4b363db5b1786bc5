#pragma once

// Weight file layout (little-endian, no padding):
//   "HELW1"
//   u32 entry count
//   per entry: u16 name length, UTF-8 name, u8 rank, rank × u32 extents,
//              product(extents) × f32 values

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "helena/binary_io.hpp"
#include "helena/errors.hpp"
#include "helena/model.hpp"

namespace helena {

inline constexpr std::string_view kWeightMagic = "HELW1";

template <typename T>
std::vector<char> encode_weights(const ModelWeights<T>& w) {
    io::ByteWriter out;
    out.bytes(kWeightMagic);
    out.u32(static_cast<std::uint32_t>(w.tensors.size()));
    for (const auto& [name, t] : w.tensors) {
        out.u16(static_cast<std::uint16_t>(name.size()));
        out.bytes(name);
        out.u8(static_cast<std::uint8_t>(t.rank()));
        for (auto e : t.shape()) out.u32(static_cast<std::uint32_t>(e));
        for (T v : t.data()) out.f32(static_cast<float>(v));
    }
    return out.buffer();
}

template <typename T>
void save_weights(const ModelWeights<T>& w, const std::filesystem::path& path) {
    io::write_file_atomic(path, encode_weights(w));
}

/// Parses a weight file against the name/shape table of `cfg`. Nothing is
/// returned unless every entry matches and the file is consumed exactly.
template <typename T>
ModelWeights<T> decode_weights(std::span<const char> bytes, const ModelConfig& cfg) {
    const auto expected = parameter_shapes(cfg);
    io::ByteReader in(bytes, "weight file");
    if (in.remaining() < kWeightMagic.size() || in.bytes(kWeightMagic.size()) != kWeightMagic) {
        throw FormatError("weight file: bad magic (expected HELW1)");
    }
    const std::uint32_t count = in.u32();
    ModelWeights<T> w{cfg, {}};
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = in.bytes(in.u16());
        const std::uint8_t rank = in.u8();
        Shape shape(rank);
        for (auto& e : shape) e = in.u32();
        auto it = expected.find(name);
        if (it == expected.end()) throw FormatError("weight file: unexpected entry '" + name + "'");
        if (it->second != shape) {
            throw FormatError("weight file: entry '" + name + "' has shape " + shape_str(shape) + ", config expects " +
                              shape_str(it->second));
        }
        std::vector<float> values(shape_size(shape));
        in.f32s(values);
        if (!w.tensors.emplace(name, Tensor<T>(shape, std::vector<T>(values.begin(), values.end()))).second) {
            throw FormatError("weight file: duplicate entry '" + name + "'");
        }
    }
    for (const auto& [name, _] : expected) {
        if (!w.tensors.contains(name)) throw FormatError("weight file: missing entry '" + name + "'");
    }
    if (in.remaining() != 0) throw FormatError("weight file: trailing bytes after last entry");
    return w;
}

template <typename T>
ModelWeights<T> load_weights(const std::filesystem::path& path, const ModelConfig& cfg) {
    const auto bytes = io::read_file(path);
    return decode_weights<T>(bytes, cfg);
}

}  // namespace helena
