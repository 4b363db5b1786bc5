#pragma once

// Dataset file layout (little-endian, no padding):
//   "HCED1", u32 sample_count, u32 N_S, u32 N_D, u8 planes (= 2)
//   per sample: u8 profile_id, f32 delay_spread_s, f32 doppler_hz, f32 snr_db,
//               u64 seed, input planes, label planes
// Planes are f32 in row-major (subcarrier, symbol, plane) order.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "helena/binary_io.hpp"
#include "helena/chansim.hpp"
#include "helena/errors.hpp"
#include "helena/rng.hpp"
#include "helena/tensor.hpp"

namespace helena {

inline constexpr std::string_view kDatasetMagic = "HCED1";

struct SampleMeta {
    Profile profile = Profile::tdl_a;
    float delay_spread_s = 0;
    float doppler_hz = 0;
    float snr_db = 0;
    std::uint64_t seed = 0;

    bool operator==(const SampleMeta&) const = default;
};

/// Samples held as float planes: input is the sparse pilot LS grid, label the
/// true channel.
struct Dataset {
    std::size_t subcarriers = 0;
    std::size_t symbols = 0;
    std::vector<SampleMeta> meta;
    std::vector<float> inputs;
    std::vector<float> labels;

    static constexpr std::size_t planes = 2;

    std::size_t size() const { return meta.size(); }
    std::size_t sample_floats() const { return subcarriers * symbols * planes; }
    Shape sample_shape() const { return {subcarriers, symbols, planes}; }

    std::span<const float> input(std::size_t s) const {
        return std::span(inputs).subspan(s * sample_floats(), sample_floats());
    }
    std::span<const float> label(std::size_t s) const {
        return std::span(labels).subspan(s * sample_floats(), sample_floats());
    }

    template <typename T>
    Tensor<T> input_tensor(std::size_t s) const {
        auto v = input(s);
        return Tensor<T>(sample_shape(), std::vector<T>(v.begin(), v.end()));
    }
    template <typename T>
    Tensor<T> label_tensor(std::size_t s) const {
        auto v = label(s);
        return Tensor<T>(sample_shape(), std::vector<T>(v.begin(), v.end()));
    }

    bool operator==(const Dataset&) const = default;
};

inline double snr_of_bucket(std::size_t b) { return 2.0 * static_cast<double>(b); }

inline std::size_t bucket_of_snr(double snr_db) {
    const double b = snr_db / 2.0;
    if (!(b >= 0 && b < static_cast<double>(kSnrBuckets)) || b != std::floor(b)) {
        throw ConfigError("snr_db " + std::to_string(snr_db) + " is not one of 0, 2, ..., 20");
    }
    return static_cast<std::size_t>(b);
}

/// Draws the channel conditions for one sample; profile, delay spread and
/// Doppler are uniform over the dataset ranges.
inline SampleSpec draw_sample_spec(std::uint64_t master_seed, std::size_t index, double snr_db) {
    SampleSpec spec;
    spec.seed = derive_seed(master_seed, index);
    Rng rng(derive_seed(spec.seed, 2));
    spec.profile = static_cast<Profile>(rng.below(kProfileCount));
    spec.delay_spread_s = rng.uniform(1e-9, 300e-9);
    spec.doppler_hz = rng.uniform(5.0, 400.0);
    spec.snr_db = snr_db;
    return spec;
}

struct DatasetOptions {
    GridConfig grid{};
    PilotPattern pattern{};
    std::size_t threads = 1;
};

namespace detail {

inline void synthesize_into(Dataset& ds, std::size_t s, const SampleSpec& spec, const DatasetOptions& opt) {
    // The stored metadata is rounded to f32; the channel is drawn from the rounded
    // values so a sample can be regenerated from its file record.
    const SampleMeta& m = ds.meta[s] = SampleMeta{spec.profile, static_cast<float>(spec.delay_spread_s),
                                                  static_cast<float>(spec.doppler_hz),
                                                  static_cast<float>(spec.snr_db), spec.seed};
    const SampleSpec stored{m.profile, m.delay_spread_s, m.doppler_hz, m.snr_db, m.seed};
    const ChannelGrid h = generate_channel(stored, opt.grid);
    const auto obs = simulate_rx(h, stored, opt.pattern);
    const ChannelGrid lr = ls_at_pilots(obs, h.subcarriers, h.symbols);
    const std::size_t n = ds.sample_floats();
    float* in = ds.inputs.data() + s * n;
    float* lab = ds.labels.data() + s * n;
    for (std::size_t j = 0; j < h.values.size(); ++j) {
        in[2 * j] = static_cast<float>(lr.values[j].real());
        in[2 * j + 1] = static_cast<float>(lr.values[j].imag());
        lab[2 * j] = static_cast<float>(h.values[j].real());
        lab[2 * j + 1] = static_cast<float>(h.values[j].imag());
    }
}

}  // namespace detail

/// Samples are laid out bucket-major: per_snr[0] samples at 0 dB, then per_snr[1]
/// at 2 dB, and so on. Sample s draws everything from (master_seed, s), so the
/// result does not depend on the thread count.
inline Dataset generate_dataset(std::span<const std::size_t> per_snr, std::uint64_t master_seed,
                                const DatasetOptions& opt = {}) {
    if (per_snr.size() != kSnrBuckets) {
        throw ConfigError("generate_dataset: need " + std::to_string(kSnrBuckets) + " per-SNR counts");
    }
    opt.grid.validate();
    opt.pattern.validate(opt.grid.subcarriers, opt.grid.symbols);
    const std::size_t count = std::accumulate(per_snr.begin(), per_snr.end(), std::size_t{0});
    if (count == 0) throw ConfigError("generate_dataset: samples must be positive");

    std::vector<SampleSpec> specs;
    specs.reserve(count);
    for (std::size_t b = 0; b < kSnrBuckets; ++b) {
        for (std::size_t j = 0; j < per_snr[b]; ++j) specs.push_back(draw_sample_spec(master_seed, specs.size(), snr_of_bucket(b)));
    }

    Dataset ds;
    ds.subcarriers = opt.grid.subcarriers;
    ds.symbols = opt.grid.symbols;
    ds.meta.resize(count);
    ds.inputs.resize(count * ds.sample_floats());
    ds.labels.resize(count * ds.sample_floats());

    const std::size_t workers = std::clamp<std::size_t>(opt.threads, 1, count);
    if (workers == 1) {
        for (std::size_t s = 0; s < count; ++s) detail::synthesize_into(ds, s, specs[s], opt);
        return ds;
    }
    std::vector<std::jthread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t s = w; s < count; s += workers) detail::synthesize_into(ds, s, specs[s], opt);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    pool.clear();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return ds;
}

/// `count` must split evenly over the 11 SNR values.
inline Dataset generate_dataset(std::size_t count, std::uint64_t master_seed, const DatasetOptions& opt = {}) {
    if (count == 0) throw ConfigError("generate_dataset: samples must be positive");
    if (count % kSnrBuckets != 0) {
        throw ConfigError("generate_dataset: samples (" + std::to_string(count) + ") must be a multiple of " +
                          std::to_string(kSnrBuckets));
    }
    std::vector<std::size_t> per(kSnrBuckets, count / kSnrBuckets);
    return generate_dataset(per, master_seed, opt);
}

inline std::vector<char> encode_dataset(const Dataset& ds) {
    io::ByteWriter out;
    out.bytes(kDatasetMagic);
    out.u32(static_cast<std::uint32_t>(ds.size()));
    out.u32(static_cast<std::uint32_t>(ds.subcarriers));
    out.u32(static_cast<std::uint32_t>(ds.symbols));
    out.u8(static_cast<std::uint8_t>(Dataset::planes));
    for (std::size_t s = 0; s < ds.size(); ++s) {
        const auto& m = ds.meta[s];
        out.u8(static_cast<std::uint8_t>(m.profile));
        out.f32(m.delay_spread_s);
        out.f32(m.doppler_hz);
        out.f32(m.snr_db);
        out.u64(m.seed);
        out.f32s(ds.input(s));
        out.f32s(ds.label(s));
    }
    return out.buffer();
}

inline Dataset decode_dataset(std::span<const char> bytes) {
    io::ByteReader in(bytes, "dataset file");
    if (in.remaining() < kDatasetMagic.size() || in.bytes(kDatasetMagic.size()) != kDatasetMagic) {
        throw FormatError("dataset file: bad magic (expected HCED1)");
    }
    Dataset ds;
    const std::uint32_t count = in.u32();
    ds.subcarriers = in.u32();
    ds.symbols = in.u32();
    const std::uint8_t planes = in.u8();
    if (planes != Dataset::planes) throw FormatError("dataset file: planes must be 2, got " + std::to_string(planes));
    if (ds.subcarriers == 0 || ds.symbols == 0) throw FormatError("dataset file: empty grid");
    const std::size_t n = ds.sample_floats();
    const std::size_t record = 1 + 3 * 4 + 8 + 2 * n * 4;
    if (in.remaining() != static_cast<std::size_t>(count) * record) {
        throw FormatError("dataset file: size does not match header (" + std::to_string(count) + " samples of " +
                          std::to_string(ds.subcarriers) + "x" + std::to_string(ds.symbols) + ")");
    }
    ds.meta.resize(count);
    ds.inputs.resize(count * n);
    ds.labels.resize(count * n);
    for (std::size_t s = 0; s < count; ++s) {
        auto& m = ds.meta[s];
        m.profile = static_cast<Profile>(in.u8());
        if (static_cast<std::size_t>(m.profile) >= kProfileCount) {
            throw FormatError("dataset file: sample " + std::to_string(s) + " has unknown profile id");
        }
        m.delay_spread_s = in.f32();
        m.doppler_hz = in.f32();
        m.snr_db = in.f32();
        m.seed = in.u64();
        in.f32s(std::span(ds.inputs).subspan(s * n, n));
        in.f32s(std::span(ds.labels).subspan(s * n, n));
    }
    return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
    io::write_file_atomic(path, encode_dataset(ds));
}

inline Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(io::read_file(path)); }

}  // namespace helena
