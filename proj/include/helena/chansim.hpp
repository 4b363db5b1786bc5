#pragma once

// Frequency-domain TDL fading over an OFDM resource grid, DM-RS style pilots,
// AWGN, pilot LS extraction and the linear-interpolation baseline.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "helena/errors.hpp"
#include "helena/rng.hpp"
#include "helena/tensor.hpp"

namespace helena {

using cplx = std::complex<double>;

enum class Profile : std::uint8_t { tdl_a = 0, tdl_b = 1, tdl_c = 2, tdl_d = 3, tdl_e = 4 };

inline constexpr std::size_t kProfileCount = 5;

inline std::string profile_name(Profile p) {
    static constexpr std::array<const char*, kProfileCount> names{"TDL-A", "TDL-B", "TDL-C", "TDL-D", "TDL-E"};
    const auto i = static_cast<std::size_t>(p);
    if (i >= kProfileCount) throw ConfigError("unknown channel profile id " + std::to_string(i));
    return names[i];
}

inline Profile profile_from_id(std::uint8_t id) {
    if (id >= kProfileCount) throw ConfigError("unknown channel profile id " + std::to_string(id));
    return static_cast<Profile>(id);
}

struct Tap {
    double delay;     // normalized by the RMS delay spread
    double power_db;
    bool los = false;  // specular component, no Rayleigh fading
};

namespace tdl {

// 3GPP TR 38.901 V16, Table 7.7.2-1 (TDL-A)
inline constexpr std::array<Tap, 23> kA{{
    {0.0000, -13.4}, {0.3819, 0.0},   {0.4025, -2.2},  {0.5868, -4.0},  {0.4610, -6.0},  {0.5375, -8.2},
    {0.6708, -9.9},  {0.5750, -10.5}, {0.7618, -7.5},  {1.5375, -15.9}, {1.8978, -6.6},  {2.2242, -16.7},
    {2.1718, -12.4}, {2.4942, -15.2}, {2.5119, -10.8}, {3.0582, -11.3}, {4.0810, -12.7}, {4.4579, -16.2},
    {4.5695, -18.3}, {4.7966, -18.9}, {5.0066, -16.6}, {5.3043, -19.9}, {9.6586, -29.7},
}};

// Table 7.7.2-2 (TDL-B)
inline constexpr std::array<Tap, 23> kB{{
    {0.0000, 0.0},   {0.1072, -2.2},  {0.2155, -4.0},  {0.2095, -3.2},  {0.2870, -9.8},  {0.2986, -1.2},
    {0.3752, -3.4},  {0.5055, -5.2},  {0.3681, -7.6},  {0.3697, -3.0},  {0.5700, -8.9},  {0.5283, -9.0},
    {1.1021, -4.8},  {1.2756, -5.7},  {1.5474, -7.5},  {1.7842, -1.9},  {2.0169, -7.6},  {2.8294, -12.2},
    {3.0219, -9.8},  {3.6187, -11.4}, {4.1067, -14.9}, {4.2790, -9.2},  {4.7834, -11.3},
}};

// Table 7.7.2-3 (TDL-C)
inline constexpr std::array<Tap, 24> kC{{
    {0.0000, -4.4},  {0.2099, -1.2},  {0.2219, -3.5},  {0.2329, -5.2},  {0.2176, -2.5},  {0.6366, 0.0},
    {0.6448, -2.2},  {0.6560, -3.9},  {0.6584, -7.4},  {0.7935, -7.1},  {0.8213, -10.7}, {0.9336, -11.1},
    {1.2285, -5.1},  {1.3083, -6.8},  {2.1704, -8.7},  {2.7105, -13.2}, {4.2589, -13.9}, {4.6003, -13.9},
    {5.4902, -15.8}, {5.6077, -17.1}, {6.3065, -16.0}, {6.6374, -15.7}, {7.0427, -21.6}, {8.6523, -22.8},
}};

// Table 7.7.2-4 (TDL-D). The first tap is Rician (K = 13.3 dB) and is listed as
// its specular and Rayleigh parts.
inline constexpr std::array<Tap, 14> kD{{
    {0.000, -0.2, true}, {0.000, -13.5}, {0.035, -18.8}, {0.612, -21.0},  {1.363, -22.8},
    {1.405, -17.9},      {1.804, -20.1}, {2.596, -21.9}, {1.775, -22.9},  {4.042, -27.8},
    {7.937, -23.6},      {9.424, -24.8}, {9.708, -30.0}, {12.525, -27.7},
}};

// Table 7.7.2-5 (TDL-E), first tap Rician with K = 22 dB.
inline constexpr std::array<Tap, 15> kE{{
    {0.0000, -0.03, true}, {0.0000, -22.03}, {0.5133, -15.8}, {0.5440, -18.1}, {0.5630, -19.8},
    {0.5440, -22.9},       {0.7112, -22.4},  {1.9092, -18.6}, {1.9293, -20.8}, {1.9589, -22.6},
    {2.6426, -22.3},       {3.7136, -25.6},  {5.4524, -20.2}, {12.0034, -29.8}, {20.6519, -29.2},
}};

}  // namespace tdl

inline std::span<const Tap> tdl_taps(Profile p) {
    switch (p) {
        case Profile::tdl_a: return tdl::kA;
        case Profile::tdl_b: return tdl::kB;
        case Profile::tdl_c: return tdl::kC;
        case Profile::tdl_d: return tdl::kD;
        case Profile::tdl_e: return tdl::kE;
    }
    throw ConfigError("unknown channel profile id " + std::to_string(static_cast<int>(p)));
}

/// Resource grid numerology: one 30 kHz slot of 14 symbols over 51 RBs.
struct GridConfig {
    std::size_t subcarriers = 612;
    std::size_t symbols = 14;
    double subcarrier_spacing_hz = 30e3;
    double slot_duration_s = 0.5e-3;

    double symbol_duration_s() const { return slot_duration_s / static_cast<double>(symbols); }

    void validate() const {
        if (subcarriers == 0 || symbols == 0) throw ConfigError("grid config: subcarriers and symbols must be positive");
        if (!(subcarrier_spacing_hz > 0) || !(slot_duration_s > 0)) {
            throw ConfigError("grid config: subcarrier_spacing_hz and slot_duration_s must be positive");
        }
    }
};

inline constexpr std::size_t kSnrBuckets = 11;  // 0, 2, ..., 20 dB

struct SampleSpec {
    Profile profile = Profile::tdl_a;
    double delay_spread_s = 100e-9;
    double doppler_hz = 50.0;
    double snr_db = 10.0;
    std::uint64_t seed = 0;

    /// Checks the dataset ranges: delay 1-300 ns, Doppler 5-400 Hz, SNR 0-20 dB in 2 dB steps.
    void validate() const {
        profile_name(profile);
        if (!(delay_spread_s >= 1e-9 && delay_spread_s <= 300e-9)) {
            throw ConfigError("sample spec: delay_spread_s out of [1e-9, 300e-9]");
        }
        if (!(doppler_hz >= 5.0 && doppler_hz <= 400.0)) throw ConfigError("sample spec: doppler_hz out of [5, 400]");
        const double bucket = snr_db / 2.0;
        if (!(snr_db >= 0.0 && snr_db <= 20.0) || bucket != std::floor(bucket)) {
            throw ConfigError("sample spec: snr_db must be one of 0, 2, ..., 20");
        }
    }
};

/// Complex N_S x N_D grid, row-major (subcarrier, symbol).
struct ChannelGrid {
    std::size_t subcarriers = 0;
    std::size_t symbols = 0;
    std::vector<cplx> values;

    ChannelGrid() = default;
    ChannelGrid(std::size_t n_s, std::size_t n_d) : subcarriers(n_s), symbols(n_d), values(n_s * n_d) {}

    cplx& at(std::size_t i, std::size_t k) { return values[i * symbols + k]; }
    const cplx& at(std::size_t i, std::size_t k) const { return values[i * symbols + k]; }

    /// Real/imaginary planes as an [N_S x N_D x 2] tensor.
    template <typename T>
    Tensor<T> planes() const {
        std::vector<T> out(values.size() * 2);
        for (std::size_t j = 0; j < values.size(); ++j) {
            out[2 * j] = static_cast<T>(values[j].real());
            out[2 * j + 1] = static_cast<T>(values[j].imag());
        }
        return Tensor<T>({subcarriers, symbols, 2}, std::move(out));
    }

    template <typename T>
    static ChannelGrid from_planes(const Tensor<T>& t) {
        if (t.rank() != 3 || t.dim(2) != 2) {
            throw DimensionError("channel grid planes must be [N_S x N_D x 2], got " + shape_str(t.shape()));
        }
        ChannelGrid g(t.dim(0), t.dim(1));
        for (std::size_t j = 0; j < g.values.size(); ++j) {
            g.values[j] = cplx(static_cast<double>(t[2 * j]), static_cast<double>(t[2 * j + 1]));
        }
        return g;
    }
};

/// Pilot resource elements: every symbol in `symbols`, and per `period`
/// subcarriers the listed `offsets`.
struct PilotPattern {
    std::vector<std::size_t> symbols{2, 11};
    std::size_t period = 6;
    std::vector<std::size_t> offsets{0, 1};

    void validate(std::size_t n_s, std::size_t n_d) const {
        if (symbols.empty()) throw ConfigError("pilot pattern: no pilot symbols");
        if (period == 0 || offsets.empty()) throw ConfigError("pilot pattern: empty subcarrier pattern");
        if (!std::is_sorted(symbols.begin(), symbols.end()) ||
            std::adjacent_find(symbols.begin(), symbols.end()) != symbols.end()) {
            throw ConfigError("pilot pattern: symbols must be strictly increasing");
        }
        if (symbols.back() >= n_d) throw ConfigError("pilot pattern: symbol index out of range");
        for (auto o : offsets) {
            if (o >= period) throw ConfigError("pilot pattern: offset must be below the period");
        }
        // At least one pilot per resource block of 12 subcarriers.
        if (period > 12) throw ConfigError("pilot pattern: period larger than a resource block");
        if (pilot_subcarriers(n_s).size() < 2) throw ConfigError("pilot pattern: need two pilot subcarriers");
    }

    std::vector<std::size_t> pilot_subcarriers(std::size_t n_s) const {
        std::vector<std::size_t> out;
        for (std::size_t base = 0; base < n_s; base += period) {
            for (std::size_t o = 0; o < period; ++o) {
                if (std::find(offsets.begin(), offsets.end(), o) != offsets.end() && base + o < n_s) {
                    out.push_back(base + o);
                }
            }
        }
        return out;
    }

    bool is_pilot(std::size_t i, std::size_t k) const {
        return std::find(symbols.begin(), symbols.end(), k) != symbols.end() &&
               std::find(offsets.begin(), offsets.end(), i % period) != offsets.end();
    }

    /// Pilot positions in grid order (subcarrier-major).
    std::vector<std::pair<std::size_t, std::size_t>> positions(std::size_t n_s) const {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        for (auto i : pilot_subcarriers(n_s)) {
            for (auto k : symbols) out.emplace_back(i, k);
        }
        return out;
    }
};

inline constexpr std::size_t kJakesSinusoids = 32;

/// One TDL realization. Taps are the profile scaled by the delay spread, each a
/// sum-of-sinusoids Jakes process; tap powers are normalized to unit total so
/// E|H|^2 = 1. Doppler and delay spread of 0 give the static and flat limits.
[[gnu::noinline]] inline ChannelGrid generate_channel(const SampleSpec& spec, const GridConfig& grid = {}) {
    grid.validate();
    const auto taps = tdl_taps(spec.profile);
    if (!(spec.delay_spread_s >= 0.0) || !std::isfinite(spec.delay_spread_s)) {
        throw ConfigError("generate_channel: delay_spread_s must be finite and nonnegative");
    }
    if (!(spec.doppler_hz >= 0.0) || !std::isfinite(spec.doppler_hz)) {
        throw ConfigError("generate_channel: doppler_hz must be finite and nonnegative");
    }
    constexpr double two_pi = 2.0 * std::numbers::pi;
    Rng rng(derive_seed(spec.seed, 0));

    double total = 0.0;
    for (const auto& t : taps) total += std::pow(10.0, t.power_db / 10.0);

    const std::size_t n_s = grid.subcarriers;
    const std::size_t n_d = grid.symbols;
    const double t_sym = grid.symbol_duration_s();
    ChannelGrid h(n_s, n_d);
    std::vector<cplx> gain(n_d);
    for (const auto& tap : taps) {
        const double power = std::pow(10.0, tap.power_db / 10.0) / total;
        std::fill(gain.begin(), gain.end(), cplx{});
        if (tap.los) {
            const double aoa = rng.uniform(0.0, two_pi);
            const double phase = rng.uniform(0.0, two_pi);
            const double fd = spec.doppler_hz * std::cos(aoa);
            for (std::size_t k = 0; k < n_d; ++k) {
                gain[k] = std::sqrt(power) * std::polar(1.0, two_pi * fd * t_sym * static_cast<double>(k) + phase);
            }
        } else {
            const double amp = std::sqrt(power / static_cast<double>(kJakesSinusoids));
            for (std::size_t m = 0; m < kJakesSinusoids; ++m) {
                const double aoa = rng.uniform(0.0, two_pi);
                const double phase = rng.uniform(0.0, two_pi);
                const double fd = spec.doppler_hz * std::cos(aoa);
                for (std::size_t k = 0; k < n_d; ++k) {
                    gain[k] += amp * std::polar(1.0, two_pi * fd * t_sym * static_cast<double>(k) + phase);
                }
            }
        }
        const double tau = tap.delay * spec.delay_spread_s;
        for (std::size_t i = 0; i < n_s; ++i) {
            const cplx rot = std::polar(1.0, -two_pi * grid.subcarrier_spacing_hz * static_cast<double>(i) * tau);
            cplx* row = &h.at(i, 0);
            for (std::size_t k = 0; k < n_d; ++k) row[k] += gain[k] * rot;
        }
    }
    return h;
}

/// Received pilots, aligned with PilotPattern::positions().
struct PilotObservation {
    std::vector<std::pair<std::size_t, std::size_t>> positions;
    std::vector<cplx> y;
    std::vector<cplx> x;
};

inline double noise_variance(double snr_db) {
    if (std::isinf(snr_db) && snr_db > 0) return 0.0;
    if (!std::isfinite(snr_db)) throw ConfigError("snr_db must be finite or +inf");
    return std::pow(10.0, -snr_db / 10.0);
}

/// Y = H X + Z on the pilot REs, with seeded unit-modulus QPSK pilots and
/// complex Gaussian noise of variance 10^(-snr/10). snr_db = +inf is noiseless.
inline PilotObservation simulate_rx(const ChannelGrid& h, const SampleSpec& spec, const PilotPattern& pattern) {
    pattern.validate(h.subcarriers, h.symbols);
    const double sigma = std::sqrt(noise_variance(spec.snr_db) / 2.0);
    Rng rng(derive_seed(spec.seed, 1));
    PilotObservation obs;
    obs.positions = pattern.positions(h.subcarriers);
    obs.y.reserve(obs.positions.size());
    obs.x.reserve(obs.positions.size());
    for (const auto& [i, k] : obs.positions) {
        const double angle = std::numbers::pi / 4.0 + std::numbers::pi / 2.0 * static_cast<double>(rng.below(4));
        const cplx x = std::polar(1.0, angle);
        const double zr = rng.normal();
        const double zi = rng.normal();
        obs.x.push_back(x);
        obs.y.push_back(h.at(i, k) * x + sigma * cplx(zr, zi));
    }
    return obs;
}

/// Y/X at the pilots, exactly zero elsewhere.
inline ChannelGrid ls_at_pilots(const PilotObservation& obs, std::size_t n_s, std::size_t n_d) {
    if (obs.y.size() != obs.positions.size() || obs.x.size() != obs.positions.size()) {
        throw DimensionError("pilot observation: positions, y and x differ in length");
    }
    ChannelGrid out(n_s, n_d);
    for (std::size_t j = 0; j < obs.positions.size(); ++j) {
        const auto [i, k] = obs.positions[j];
        if (i >= n_s || k >= n_d) throw DimensionError("pilot observation: position outside the grid");
        if (obs.x[j] == cplx{}) throw NumericError("ls_at_pilots: zero pilot symbol");
        out.at(i, k) = obs.y[j] / obs.x[j];
    }
    return out;
}

namespace detail {

// Piecewise-linear fill of `n` samples from values known at sorted `knots`,
// held constant beyond the first and last knot.
template <typename Get, typename Set>
void interp_line(const std::vector<std::size_t>& knots, std::size_t n, Get get, Set set) {
    std::size_t seg = 0;
    for (std::size_t x = 0; x < n; ++x) {
        if (x <= knots.front()) {
            set(x, get(knots.front()));
        } else if (x >= knots.back()) {
            set(x, get(knots.back()));
        } else {
            while (knots[seg + 1] < x) ++seg;
            const double x0 = static_cast<double>(knots[seg]);
            const double x1 = static_cast<double>(knots[seg + 1]);
            const double w = (static_cast<double>(x) - x0) / (x1 - x0);
            set(x, (1.0 - w) * get(knots[seg]) + w * get(knots[seg + 1]));
        }
    }
}

}  // namespace detail

/// LS+LI baseline: linear along frequency within each pilot symbol, then
/// linear along time across pilot symbols. Edges are held at the nearest pilot.
inline ChannelGrid linear_interpolate(const ChannelGrid& h_lr, const PilotPattern& pattern) {
    const std::size_t n_s = h_lr.subcarriers;
    const std::size_t n_d = h_lr.symbols;
    pattern.validate(n_s, n_d);
    const auto freq_knots = pattern.pilot_subcarriers(n_s);
    ChannelGrid out(n_s, n_d);
    for (auto k : pattern.symbols) {
        detail::interp_line(
            freq_knots, n_s, [&](std::size_t i) { return h_lr.at(i, k); },
            [&](std::size_t i, cplx v) { out.at(i, k) = v; });
    }
    for (std::size_t i = 0; i < n_s; ++i) {
        detail::interp_line(
            pattern.symbols, n_d, [&](std::size_t k) { return out.at(i, k); },
            [&](std::size_t k, cplx v) { out.at(i, k) = v; });
    }
    return out;
}

}  // namespace helena
