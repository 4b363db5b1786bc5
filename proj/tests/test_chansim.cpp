#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <set>
#include <utility>

#include "helena/chansim.hpp"
#include "helena/dataset.hpp"
#include "helena/eval.hpp"

using namespace helena;

namespace {

SampleSpec spec_of(Profile p, double delay, double doppler, double snr, std::uint64_t seed) {
    SampleSpec s;
    s.profile = p;
    s.delay_spread_s = delay;
    s.doppler_hz = doppler;
    s.snr_db = snr;
    s.seed = seed;
    return s;
}

double ls_li_nmse_db(const std::vector<ChannelGrid>& truth, double snr, const PilotPattern& pattern,
                     std::uint64_t seed) {
    NmseAccumulator acc;
    for (std::size_t j = 0; j < truth.size(); ++j) {
        auto spec = spec_of(Profile::tdl_a, 100e-9, 50, snr, seed + j);
        const auto& h = truth[j];
        const auto lr = ls_at_pilots(simulate_rx(h, spec, pattern), h.subcarriers, h.symbols);
        const auto est = linear_interpolate(lr, pattern).planes<double>();
        const auto tru = h.planes<double>();
        acc.add(std::as_const(est).data(), std::as_const(tru).data());
    }
    return nmse_db(acc.linear());
}

std::vector<ChannelGrid> realizations(std::size_t n, std::uint64_t seed) {
    std::vector<ChannelGrid> out;
    for (std::size_t j = 0; j < n; ++j) {
        out.push_back(generate_channel(draw_sample_spec(seed, j, 10)));
    }
    return out;
}

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "helena_chansim_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

// ---------------------------------------------------------------------------
// Profiles
// ---------------------------------------------------------------------------

TEST(Profiles, TablesAreNormalizedToUnitDelaySpread) {
    for (std::uint8_t id = 0; id < kProfileCount; ++id) {
        const auto taps = tdl_taps(profile_from_id(id));
        double p = 0, m1 = 0, m2 = 0;
        for (const auto& t : taps) {
            const double lin = std::pow(10.0, t.power_db / 10.0);
            p += lin;
            m1 += lin * t.delay;
            m2 += lin * t.delay * t.delay;
        }
        const double rms = std::sqrt(m2 / p - (m1 / p) * (m1 / p));
        EXPECT_NEAR(rms, 1.0, 0.1) << profile_name(profile_from_id(id));
    }
}

TEST(Profiles, TableSpotValues) {
    EXPECT_EQ(tdl::kA.size(), 23u);
    EXPECT_EQ(tdl::kA[1].delay, 0.3819);
    EXPECT_EQ(tdl::kA[1].power_db, 0.0);
    EXPECT_EQ(tdl::kC.back().delay, 8.6523);
    EXPECT_TRUE(tdl::kD[0].los);
    EXPECT_TRUE(tdl::kE[0].los);
    // Rician first taps: specular over scattered power is the K-factor.
    EXPECT_NEAR(tdl::kD[0].power_db - tdl::kD[1].power_db, 13.3, 1e-9);
    EXPECT_NEAR(tdl::kE[0].power_db - tdl::kE[1].power_db, 22.0, 1e-9);
}

TEST(Profiles, UnknownIdIsConfigError) {
    EXPECT_THROW((void)profile_from_id(5), ConfigError);
    EXPECT_THROW((void)profile_name(static_cast<Profile>(9)), ConfigError);
    EXPECT_EQ(profile_name(Profile::tdl_c), "TDL-C");
}

TEST(SampleSpec, RangesAreEnforced) {
    EXPECT_NO_THROW(spec_of(Profile::tdl_b, 1e-9, 5, 0, 0).validate());
    EXPECT_NO_THROW(spec_of(Profile::tdl_b, 300e-9, 400, 20, 0).validate());
    EXPECT_THROW(spec_of(Profile::tdl_b, 301e-9, 50, 10, 0).validate(), ConfigError);
    EXPECT_THROW(spec_of(Profile::tdl_b, 100e-9, 401, 10, 0).validate(), ConfigError);
    EXPECT_THROW(spec_of(Profile::tdl_b, 100e-9, 50, 3, 0).validate(), ConfigError);
    EXPECT_THROW(spec_of(Profile::tdl_b, 100e-9, 50, 22, 0).validate(), ConfigError);
    EXPECT_THROW(spec_of(static_cast<Profile>(7), 100e-9, 50, 10, 0).validate(), ConfigError);
}

// ---------------------------------------------------------------------------
// Channel generation
// ---------------------------------------------------------------------------

TEST(GenerateChannel, StaticLimitHasIdenticalColumns) {
    const auto h = generate_channel(spec_of(Profile::tdl_c, 200e-9, 0, 10, 3));
    for (std::size_t i = 0; i < h.subcarriers; ++i)
        for (std::size_t k = 1; k < h.symbols; ++k) EXPECT_LT(std::abs(h.at(i, k) - h.at(i, 0)), 1e-3);
}

TEST(GenerateChannel, FlatLimitHasIdenticalRows) {
    const auto h = generate_channel(spec_of(Profile::tdl_a, 0, 300, 10, 4));
    for (std::size_t i = 1; i < h.subcarriers; ++i)
        for (std::size_t k = 0; k < h.symbols; ++k) EXPECT_LT(std::abs(h.at(i, k) - h.at(0, k)), 1e-9);
}

TEST(GenerateChannel, AveragePowerIsUnity) {
    for (Profile p : {Profile::tdl_a, Profile::tdl_e}) {
        double total = 0;
        const std::size_t n = 1000;
        for (std::size_t j = 0; j < n; ++j) {
            const auto h = generate_channel(spec_of(p, 100e-9, 100, 10, 1000 + j));
            for (const auto& v : h.values) total += std::norm(v);
        }
        const double mean = total / static_cast<double>(n * 612 * 14);
        EXPECT_GT(mean, 0.9) << profile_name(p);
        EXPECT_LT(mean, 1.1) << profile_name(p);
    }
}

TEST(GenerateChannel, TimeCorrelationFollowsBessel) {
    // Flat Rayleigh (delay 0): E[h(t) h*(t+τ)] = J0(2π f_d τ).
    const double fd = 300.0;
    const GridConfig grid;
    const double tau = 5 * grid.symbol_duration_s();
    cplx corr{};
    double power = 0;
    const std::size_t n = 4000;
    for (std::size_t j = 0; j < n; ++j) {
        const auto h = generate_channel(spec_of(Profile::tdl_a, 0, fd, 10, 5000 + j));
        corr += h.at(0, 0) * std::conj(h.at(0, 5));
        power += std::norm(h.at(0, 0));
    }
    const double measured = corr.real() / power;
    const double expected = std::cyl_bessel_j(0.0, 2 * std::numbers::pi * fd * tau);
    EXPECT_NEAR(measured, expected, 0.06);
}

TEST(GenerateChannel, SameSeedSameChannel) {
    const auto s = spec_of(Profile::tdl_d, 50e-9, 20, 10, 77);
    EXPECT_EQ(generate_channel(s).values, generate_channel(s).values);
    auto other = s;
    other.seed = 78;
    EXPECT_NE(generate_channel(s).values, generate_channel(other).values);
}

TEST(GenerateChannel, NegativeParametersAreConfigErrors) {
    EXPECT_THROW((void)generate_channel(spec_of(Profile::tdl_a, -1e-9, 10, 10, 0)), ConfigError);
    EXPECT_THROW((void)generate_channel(spec_of(Profile::tdl_a, 1e-9, -10, 10, 0)), ConfigError);
    EXPECT_THROW((void)generate_channel(spec_of(Profile::tdl_a, NAN, 10, 10, 0)), ConfigError);
}

TEST(GenerateChannel, GridHonoursConfig) {
    GridConfig g;
    g.subcarriers = 24;
    g.symbols = 4;
    const auto h = generate_channel(spec_of(Profile::tdl_b, 100e-9, 10, 10, 1), g);
    EXPECT_EQ(h.subcarriers, 24u);
    EXPECT_EQ(h.symbols, 4u);
    EXPECT_EQ(h.values.size(), 96u);
    EXPECT_NEAR(g.symbol_duration_s(), 1.0 / 8000.0, 1e-18);
}

// ---------------------------------------------------------------------------
// Pilots and received signal
// ---------------------------------------------------------------------------

TEST(PilotPattern, DefaultPositions) {
    PilotPattern p;
    const auto sc = p.pilot_subcarriers(612);
    EXPECT_EQ(sc.size(), 204u);
    EXPECT_EQ(sc[0], 0u);
    EXPECT_EQ(sc[1], 1u);
    EXPECT_EQ(sc[2], 6u);
    EXPECT_EQ(p.positions(612).size(), 408u);
    EXPECT_TRUE(p.is_pilot(7, 11));
    EXPECT_FALSE(p.is_pilot(7, 3));
    EXPECT_FALSE(p.is_pilot(8, 2));
}

TEST(PilotPattern, InvalidPatternsAreConfigErrors) {
    PilotPattern p;
    p.symbols = {14};
    EXPECT_THROW(p.validate(612, 14), ConfigError);
    p = {};
    p.symbols = {11, 2};
    EXPECT_THROW(p.validate(612, 14), ConfigError);
    p = {};
    p.offsets = {6};
    EXPECT_THROW(p.validate(612, 14), ConfigError);
    p = {};
    p.period = 13;
    p.offsets = {0};
    EXPECT_THROW(p.validate(612, 14), ConfigError);
    p = {};
    p.symbols.clear();
    EXPECT_THROW(p.validate(612, 14), ConfigError);
}

TEST(SimulateRx, NoiselessLsRecoversChannelAtPilots) {
    const auto h = generate_channel(spec_of(Profile::tdl_c, 150e-9, 80, 10, 9));
    auto s = spec_of(Profile::tdl_c, 150e-9, 80, INFINITY, 9);
    const auto obs = simulate_rx(h, s, PilotPattern{});
    for (const auto& x : obs.x) EXPECT_NEAR(std::abs(x), 1.0, 1e-12);
    const auto lr = ls_at_pilots(obs, 612, 14);
    PilotPattern p;
    for (std::size_t i = 0; i < 612; ++i)
        for (std::size_t k = 0; k < 14; ++k) {
            if (p.is_pilot(i, k)) {
                EXPECT_LT(std::abs(lr.at(i, k) - h.at(i, k)), 1e-12);
            } else {
                EXPECT_EQ(lr.at(i, k), cplx{});
            }
        }
}

TEST(SimulateRx, NoiseVarianceMatchesSnr) {
    // Unit channel, 0 dB: LS error at the pilots has variance 1.
    GridConfig g;
    g.subcarriers = 600;
    g.symbols = 14;
    ChannelGrid h(g.subcarriers, g.symbols);
    for (auto& v : h.values) v = 1.0;
    PilotPattern p;
    p.symbols = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13};
    p.offsets = {0, 1, 2, 3, 4, 5};
    double sum = 0, sum_re = 0;
    std::size_t n = 0;
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
        const auto obs = simulate_rx(h, spec_of(Profile::tdl_a, 0, 0, 0, seed), p);
        const auto lr = ls_at_pilots(obs, g.subcarriers, g.symbols);
        for (const auto& v : lr.values) {
            sum += std::norm(v - 1.0);
            sum_re += (v.real() - 1.0) * (v.real() - 1.0);
            ++n;
        }
    }
    ASSERT_GE(n, 100000u);
    EXPECT_NEAR(sum / static_cast<double>(n), 1.0, 0.05);
    EXPECT_NEAR(sum_re / static_cast<double>(n), 0.5, 0.025);
    EXPECT_NEAR(noise_variance(10), 0.1, 1e-15);
    EXPECT_EQ(noise_variance(INFINITY), 0.0);
    EXPECT_THROW((void)noise_variance(NAN), ConfigError);
}

TEST(LsAtPilots, UnitPilotIsIdentity) {
    PilotObservation obs;
    obs.positions = {{0, 0}, {3, 1}};
    obs.y = {cplx(0.5, -0.25), cplx(2, 1)};
    obs.x = {1.0, 1.0};
    const auto lr = ls_at_pilots(obs, 4, 2);
    EXPECT_EQ(lr.at(0, 0), obs.y[0]);
    EXPECT_EQ(lr.at(3, 1), obs.y[1]);
    EXPECT_EQ(lr.at(1, 1), cplx{});
    obs.x[1] = cplx(0, 1);
    EXPECT_EQ(ls_at_pilots(obs, 4, 2).at(3, 1), cplx(1, -2));
    obs.x[1] = 0.0;
    EXPECT_THROW((void)ls_at_pilots(obs, 4, 2), NumericError);
    obs.x.pop_back();
    EXPECT_THROW((void)ls_at_pilots(obs, 4, 2), DimensionError);
}

// ---------------------------------------------------------------------------
// Interpolation
// ---------------------------------------------------------------------------

TEST(LinearInterpolate, MidpointOfTwoPilots) {
    PilotPattern p;
    p.symbols = {0};
    p.period = 4;
    p.offsets = {0};
    ChannelGrid lr(5, 1);
    lr.at(0, 0) = 1.0;
    lr.at(4, 0) = 3.0;
    const auto out = linear_interpolate(lr, p);
    EXPECT_DOUBLE_EQ(out.at(2, 0).real(), 2.0);
    EXPECT_DOUBLE_EQ(out.at(1, 0).real(), 1.5);
    EXPECT_DOUBLE_EQ(out.at(4, 0).real(), 3.0);
}

TEST(LinearInterpolate, EdgesHoldNearestPilot) {
    PilotPattern p;
    p.symbols = {1, 2};
    p.period = 3;
    p.offsets = {1};
    ChannelGrid lr(6, 4);
    lr.at(1, 1) = cplx(1, 1);
    lr.at(4, 1) = cplx(4, 4);
    lr.at(1, 2) = cplx(2, 0);
    lr.at(4, 2) = cplx(8, 0);
    const auto out = linear_interpolate(lr, p);
    EXPECT_EQ(out.at(0, 1), cplx(1, 1));
    EXPECT_EQ(out.at(5, 2), cplx(8, 0));
    EXPECT_EQ(out.at(0, 0), cplx(1, 1));
    EXPECT_EQ(out.at(5, 3), cplx(8, 0));
}

TEST(LinearInterpolate, ConstantFieldIsReproduced) {
    PilotPattern p;
    ChannelGrid lr(612, 14);
    const cplx c(0.3, -0.7);
    for (const auto& [i, k] : p.positions(612)) lr.at(i, k) = c;
    const auto out = linear_interpolate(lr, p);
    for (const auto& v : out.values) EXPECT_LT(std::abs(v - c), 1e-12);
}

TEST(LinearInterpolate, PlanarFieldIsExactBetweenPilots) {
    PilotPattern p;
    ChannelGrid lr(612, 14);
    auto field = [](double i, double k) { return cplx(0.01 * i - 0.2 * k, 0.5 + 0.003 * i); };
    for (const auto& [i, k] : p.positions(612)) lr.at(i, k) = field(i, k);
    const auto out = linear_interpolate(lr, p);
    const auto sc = p.pilot_subcarriers(612);
    for (std::size_t i = sc.front(); i <= sc.back(); ++i)
        for (std::size_t k = 2; k <= 11; ++k) EXPECT_LT(std::abs(out.at(i, k) - field(i, k)), 1e-9);
}

// ---------------------------------------------------------------------------
// Baseline behaviour vs SNR
// ---------------------------------------------------------------------------

TEST(Baselines, LsErrorDecreasesWithSnr) {
    const auto truth = realizations(20, 31);
    PilotPattern p;
    double prev = INFINITY;
    for (double snr = 0; snr <= 20; snr += 2) {
        NmseAccumulator acc;
        for (std::size_t j = 0; j < truth.size(); ++j) {
            const auto& h = truth[j];
            const auto obs = simulate_rx(h, spec_of(Profile::tdl_a, 0, 0, snr, 100 + j), p);
            const auto lr = ls_at_pilots(obs, 612, 14);
            for (std::size_t q = 0; q < obs.positions.size(); ++q) {
                const auto [i, k] = obs.positions[q];
                const double est[2] = {lr.at(i, k).real(), lr.at(i, k).imag()};
                const double tru[2] = {h.at(i, k).real(), h.at(i, k).imag()};
                acc.add(std::span<const double>(est), std::span<const double>(tru));
            }
        }
        const double db = nmse_db(acc.linear());
        EXPECT_LT(db, prev) << snr;
        prev = db;
    }
}

TEST(Baselines, LsLiImprovesByTenDbFromZeroToTwenty) {
    const auto truth = realizations(200, 41);
    const double low = ls_li_nmse_db(truth, 0, PilotPattern{}, 7);
    const double high = ls_li_nmse_db(truth, 20, PilotPattern{}, 7);
    EXPECT_GE(low - high, 10.0) << low << " " << high;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

TEST(Dataset, BucketsAreEven) {
    DatasetOptions opt;
    opt.grid.subcarriers = 24;
    opt.grid.symbols = 14;
    const auto ds = generate_dataset(22, 5, opt);
    ASSERT_EQ(ds.size(), 22u);
    std::map<float, int> counts;
    for (const auto& m : ds.meta) ++counts[m.snr_db];
    ASSERT_EQ(counts.size(), 11u);
    for (const auto& [snr, n] : counts) EXPECT_EQ(n, 2) << snr;
    EXPECT_EQ(ds.meta[0].snr_db, 0.0f);
    EXPECT_EQ(ds.meta[21].snr_db, 20.0f);
}

TEST(Dataset, MetadataWithinRanges) {
    DatasetOptions opt;
    opt.grid.subcarriers = 24;
    const auto ds = generate_dataset(110, 6, opt);
    std::set<std::uint64_t> seeds;
    std::set<Profile> profiles;
    for (const auto& m : ds.meta) {
        EXPECT_GE(m.delay_spread_s, 1e-9f);
        EXPECT_LE(m.delay_spread_s, 300e-9f);
        EXPECT_GE(m.doppler_hz, 5.0f);
        EXPECT_LE(m.doppler_hz, 400.0f);
        seeds.insert(m.seed);
        profiles.insert(m.profile);
    }
    EXPECT_EQ(seeds.size(), 110u);
    EXPECT_EQ(profiles.size(), kProfileCount);
}

TEST(Dataset, InputIsSparseAndMatchesRegeneration) {
    DatasetOptions opt;
    const auto ds = generate_dataset(11, 8, opt);
    for (std::size_t s = 0; s < ds.size(); s += 5) {
        const auto in = ds.input(s);
        for (std::size_t i = 0; i < 612; ++i)
            for (std::size_t k = 0; k < 14; ++k) {
                if (!opt.pattern.is_pilot(i, k)) {
                    EXPECT_EQ(in[(i * 14 + k) * 2], 0.0f);
                    EXPECT_EQ(in[(i * 14 + k) * 2 + 1], 0.0f);
                }
            }
        // Stored metadata alone regenerates the label.
        const auto& m = ds.meta[s];
        const auto h = generate_channel(spec_of(m.profile, m.delay_spread_s, m.doppler_hz, m.snr_db, m.seed));
        const auto planes = h.planes<float>();
        EXPECT_EQ(std::memcmp(planes.ptr(), ds.label(s).data(), planes.size() * sizeof(float)), 0);
    }
}

TEST(Dataset, SameSeedIsByteIdentical) {
    DatasetOptions opt;
    opt.grid.subcarriers = 48;
    EXPECT_EQ(encode_dataset(generate_dataset(22, 9, opt)), encode_dataset(generate_dataset(22, 9, opt)));
    EXPECT_NE(encode_dataset(generate_dataset(22, 9, opt)), encode_dataset(generate_dataset(22, 10, opt)));
}

TEST(Dataset, ThreadCountDoesNotChangeBytes) {
    DatasetOptions one;
    one.grid.subcarriers = 48;
    DatasetOptions many = one;
    many.threads = 4;
    EXPECT_EQ(encode_dataset(generate_dataset(33, 11, one)), encode_dataset(generate_dataset(33, 11, many)));
}

TEST(Dataset, InvalidCountsAreConfigErrors) {
    EXPECT_THROW((void)generate_dataset(0, 1), ConfigError);
    EXPECT_THROW((void)generate_dataset(12, 1), ConfigError);
    const std::vector<std::size_t> short_list(10, 1);
    EXPECT_THROW((void)generate_dataset(short_list, 1), ConfigError);
}

TEST(Dataset, SnrBucketMapping) {
    for (std::size_t b = 0; b < kSnrBuckets; ++b) EXPECT_EQ(bucket_of_snr(snr_of_bucket(b)), b);
    EXPECT_THROW((void)bucket_of_snr(1.0), ConfigError);
    EXPECT_THROW((void)bucket_of_snr(22.0), ConfigError);
    EXPECT_THROW((void)bucket_of_snr(-2.0), ConfigError);
}

TEST(DatasetFile, RoundTripIsExact) {
    DatasetOptions opt;
    opt.grid.subcarriers = 36;
    const auto ds = generate_dataset(22, 12, opt);
    const auto path = temp_path("roundtrip.hced");
    save_dataset(ds, path);
    const auto back = load_dataset(path);
    EXPECT_EQ(back, ds);
    EXPECT_EQ(std::filesystem::file_size(path), 5u + 13u + 22u * (21u + 2u * 36u * 14u * 2u * 4u));
}

TEST(DatasetFile, HeaderLayout) {
    DatasetOptions opt;
    opt.grid.subcarriers = 12;
    opt.grid.symbols = 3;
    opt.pattern.symbols = {1};
    const auto bytes = encode_dataset(generate_dataset(11, 1, opt));
    EXPECT_EQ(std::string(bytes.data(), 5), "HCED1");
    std::uint32_t count, n_s, n_d;
    std::memcpy(&count, bytes.data() + 5, 4);
    std::memcpy(&n_s, bytes.data() + 9, 4);
    std::memcpy(&n_d, bytes.data() + 13, 4);
    EXPECT_EQ(count, 11u);
    EXPECT_EQ(n_s, 12u);
    EXPECT_EQ(n_d, 3u);
    EXPECT_EQ(bytes[17], 2);
}

TEST(DatasetFile, CorruptionIsFormatError) {
    DatasetOptions opt;
    opt.grid.subcarriers = 12;
    const auto bytes = encode_dataset(generate_dataset(11, 2, opt));
    auto bad_magic = bytes;
    bad_magic[1] = 'X';
    EXPECT_THROW((void)decode_dataset(bad_magic), FormatError);
    std::vector<char> truncated(bytes.begin(), bytes.end() - 1);
    EXPECT_THROW((void)decode_dataset(truncated), FormatError);
    auto bad_planes = bytes;
    bad_planes[17] = 3;
    EXPECT_THROW((void)decode_dataset(bad_planes), FormatError);
    auto bad_profile = bytes;
    bad_profile[18] = 9;
    EXPECT_THROW((void)decode_dataset(bad_profile), FormatError);
    EXPECT_THROW((void)decode_dataset(std::vector<char>{}), FormatError);
}

TEST(DatasetFile, MissingFileIsIoError) {
    EXPECT_THROW((void)load_dataset(temp_path("absent.hced")), IoError);
}
