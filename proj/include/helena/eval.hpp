#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "helena/chansim.hpp"
#include "helena/dataset.hpp"
#include "helena/errors.hpp"
#include "helena/model.hpp"
#include "helena/tape.hpp"
#include "helena/train.hpp"

namespace helena {

inline constexpr double kNmseFloorDb = -100.0;

/// Running sums for NMSE = E||Ĥ-H||^2 / E||H||^2 over a batch of grids. Batch
/// means cancel in the ratio, so plain sums are kept.
struct NmseAccumulator {
    double error = 0;
    double energy = 0;
    std::size_t samples = 0;

    template <typename A, typename B>
    void add(std::span<const A> estimate, std::span<const B> truth) {
        if (estimate.size() != truth.size()) {
            throw DimensionError("nmse: estimate has " + std::to_string(estimate.size()) + " values, truth has " +
                                 std::to_string(truth.size()));
        }
        for (std::size_t i = 0; i < truth.size(); ++i) {
            const double t = static_cast<double>(truth[i]);
            const double e = static_cast<double>(estimate[i]) - t;
            error += e * e;
            energy += t * t;
        }
        ++samples;
    }

    void merge(const NmseAccumulator& o) {
        error += o.error;
        energy += o.energy;
        samples += o.samples;
    }

    double linear() const {
        if (!(energy > 0)) throw NumericError("nmse: reference channel has zero energy");
        return error / energy;
    }
};

/// NMSE of stacked real/imaginary planes; the squared complex norm is the sum
/// of squares over both planes.
template <typename A, typename B>
double nmse(std::span<const A> estimate, std::span<const B> truth) {
    NmseAccumulator acc;
    acc.add(estimate, truth);
    return acc.linear();
}

template <typename T>
double nmse(const Tensor<T>& estimate, const Tensor<T>& truth) {
    detail::require_same_shape(estimate.shape(), truth.shape(), "nmse");
    return nmse(estimate.data(), truth.data());
}

/// 10 log10 of a linear NMSE, clamped at -100 dB so a perfect estimate serializes.
inline double nmse_db(double linear) {
    if (!(linear > 0)) return kNmseFloorDb;
    return std::max(kNmseFloorDb, 10.0 * std::log10(linear));
}

struct NmseRow {
    double snr_db = 0;
    double nmse_linear = 0;
    double nmse_db = 0;
    std::size_t sample_count = 0;
};

struct LatencyStats {
    double mean_ms = 0;
    double std_ms = 0;
    double min_ms = 0;
    double max_ms = 0;
    std::size_t runs = 0;
};

struct EvalReport {
    std::string method;
    std::vector<NmseRow> rows;  // ascending SNR
    NmseRow overall;            // pooled over every evaluated sample; snr_db unused
    std::optional<std::size_t> param_count;
    std::optional<std::uint64_t> flop_count;
    std::optional<LatencyStats> latency;
};

/// Maps (sample index, H_LR planes) to an estimate of the full grid.
using Estimator = std::function<Tensor<float>(std::size_t, const Tensor<float>&)>;

/// Runs `estimator` on the listed samples and reports NMSE per SNR value and
/// pooled over all of them.
inline EvalReport evaluate(const std::string& method, const Estimator& estimator, const Dataset& ds,
                           std::span<const std::size_t> indices, std::size_t threads = 1) {
    if (indices.empty()) throw ConfigError("evaluate: split is empty");
    const std::size_t workers = std::clamp<std::size_t>(threads, 1, indices.size());
    std::vector<NmseAccumulator> per_sample(indices.size());
    detail::run_workers(workers, [&](std::size_t wk) {
        auto [lo, hi] = detail::share(indices.size(), wk, workers);
        for (std::size_t j = lo; j < hi; ++j) {
            const std::size_t s = indices[j];
            const Tensor<float> est = estimator(s, ds.input_tensor<float>(s));
            if (est.shape() != ds.sample_shape()) {
                throw DimensionError("evaluate: estimator returned " + shape_str(est.shape()) + ", expected " +
                                     shape_str(ds.sample_shape()));
            }
            per_sample[j].add(est.data(), ds.label(s));
        }
    });
    std::map<float, NmseAccumulator> groups;
    NmseAccumulator all;
    for (std::size_t j = 0; j < indices.size(); ++j) {
        groups[ds.meta[indices[j]].snr_db].merge(per_sample[j]);
        all.merge(per_sample[j]);
    }
    EvalReport report;
    report.method = method;
    for (const auto& [snr, acc] : groups) {
        const double lin = acc.linear();
        report.rows.push_back({static_cast<double>(snr), lin, nmse_db(lin), acc.samples});
    }
    const double lin = all.linear();
    report.overall = {0.0, lin, nmse_db(lin), all.samples};
    return report;
}

/// Trained model in inference mode.
template <typename T>
Estimator model_estimator(const ModelWeights<T>& w) {
    return [&w](std::size_t, const Tensor<float>& h_lr) {
        NoGradScope<T> no_grad;
        Rng unused(0);
        if constexpr (std::is_same_v<T, float>) {
            return forward(w, h_lr, false, unused);
        } else {
            return forward(w, h_lr.template cast<T>(), false, unused).template cast<float>();
        }
    };
}

/// The sparse pilot LS grid itself, zeros off the pilots.
inline Estimator ls_estimator() {
    return [](std::size_t, const Tensor<float>& h_lr) { return h_lr.clone(); };
}

/// LS at the pilots followed by linear interpolation.
inline Estimator ls_li_estimator(PilotPattern pattern) {
    return [pattern = std::move(pattern)](std::size_t, const Tensor<float>& h_lr) {
        return linear_interpolate(ChannelGrid::from_planes(h_lr), pattern).planes<float>();
    };
}

// ---------------------------------------------------------------------------
// Latency
// ---------------------------------------------------------------------------

inline LatencyStats latency_stats(std::span<const double> samples_ms) {
    if (samples_ms.empty()) throw ConfigError("latency: runs must be positive");
    LatencyStats s;
    s.runs = samples_ms.size();
    s.min_ms = *std::min_element(samples_ms.begin(), samples_ms.end());
    s.max_ms = *std::max_element(samples_ms.begin(), samples_ms.end());
    double sum = 0;
    for (double v : samples_ms) sum += v;
    s.mean_ms = sum / static_cast<double>(s.runs);
    double var = 0;
    for (double v : samples_ms) var += (v - s.mean_ms) * (v - s.mean_ms);
    s.std_ms = std::sqrt(var / static_cast<double>(s.runs));
    // Summation rounding can put the mean a hair outside [min, max] when all runs tie.
    s.mean_ms = std::clamp(s.mean_ms, s.min_ms, s.max_ms);
    return s;
}

/// Times `runs` single-sample inference passes after `warmup` untimed ones,
/// on the calling thread with a monotonic clock.
template <typename T>
LatencyStats benchmark_inference(const ModelWeights<T>& w, const Tensor<T>& sample, std::size_t runs,
                                 std::size_t warmup = 10) {
    if (runs == 0) throw ConfigError("benchmark: runs must be positive");
    NoGradScope<T> no_grad;
    Rng unused(0);
    volatile T sink = 0;
    for (std::size_t i = 0; i < warmup; ++i) sink = forward(w, sample, false, unused)[0];
    std::vector<double> ms(runs);
    for (std::size_t i = 0; i < runs; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto out = forward(w, sample, false, unused);
        const auto t1 = std::chrono::steady_clock::now();
        sink = out[0];
        ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    (void)sink;
    return latency_stats(ms);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline std::string reports_csv(std::span<const EvalReport> reports) {
    std::string out = "method,snr_db,nmse_linear,nmse_db,sample_count\n";
    for (const auto& r : reports) {
        for (const auto& row : r.rows) {
            out += r.method + "," + format_double(row.snr_db) + "," + format_double(row.nmse_linear) + "," +
                   format_double(row.nmse_db) + "," + std::to_string(row.sample_count) + "\n";
        }
    }
    return out;
}

inline nlohmann::ordered_json latency_json(const LatencyStats& s) {
    return {{"mean_ms", s.mean_ms}, {"std_ms", s.std_ms}, {"min_ms", s.min_ms}, {"max_ms", s.max_ms}, {"runs", s.runs}};
}

inline nlohmann::ordered_json report_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["method"] = r.method;
    auto rows = nlohmann::ordered_json::array();
    for (const auto& row : r.rows) {
        rows.push_back({{"snr_db", row.snr_db},
                        {"nmse_linear", row.nmse_linear},
                        {"nmse_db", row.nmse_db},
                        {"sample_count", row.sample_count}});
    }
    j["rows"] = std::move(rows);
    j["nmse_linear"] = r.overall.nmse_linear;
    j["nmse_db"] = r.overall.nmse_db;
    j["sample_count"] = r.overall.sample_count;
    if (r.param_count) j["param_count"] = *r.param_count;
    if (r.flop_count) j["flop_count"] = *r.flop_count;
    if (r.latency) j["latency"] = latency_json(*r.latency);
    return j;
}

inline std::string reports_json(std::span<const EvalReport> reports) {
    nlohmann::ordered_json j;
    j["reports"] = nlohmann::ordered_json::array();
    for (const auto& r : reports) j["reports"].push_back(report_json(r));
    return j.dump(2) + "\n";
}

}  // namespace helena
