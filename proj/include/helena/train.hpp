#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "helena/binary_io.hpp"
#include "helena/dataset.hpp"
#include "helena/errors.hpp"
#include "helena/model.hpp"
#include "helena/rng.hpp"
#include "helena/tape.hpp"
#include "helena/weights_io.hpp"

namespace helena {

struct TrainConfig {
    std::size_t batch_size = 64;
    double lr0 = 0.01;
    double lr_factor = 0.8;
    std::size_t lr_patience_epochs = 40;
    double lr_min = 1e-5;
    std::size_t early_stop_patience = 50;
    std::size_t max_epochs = 500;
    std::uint64_t seed = 0;
    double train_ratio = 0.70;
    double val_ratio = 0.15;
    double test_ratio = 0.15;
    std::size_t threads = 1;

    void validate() const {
        if (batch_size == 0) throw ConfigError("train config: batch_size must be positive");
        if (!(lr0 > 0) || !std::isfinite(lr0)) throw ConfigError("train config: lr0 must be positive");
        if (!(lr_factor > 0 && lr_factor <= 1)) throw ConfigError("train config: lr_factor must be in (0, 1]");
        if (lr_patience_epochs == 0) throw ConfigError("train config: lr_patience_epochs must be positive");
        if (!(lr_min > 0) || lr_min > lr0) throw ConfigError("train config: lr_min must be in (0, lr0]");
        if (early_stop_patience == 0) throw ConfigError("train config: early_stop_patience must be positive");
        if (threads == 0) throw ConfigError("train config: threads must be positive");
        for (auto [v, name] : {std::pair{train_ratio, "train_ratio"}, {val_ratio, "val_ratio"}, {test_ratio, "test_ratio"}}) {
            if (!(v >= 0 && v <= 1)) throw ConfigError(std::string("train config: ") + name + " must be in [0, 1]");
        }
        if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9) {
            throw ConfigError("train config: train_ratio + val_ratio + test_ratio must equal 1");
        }
    }
};

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

/// Seeded stratified partition. Each SNR group is shuffled and its members are
/// spread evenly over [0, 1); the merged order is then cut by the ratios, so
/// every group lands in each split in proportion. Index lists come back sorted.
inline Split split_dataset(const Dataset& ds, double train_ratio, double val_ratio, double test_ratio,
                           std::uint64_t seed) {
    if (ds.size() == 0) throw ConfigError("split_dataset: dataset is empty");
    TrainConfig check;
    check.train_ratio = train_ratio;
    check.val_ratio = val_ratio;
    check.test_ratio = test_ratio;
    check.validate();

    std::map<float, std::vector<std::size_t>> groups;
    for (std::size_t s = 0; s < ds.size(); ++s) groups[ds.meta[s].snr_db].push_back(s);

    struct Keyed {
        double key;
        std::size_t group;
        std::size_t index;
    };
    std::vector<Keyed> keyed;
    keyed.reserve(ds.size());
    std::size_t g = 0;
    for (auto& [_, members] : groups) {
        Rng rng(derive_seed(seed, 0x5EED0000 + g));
        for (std::size_t j = members.size(); j > 1; --j) std::swap(members[j - 1], members[rng.below(j)]);
        for (std::size_t j = 0; j < members.size(); ++j) {
            keyed.push_back({(static_cast<double>(j) + 0.5) / static_cast<double>(members.size()), g, members[j]});
        }
        ++g;
    }
    std::sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
        return a.key != b.key ? a.key < b.key : a.group < b.group;
    });

    const double n = static_cast<double>(ds.size());
    const auto cut1 = static_cast<std::size_t>(std::llround(train_ratio * n));
    const auto cut2 = std::min(ds.size(), static_cast<std::size_t>(std::llround((train_ratio + val_ratio) * n)));
    Split out;
    for (std::size_t j = 0; j < keyed.size(); ++j) {
        auto& dst = j < cut1 ? out.train : (j < cut2 ? out.val : out.test);
        dst.push_back(keyed[j].index);
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

inline Split split_dataset(const Dataset& ds, const TrainConfig& cfg) {
    return split_dataset(ds, cfg.train_ratio, cfg.val_ratio, cfg.test_ratio, cfg.seed);
}

// ---------------------------------------------------------------------------
// Loss and optimizer
// ---------------------------------------------------------------------------

/// Mean squared error over all elements, as a scalar tensor.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& label) {
    detail::require_same_shape(pred.shape(), label.shape(), "mse_loss");
    const std::size_t n = pred.size();
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double e = static_cast<double>(pred[i]) - static_cast<double>(label[i]);
        acc += e * e;
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
    if (auto* tape = detail::tape_for(out, pred, label)) {
        tape->record([pred, label, out, n] {
            if (!out.has_grad()) return;
            const T g = out.grad()[0] * T(2) / static_cast<T>(n);
            if (pred.requires_grad()) {
                auto gp = pred.grad();
                for (std::size_t i = 0; i < n; ++i) gp[i] += g * (pred[i] - label[i]);
            }
            if (label.requires_grad()) {
                auto gl = label.grad();
                for (std::size_t i = 0; i < n; ++i) gl[i] -= g * (pred[i] - label[i]);
            }
        });
    }
    return out;
}

template <typename T>
using Gradients = std::map<std::string, std::vector<T>>;

template <typename T>
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::map<std::string, std::vector<T>> m;
    std::map<std::string, std::vector<T>> v;
};

/// One bias-corrected Adam update. Every weight needs an entry in `grads`.
template <typename T>
void adam_step(ModelWeights<T>& w, const Gradients<T>& grads, AdamState<T>& state, double lr) {
    for (const auto& [name, t] : w.tensors) {
        auto it = grads.find(name);
        if (it == grads.end()) throw ConsistencyError("adam_step: no gradient for '" + name + "'");
        if (it->second.size() != t.size()) throw ConsistencyError("adam_step: gradient size mismatch for '" + name + "'");
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    const T b1 = static_cast<T>(state.beta1);
    const T b2 = static_cast<T>(state.beta2);
    const T step_size = static_cast<T>(lr / c1);
    const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
    const T eps = static_cast<T>(state.eps);
    for (auto& [name, t] : w.tensors) {
        const auto& g = grads.at(name);
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) {
            m.assign(t.size(), T(0));
            v.assign(t.size(), T(0));
        }
        T* p = t.ptr();
        for (std::size_t i = 0; i < t.size(); ++i) {
            m[i] = b1 * m[i] + (T(1) - b1) * g[i];
            v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
            p[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_c2 + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Fit
// ---------------------------------------------------------------------------

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0;
    double val_loss = 0;
    double lr = 0;

    bool operator==(const EpochRecord&) const = default;
};

/// Loss went non-finite. Carries the history up to the last finite epoch.
class TrainingError : public std::runtime_error {
   public:
    TrainingError(const std::string& what, std::vector<EpochRecord> history)
        : std::runtime_error(what), history_(std::move(history)) {}
    const std::vector<EpochRecord>& history() const { return history_; }

   private:
    std::vector<EpochRecord> history_;
};

template <typename T>
struct FitResult {
    ModelWeights<T> weights;
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;  // 0 when no epoch ran
    double best_val_loss = std::numeric_limits<double>::infinity();
};

namespace detail {

template <typename F>
void run_workers(std::size_t workers, F&& body) {
    if (workers == 1) {
        body(0);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    body(w);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

// Contiguous share of [0, n) for worker w of k.
inline std::pair<std::size_t, std::size_t> share(std::size_t n, std::size_t w, std::size_t k) {
    return {n * w / k, n * (w + 1) / k};
}

inline std::uint64_t dropout_seed(std::uint64_t seed, std::size_t epoch, std::size_t sample) {
    return derive_seed(derive_seed(seed ^ 0xD809D809ULL, epoch), sample);
}

}  // namespace detail

/// Inference-mode mean per-sample MSE over `indices`.
template <typename T>
double mean_loss(const ModelWeights<T>& w, const Dataset& ds, std::span<const std::size_t> indices,
                 std::size_t threads = 1) {
    if (indices.empty()) throw ConfigError("mean_loss: no samples");
    const std::size_t workers = std::clamp<std::size_t>(threads, 1, indices.size());
    std::vector<double> partial(indices.size());
    detail::run_workers(workers, [&](std::size_t wk) {
        NoGradScope<T> no_grad;
        Rng unused(0);
        auto [lo, hi] = detail::share(indices.size(), wk, workers);
        for (std::size_t j = lo; j < hi; ++j) {
            const auto pred = forward(w, ds.input_tensor<T>(indices[j]), false, unused);
            partial[j] = static_cast<double>(mse_loss(pred, ds.label_tensor<T>(indices[j]))[0]);
        }
    });
    double sum = 0;
    for (double v : partial) sum += v;
    return sum / static_cast<double>(indices.size());
}

/// Gradient of the mean per-sample MSE over `batch` (dropout active), plus that
/// mean. With several workers each owns a weight copy; partial gradients are
/// summed in worker order so a fixed thread count gives fixed results.
template <typename T>
std::pair<Gradients<T>, double> batch_gradients(const ModelWeights<T>& w, const Dataset& ds,
                                                std::span<const std::size_t> batch, std::uint64_t seed,
                                                std::size_t epoch, std::size_t threads) {
    const std::size_t workers = std::clamp<std::size_t>(threads, 1, batch.size());
    std::vector<ModelWeights<T>> copies;
    for (std::size_t k = 0; k < workers; ++k) {
        copies.push_back(w.clone());
        copies.back().set_requires_grad(true);
    }
    std::vector<double> losses(batch.size());
    detail::run_workers(workers, [&](std::size_t wk) {
        auto& mine = copies[wk];
        auto [lo, hi] = detail::share(batch.size(), wk, workers);
        for (std::size_t j = lo; j < hi; ++j) {
            const std::size_t s = batch[j];
            Rng rng(detail::dropout_seed(seed, epoch, s));
            Tape<T> tape;
            RecordScope<T> scope(tape);
            const auto pred = forward(mine, ds.input_tensor<T>(s), true, rng);
            auto loss = mse_loss(pred, ds.label_tensor<T>(s));
            losses[j] = static_cast<double>(loss[0]);
            tape.backward(loss);
        }
    });
    Gradients<T> grads;
    const T inv = T(1) / static_cast<T>(batch.size());
    for (const auto& [name, t] : w.tensors) {
        auto& g = grads[name];
        g.assign(t.size(), T(0));
        for (auto& c : copies) {
            const auto& ct = c.tensors.at(name);
            if (!ct.has_grad()) continue;
            auto cg = ct.grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += cg[i];
        }
        for (auto& v : g) v *= inv;
    }
    double sum = 0;
    for (double v : losses) sum += v;
    return {std::move(grads), sum / static_cast<double>(batch.size())};
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam on per-sample MSE with a plateau learning-rate schedule and early
/// stopping on validation loss. Returns the weights of the best validation epoch
/// (earliest on ties); `w` itself is not modified.
template <typename T>
FitResult<T> fit(const ModelWeights<T>& w, const Dataset& ds, std::span<const std::size_t> train_idx,
                 std::span<const std::size_t> val_idx, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    FitResult<T> result{w.clone(), {}, 0, std::numeric_limits<double>::infinity()};
    if (cfg.max_epochs == 0) return result;
    if (train_idx.empty()) throw ConfigError("fit: training split is empty");
    if (val_idx.empty()) throw ConfigError("fit: validation split is empty");

    ModelWeights<T> current = w.clone();
    current.set_requires_grad(false);
    AdamState<T> adam;
    double lr = cfg.lr0;
    std::size_t since_best = 0;
    std::size_t since_change = 0;
    std::vector<std::size_t> order(train_idx.begin(), train_idx.end());

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        Rng shuffle(derive_seed(cfg.seed ^ 0x5A0FF1EULL, epoch));
        for (std::size_t j = order.size(); j > 1; --j) std::swap(order[j - 1], order[shuffle.below(j)]);

        double train_sum = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            std::span<const std::size_t> batch(order.data() + start, stop - start);
            auto [grads, loss] = batch_gradients(current, ds, batch, cfg.seed, epoch, cfg.threads);
            if (!std::isfinite(loss)) {
                throw TrainingError("training loss became non-finite in epoch " + std::to_string(epoch),
                                    result.history);
            }
            train_sum += loss * static_cast<double>(batch.size());
            adam_step(current, grads, adam, lr);
        }
        const double train_loss = train_sum / static_cast<double>(order.size());
        const double val_loss = mean_loss(current, ds, val_idx, cfg.threads);
        if (!std::isfinite(val_loss)) {
            throw TrainingError("validation loss became non-finite in epoch " + std::to_string(epoch),
                                result.history);
        }
        const EpochRecord rec{epoch, train_loss, val_loss, lr};
        result.history.push_back(rec);
        if (on_epoch) on_epoch(rec);

        if (val_loss < result.best_val_loss) {
            result.best_val_loss = val_loss;
            result.best_epoch = epoch;
            result.weights = current.clone();
            since_best = 0;
            since_change = 0;
        } else {
            ++since_best;
            ++since_change;
            if (since_change >= cfg.lr_patience_epochs) {
                lr = std::max(lr * cfg.lr_factor, cfg.lr_min);
                since_change = 0;
            }
            if (since_best >= cfg.early_stop_patience) break;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// History and checkpoint files
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline std::string history_csv(const std::vector<EpochRecord>& history) {
    std::string out = "epoch,train_loss,val_loss,lr\n";
    for (const auto& r : history) {
        out += std::to_string(r.epoch) + "," + format_double(r.train_loss) + "," + format_double(r.val_loss) + "," +
               format_double(r.lr) + "\n";
    }
    return out;
}

/// Best weights in the weight format plus a key=value sidecar `<path>.meta`.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const FitResult<T>& fit_result) {
    save_weights(fit_result.weights, path);
    double lr = 0;
    for (const auto& r : fit_result.history) {
        if (r.epoch == fit_result.best_epoch) lr = r.lr;
    }
    std::ostringstream meta;
    meta << "epoch=" << fit_result.best_epoch << "\n"
         << "val_loss=" << format_double(fit_result.best_val_loss) << "\n"
         << "lr=" << format_double(lr) << "\n";
    std::filesystem::path meta_path = path;
    meta_path += ".meta";
    io::write_text_atomic(meta_path, meta.str());
}

}  // namespace helena
