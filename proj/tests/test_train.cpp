#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "helena/train.hpp"
#include "helena/weights_io.hpp"
#include "test_support.hpp"

using namespace helena;
using helena::testing::random_tensor;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.subcarriers = 24;
    c.symbols = 4;
    c.patch = 6;
    c.embed_dim = 8;
    c.heads = 2;
    c.se_reduction = 2;
    c.conv1_filters = 2;
    c.conv2_filters = 2;
    return c;
}

DatasetOptions tiny_options() {
    DatasetOptions o;
    o.grid.subcarriers = 24;
    o.grid.symbols = 4;
    o.pattern.symbols = {1, 2};
    return o;
}

// Dataset with only SNR metadata filled in; enough for splitting.
Dataset metadata_only(std::size_t per_snr) {
    Dataset ds;
    for (std::size_t b = 0; b < kSnrBuckets; ++b)
        for (std::size_t j = 0; j < per_snr; ++j) {
            SampleMeta m;
            m.snr_db = static_cast<float>(snr_of_bucket(b));
            ds.meta.push_back(m);
        }
    return ds;
}

// Eight samples with noiseless pilots. Pilot noise is white and cannot be
// memorized through a rank-d reconstruction, so it would set a loss floor.
Dataset noiseless_eight() {
    const auto opt = tiny_options();
    Dataset ds;
    ds.subcarriers = opt.grid.subcarriers;
    ds.symbols = opt.grid.symbols;
    for (std::size_t s = 0; s < 8; ++s) {
        auto spec = draw_sample_spec(3, s, 20);
        spec.snr_db = INFINITY;
        const auto h = generate_channel(spec, opt.grid);
        const auto lr = ls_at_pilots(simulate_rx(h, spec, opt.pattern), ds.subcarriers, ds.symbols);
        const auto in = lr.planes<float>();
        const auto lab = h.planes<float>();
        ds.inputs.insert(ds.inputs.end(), in.data().begin(), in.data().end());
        ds.labels.insert(ds.labels.end(), lab.data().begin(), lab.data().end());
        ds.meta.push_back({spec.profile, static_cast<float>(spec.delay_spread_s),
                           static_cast<float>(spec.doppler_hz), 20.0f, spec.seed});
    }
    return ds;
}

std::vector<std::size_t> iota(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

TrainConfig quick_config(std::size_t epochs) {
    TrainConfig t;
    t.batch_size = 8;
    t.max_epochs = epochs;
    t.seed = 5;
    return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

TEST(TrainConfig, DefaultsFollowRecipe) {
    TrainConfig t;
    EXPECT_EQ(t.batch_size, 64u);
    EXPECT_EQ(t.lr0, 0.01);
    EXPECT_EQ(t.lr_factor, 0.8);
    EXPECT_EQ(t.lr_patience_epochs, 40u);
    EXPECT_EQ(t.lr_min, 1e-5);
    EXPECT_EQ(t.early_stop_patience, 50u);
    EXPECT_EQ(t.max_epochs, 500u);
    EXPECT_NO_THROW(t.validate());
}

TEST(TrainConfig, ViolationsAreConfigErrors) {
    auto bad = [](auto mutate) {
        TrainConfig t;
        mutate(t);
        EXPECT_THROW(t.validate(), ConfigError);
    };
    bad([](TrainConfig& t) { t.batch_size = 0; });
    bad([](TrainConfig& t) { t.lr0 = 0; });
    bad([](TrainConfig& t) { t.lr_factor = 1.5; });
    bad([](TrainConfig& t) { t.lr_min = 1.0; });
    bad([](TrainConfig& t) { t.threads = 0; });
    bad([](TrainConfig& t) { t.train_ratio = 0.8; });
    bad([](TrainConfig& t) { t.val_ratio = -0.1; t.train_ratio = 0.95; });
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

TEST(Split, SeventyFifteenFifteen) {
    Dataset ds;
    for (int i = 0; i < 100; ++i) ds.meta.push_back({});
    const auto s = split_dataset(ds, 0.7, 0.15, 0.15, 1);
    EXPECT_EQ(s.train.size(), 70u);
    EXPECT_EQ(s.val.size(), 15u);
    EXPECT_EQ(s.test.size(), 15u);
}

TEST(Split, IsAPartition) {
    const auto ds = metadata_only(20);
    const auto s = split_dataset(ds, 0.7, 0.15, 0.15, 2);
    std::set<std::size_t> all;
    for (const auto* part : {&s.train, &s.val, &s.test}) {
        EXPECT_TRUE(std::is_sorted(part->begin(), part->end()));
        for (auto i : *part) EXPECT_TRUE(all.insert(i).second) << i;
    }
    EXPECT_EQ(all.size(), ds.size());
    EXPECT_EQ(*all.rbegin(), ds.size() - 1);
}

TEST(Split, SameSeedSameSplit) {
    const auto ds = metadata_only(20);
    const auto a = split_dataset(ds, 0.7, 0.15, 0.15, 3);
    const auto b = split_dataset(ds, 0.7, 0.15, 0.15, 3);
    const auto c = split_dataset(ds, 0.7, 0.15, 0.15, 4);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.val, b.val);
    EXPECT_EQ(a.test, b.test);
    EXPECT_NE(a.test, c.test);
}

TEST(Split, StratifiedBySnr) {
    const auto ds = metadata_only(200);
    const auto s = split_dataset(ds, 0.7, 0.15, 0.15, 5);
    for (const auto& [part, share] : {std::pair{&s.train, 0.7}, {&s.val, 0.15}, {&s.test, 0.15}}) {
        std::map<float, std::size_t> counts;
        for (auto i : *part) ++counts[ds.meta[i].snr_db];
        ASSERT_EQ(counts.size(), kSnrBuckets);
        for (const auto& [snr, n] : counts) EXPECT_NEAR(static_cast<double>(n), 200 * share, 1.0) << snr;
    }
}

TEST(Split, ZeroRatioGivesEmptyPart) {
    const auto ds = metadata_only(2);
    const auto s = split_dataset(ds, 1.0, 0.0, 0.0, 1);
    EXPECT_EQ(s.train.size(), ds.size());
    EXPECT_TRUE(s.val.empty());
    EXPECT_TRUE(s.test.empty());
    EXPECT_THROW((void)split_dataset(Dataset{}, 0.7, 0.15, 0.15, 1), ConfigError);
    EXPECT_THROW((void)split_dataset(ds, 0.7, 0.2, 0.2, 1), ConfigError);
}

// ---------------------------------------------------------------------------
// Loss and optimizer
// ---------------------------------------------------------------------------

TEST(MseLoss, HandCases) {
    const Tensor<double> a({2, 2}, std::vector<double>{1, 2, 3, 4});
    const Tensor<double> b({2, 2}, std::vector<double>{1, 0, 3, 0});
    EXPECT_DOUBLE_EQ(mse_loss(a, a)[0], 0.0);
    EXPECT_DOUBLE_EQ(mse_loss(a, b)[0], (4.0 + 16.0) / 4.0);
    EXPECT_THROW((void)mse_loss(a, Tensor<double>({4})), DimensionError);
}

TEST(MseLoss, GradientMatchesFiniteDifferences) {
    Rng rng(1);
    auto pred = random_tensor({3, 4, 2}, rng);
    const auto label = random_tensor({3, 4, 2}, rng);
    const double err = helena::testing::gradient_error(
        [&](const std::vector<Tensor<double>>& in) { return mse_loss(in[0], label); }, {pred});
    EXPECT_LT(err, 1e-6);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    auto w = build<double>(tiny_config(), 1);
    const auto before = w.clone();
    Gradients<double> g;
    for (const auto& [name, t] : w.tensors) {
        g[name].assign(t.size(), 0.0);
        for (std::size_t i = 0; i < t.size(); ++i) g[name][i] = (i % 2 ? -1.0 : 1.0) * (0.1 + 0.01 * i);
    }
    AdamState<double> st;
    adam_step(w, g, st, 0.01);
    for (const auto& [name, t] : w.tensors)
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double moved = t[i] - before.at(name)[i];
            EXPECT_NEAR(moved, (i % 2 ? 0.01 : -0.01), 1e-8) << name << "[" << i << "]";
        }
    EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ZeroGradientLeavesWeights) {
    auto w = build<double>(tiny_config(), 2);
    const auto before = w.clone();
    Gradients<double> g;
    for (const auto& [name, t] : w.tensors) g[name].assign(t.size(), 0.0);
    AdamState<double> st;
    for (int k = 0; k < 3; ++k) adam_step(w, g, st, 0.01);
    for (const auto& [name, t] : w.tensors)
        for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t[i], before.at(name)[i]);
}

TEST(Adam, MissingGradientIsConsistencyError) {
    auto w = build<double>(tiny_config(), 3);
    Gradients<double> g;
    for (const auto& [name, t] : w.tensors) g[name].assign(t.size(), 0.0);
    g.erase("recon.bias");
    AdamState<double> st;
    EXPECT_THROW(adam_step(w, g, st, 0.01), ConsistencyError);
    g["recon.bias"].assign(3, 0.0);
    EXPECT_THROW(adam_step(w, g, st, 0.01), ConsistencyError);
    EXPECT_EQ(st.step, 0u);
}

TEST(BatchGradients, MatchesSumOfSingleSampleGradients) {
    const auto ds = generate_dataset(11, 7, tiny_options());
    auto w = build<double>(tiny_config(), 4);
    const std::vector<std::size_t> batch{0, 3, 9};
    const auto [g, loss] = batch_gradients(w, ds, batch, 1, 1, 1);
    Gradients<double> sum;
    double loss_sum = 0;
    for (auto s : batch) {
        const std::vector<std::size_t> one{s};
        const auto [gs, ls] = batch_gradients(w, ds, one, 1, 1, 1);
        loss_sum += ls;
        for (const auto& [name, v] : gs) {
            auto& acc = sum[name];
            acc.resize(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i] / 3.0;
        }
    }
    EXPECT_NEAR(loss, loss_sum / 3.0, 1e-12);
    for (const auto& [name, v] : g) EXPECT_LT(helena::testing::max_abs_diff(v, sum.at(name)), 1e-12) << name;
}

TEST(BatchGradients, ThreadCountOnlyReordersSums) {
    const auto ds = generate_dataset(11, 8, tiny_options());
    const auto w = build<double>(tiny_config(), 5);
    const auto idx = iota(11);
    const auto [g1, l1] = batch_gradients(w, ds, idx, 2, 1, 1);
    const auto [g3, l3] = batch_gradients(w, ds, idx, 2, 1, 3);
    EXPECT_NEAR(l1, l3, 1e-12);
    for (const auto& [name, v] : g1) EXPECT_LT(helena::testing::max_abs_diff(v, g3.at(name)), 1e-12) << name;
    const auto [again, _] = batch_gradients(w, ds, idx, 2, 1, 3);
    EXPECT_EQ(again, g3);
}

// ---------------------------------------------------------------------------
// Fit
// ---------------------------------------------------------------------------

TEST(Fit, ZeroEpochsReturnsInitialWeights) {
    const auto ds = generate_dataset(11, 1, tiny_options());
    const auto w = build<float>(tiny_config(), 1);
    const auto r = fit(w, ds, iota(8), iota(3), quick_config(0));
    EXPECT_TRUE(r.history.empty());
    EXPECT_EQ(r.best_epoch, 0u);
    EXPECT_EQ(encode_weights(r.weights), encode_weights(w));
    EXPECT_FALSE(r.weights.at("conv1.kernel").same_storage(w.at("conv1.kernel")));
}

TEST(Fit, TinyModelOverfitsEightSamples) {
    const auto ds = noiseless_eight();
    ModelConfig c = tiny_config();
    c.dropout_rate = 0;
    TrainConfig t = quick_config(500);
    t.early_stop_patience = 500;
    const auto r = fit(build<double>(c, 1), ds, iota(8), iota(8), t);
    ASSERT_EQ(r.history.size(), 500u);
    EXPECT_LT(r.history.back().train_loss, 1e-3 * r.history.front().train_loss)
        << r.history.front().train_loss << " -> " << r.history.back().train_loss;
}

TEST(Fit, HistoryInvariants) {
    const auto ds = generate_dataset(22, 2, tiny_options());
    const auto split = split_dataset(ds, 0.5, 0.5, 0.0, 1);
    TrainConfig t = quick_config(60);
    t.lr0 = 0.05;
    t.lr_patience_epochs = 3;
    t.early_stop_patience = 8;
    t.lr_min = 0.01;
    const auto r = fit(build<float>(tiny_config(), 2), ds, split.train, split.val, t);
    ASSERT_FALSE(r.history.empty());
    double best = INFINITY;
    std::size_t best_epoch = 0;
    for (std::size_t j = 0; j < r.history.size(); ++j) {
        const auto& e = r.history[j];
        EXPECT_EQ(e.epoch, j + 1);
        EXPECT_TRUE(std::isfinite(e.train_loss));
        EXPECT_GE(e.lr, t.lr_min);
        EXPECT_LE(e.lr, t.lr0);
        if (j > 0) EXPECT_LE(e.lr, r.history[j - 1].lr);
        if (e.val_loss < best) {
            best = e.val_loss;
            best_epoch = e.epoch;
        }
    }
    EXPECT_EQ(r.best_epoch, best_epoch);
    EXPECT_EQ(r.best_val_loss, best);
    // The returned weights are the best epoch's.
    EXPECT_EQ(mean_loss(r.weights, ds, split.val), best);
    // Early stopping ends the run exactly `early_stop_patience` epochs after the best.
    if (r.history.size() < t.max_epochs) EXPECT_EQ(r.history.size(), best_epoch + t.early_stop_patience);
}

TEST(Fit, LearningRateDecaysOnPlateau) {
    const auto ds = generate_dataset(22, 3, tiny_options());
    TrainConfig t = quick_config(12);
    t.lr0 = 10.0;  // too large to keep improving
    t.lr_patience_epochs = 1;
    t.early_stop_patience = 100;
    t.lr_min = 1.0;
    std::vector<EpochRecord> seen;
    try {
        const auto r = fit(build<double>(tiny_config(), 3), ds, iota(11), iota(11), t,
                           [&](const EpochRecord& e) { seen.push_back(e); });
        EXPECT_EQ(seen, r.history);
    } catch (const TrainingError& e) {
        EXPECT_EQ(seen, e.history());
    }
    ASSERT_GE(seen.size(), 3u);
    std::set<double> rates;
    for (const auto& e : seen) rates.insert(e.lr);
    EXPECT_GT(rates.size(), 1u);
    EXPECT_GE(*rates.begin(), 1.0);
}

TEST(Fit, SameSeedSameHistory) {
    const auto ds = generate_dataset(22, 4, tiny_options());
    const auto split = split_dataset(ds, 0.6, 0.4, 0.0, 1);
    const TrainConfig t = quick_config(6);
    const auto w = build<float>(tiny_config(), 4);
    const auto a = fit(w, ds, split.train, split.val, t);
    const auto b = fit(w, ds, split.train, split.val, t);
    EXPECT_EQ(history_csv(a.history), history_csv(b.history));
    EXPECT_EQ(encode_weights(a.weights), encode_weights(b.weights));
    TrainConfig other = t;
    other.seed = 6;
    EXPECT_NE(history_csv(fit(w, ds, split.train, split.val, other).history), history_csv(a.history));
}

TEST(Fit, NonFiniteInputRaisesTrainingError) {
    auto ds = generate_dataset(22, 5, tiny_options());
    ds.inputs[ds.sample_floats() * 3 + 1] = NAN;
    TrainConfig t = quick_config(5);
    try {
        (void)fit(build<float>(tiny_config(), 5), ds, iota(11), std::vector<std::size_t>{12, 13}, t);
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        EXPECT_TRUE(e.history().empty());
    }
}

TEST(Fit, DivergenceKeepsFiniteHistory) {
    const auto ds = generate_dataset(22, 6, tiny_options());
    auto w = build<float>(tiny_config(), 6);
    TrainConfig t = quick_config(50);
    t.lr0 = 1e30;
    t.lr_min = 1e29;
    try {
        (void)fit(w, ds, iota(11), std::vector<std::size_t>{12, 13}, t);
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        for (const auto& rec : e.history()) {
            EXPECT_TRUE(std::isfinite(rec.train_loss));
            EXPECT_TRUE(std::isfinite(rec.val_loss));
        }
    }
}

TEST(Fit, EmptySplitsAreConfigErrors) {
    const auto ds = generate_dataset(11, 1, tiny_options());
    const auto w = build<float>(tiny_config(), 1);
    EXPECT_THROW((void)fit(w, ds, {}, iota(2), quick_config(1)), ConfigError);
    EXPECT_THROW((void)fit(w, ds, iota(2), {}, quick_config(1)), ConfigError);
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

TEST(HistoryCsv, Format) {
    const std::vector<EpochRecord> h{{1, 0.5, 0.25, 0.01}, {2, 0.125, 1.0 / 3.0, 0.008}};
    EXPECT_EQ(history_csv(h), "epoch,train_loss,val_loss,lr\n1,0.5,0.25,0.01\n2,0.125,0.333333333,0.008\n");
    EXPECT_EQ(history_csv({}), "epoch,train_loss,val_loss,lr\n");
}

TEST(Checkpoint, WritesWeightsAndMeta) {
    const auto dir = std::filesystem::temp_directory_path() / "helena_train_tests";
    std::filesystem::create_directories(dir);
    FitResult<float> r{build<float>(tiny_config(), 1), {{1, 0.5, 0.4, 0.01}, {2, 0.3, 0.2, 0.008}}, 2, 0.2};
    const auto path = dir / "ckpt.helw";
    save_checkpoint(path, r);
    EXPECT_EQ(encode_weights(load_weights<float>(path, tiny_config())), encode_weights(r.weights));
    std::ifstream meta(dir / "ckpt.helw.meta");
    std::string text((std::istreambuf_iterator<char>(meta)), std::istreambuf_iterator<char>());
    EXPECT_EQ(text, "epoch=2\nval_loss=0.2\nlr=0.008\n");
}
