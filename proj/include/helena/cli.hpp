#pragma once

// Command-line front end: generate | train | eval | bench.
//
// Settings come from a flat key=value file (--config) and are overridden by
// flags. Every command validates the merged settings before doing any work,
// writes its outputs atomically and leaves a `<output>.run-manifest` next to
// them with the resolved settings.

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "helena/dataset.hpp"
#include "helena/eval.hpp"
#include "helena/model.hpp"
#include "helena/train.hpp"
#include "helena/weights_io.hpp"

namespace helena::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kIoError = 3, kDivergence = 4, kArtifactMismatch = 5 };

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    PilotPattern pattern;
    std::size_t samples = 2200;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::string dataset;
    std::string checkpoint;
    std::string methods = "helena,ls";
    std::size_t runs = 100;
    std::size_t warmup = 10;
};

namespace detail {

inline std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
    N v{};
    const char* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end) throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("config key '" + key + "': expected true or false, got '" + text + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number<std::size_t>(key, trim(item)));
    if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
    return out;
}

inline std::string join(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

inline KernelSize parse_kernel(const std::string& key, const std::string& text) {
    const auto x = text.find('x');
    if (x == std::string::npos) throw ConfigError("config key '" + key + "': expected FxT, got '" + text + "'");
    return {parse_number<std::size_t>(key, text.substr(0, x)), parse_number<std::size_t>(key, text.substr(x + 1))};
}

struct Field {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename N, typename Ref>
Field number_field(const std::string& key, Ref ref) {
    return {[key, ref](RunConfig& c, const std::string& v) { ref(c) = parse_number<N>(key, v); },
            [ref](const RunConfig& c) {
                if constexpr (std::is_floating_point_v<N>) {
                    return format_double(ref(c));
                } else {
                    return std::to_string(ref(c));
                }
            }};
}

template <typename Ref>
Field string_field(Ref ref) {
    return {[ref](RunConfig& c, const std::string& v) { ref(c) = v; },
            [ref](const RunConfig& c) { return ref(c); }};
}

/// The recognised keys, in manifest order.
inline const std::vector<std::pair<std::string, Field>>& fields() {
    using S = std::size_t;
    static const std::vector<std::pair<std::string, Field>> table{
        {"seed", number_field<std::uint64_t>("seed", [](auto& c) -> auto& { return c.seed; })},
        {"threads", number_field<S>("threads", [](auto& c) -> auto& { return c.threads; })},
        {"samples", number_field<S>("samples", [](auto& c) -> auto& { return c.samples; })},
        {"dataset", string_field([](auto& c) -> auto& { return c.dataset; })},
        {"checkpoint", string_field([](auto& c) -> auto& { return c.checkpoint; })},
        {"methods", string_field([](auto& c) -> auto& { return c.methods; })},
        {"runs", number_field<S>("runs", [](auto& c) -> auto& { return c.runs; })},
        {"warmup", number_field<S>("warmup", [](auto& c) -> auto& { return c.warmup; })},
        {"pilot_symbols",
         {[](RunConfig& c, const std::string& v) { c.pattern.symbols = parse_list("pilot_symbols", v); },
          [](const RunConfig& c) { return join(c.pattern.symbols); }}},
        {"pilot_period", number_field<S>("pilot_period", [](auto& c) -> auto& { return c.pattern.period; })},
        {"pilot_offsets",
         {[](RunConfig& c, const std::string& v) { c.pattern.offsets = parse_list("pilot_offsets", v); },
          [](const RunConfig& c) { return join(c.pattern.offsets); }}},
        {"subcarriers", number_field<S>("subcarriers", [](auto& c) -> auto& { return c.model.subcarriers; })},
        {"symbols", number_field<S>("symbols", [](auto& c) -> auto& { return c.model.symbols; })},
        {"kernel1",
         {[](RunConfig& c, const std::string& v) { c.model.kernel1 = parse_kernel("kernel1", v); },
          [](const RunConfig& c) {
              return std::to_string(c.model.kernel1.freq) + "x" + std::to_string(c.model.kernel1.time);
          }}},
        {"kernel2",
         {[](RunConfig& c, const std::string& v) { c.model.kernel2 = parse_kernel("kernel2", v); },
          [](const RunConfig& c) {
              return std::to_string(c.model.kernel2.freq) + "x" + std::to_string(c.model.kernel2.time);
          }}},
        {"conv1_filters", number_field<S>("conv1_filters", [](auto& c) -> auto& { return c.model.conv1_filters; })},
        {"conv2_filters", number_field<S>("conv2_filters", [](auto& c) -> auto& { return c.model.conv2_filters; })},
        {"patch", number_field<S>("patch", [](auto& c) -> auto& { return c.model.patch; })},
        {"embed_dim", number_field<S>("embed_dim", [](auto& c) -> auto& { return c.model.embed_dim; })},
        {"heads", number_field<S>("heads", [](auto& c) -> auto& { return c.model.heads; })},
        {"se_reduction", number_field<S>("se_reduction", [](auto& c) -> auto& { return c.model.se_reduction; })},
        {"dropout_rate", number_field<double>("dropout_rate", [](auto& c) -> auto& { return c.model.dropout_rate; })},
        {"use_se",
         {[](RunConfig& c, const std::string& v) { c.model.use_se = parse_bool("use_se", v); },
          [](const RunConfig& c) { return std::string(c.model.use_se ? "true" : "false"); }}},
        {"batch_size", number_field<S>("batch_size", [](auto& c) -> auto& { return c.train.batch_size; })},
        {"lr0", number_field<double>("lr0", [](auto& c) -> auto& { return c.train.lr0; })},
        {"lr_factor", number_field<double>("lr_factor", [](auto& c) -> auto& { return c.train.lr_factor; })},
        {"lr_patience_epochs",
         number_field<S>("lr_patience_epochs", [](auto& c) -> auto& { return c.train.lr_patience_epochs; })},
        {"lr_min", number_field<double>("lr_min", [](auto& c) -> auto& { return c.train.lr_min; })},
        {"early_stop_patience",
         number_field<S>("early_stop_patience", [](auto& c) -> auto& { return c.train.early_stop_patience; })},
        {"max_epochs", number_field<S>("max_epochs", [](auto& c) -> auto& { return c.train.max_epochs; })},
        {"train_ratio", number_field<double>("train_ratio", [](auto& c) -> auto& { return c.train.train_ratio; })},
        {"val_ratio", number_field<double>("val_ratio", [](auto& c) -> auto& { return c.train.val_ratio; })},
        {"test_ratio", number_field<double>("test_ratio", [](auto& c) -> auto& { return c.train.test_ratio; })},
    };
    return table;
}

}  // namespace detail

inline void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& [name, field] : detail::fields()) {
        if (name == key) {
            field.set(cfg, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

/// Applies `key = value` lines; blank lines and `#` comments are skipped.
inline void apply_config_text(RunConfig& cfg, const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
        }
        set_key(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
}

inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    apply_config_text(cfg, ss.str());
}

/// Resolved settings as key=value lines, in a fixed order.
inline std::string to_config_text(const RunConfig& cfg) {
    std::string out;
    for (const auto& [name, field] : detail::fields()) out += name + "=" + field.get(cfg) + "\n";
    return out;
}

inline void validate(const RunConfig& cfg) {
    cfg.model.validate();
    cfg.train.validate();
    cfg.pattern.validate(cfg.model.subcarriers, cfg.model.symbols);
    if (cfg.threads == 0) throw ConfigError("threads must be positive");
    if (cfg.runs == 0) throw ConfigError("runs must be positive");
}

namespace detail {

inline void write_manifest(const std::filesystem::path& output, const std::string& command, const RunConfig& cfg) {
    std::filesystem::path path = output;
    path += ".run-manifest";
    std::string text = "command=" + command + "\n" + to_config_text(cfg);
    text += "model_init_seed=" + std::to_string(derive_seed(cfg.seed, 101)) + "\n";
    io::write_text_atomic(path, text);
}

inline std::string require_path(const std::string& value, const char* field) {
    if (value.empty()) throw ConfigError(std::string(field) + " path is required");
    return value;
}

inline Dataset load_dataset_checked(const RunConfig& cfg) {
    Dataset ds = load_dataset(require_path(cfg.dataset, "dataset"));
    if (ds.subcarriers != cfg.model.subcarriers || ds.symbols != cfg.model.symbols) {
        throw FormatError("dataset grid " + std::to_string(ds.subcarriers) + "x" + std::to_string(ds.symbols) +
                          " does not match the configured " + std::to_string(cfg.model.subcarriers) + "x" +
                          std::to_string(cfg.model.symbols));
    }
    return ds;
}

inline std::string model_method_name(const ModelConfig& m) { return m.use_se ? "helena" : "helena_mhsa"; }

}  // namespace detail

inline int cmd_generate(const RunConfig& cfg, const std::string& out, std::ostream& log) {
    if (cfg.samples == 0) throw ConfigError("samples must be positive");
    if (cfg.samples % kSnrBuckets != 0) {
        throw ConfigError("samples (" + std::to_string(cfg.samples) + ") must be a multiple of 11");
    }
    const std::string path = detail::require_path(out, "out");
    DatasetOptions opt;
    opt.grid.subcarriers = cfg.model.subcarriers;
    opt.grid.symbols = cfg.model.symbols;
    opt.pattern = cfg.pattern;
    opt.threads = cfg.threads;
    const Dataset ds = generate_dataset(cfg.samples, cfg.seed, opt);
    const auto bytes = encode_dataset(ds);
    io::write_file_atomic(path, bytes);
    detail::write_manifest(path, "generate", cfg);
    log << "dataset: " << path << "\n"
        << "samples: " << ds.size() << "\n"
        << "bytes: " << bytes.size() << "\n";
    return kOk;
}

inline int cmd_train(const RunConfig& cfg, const std::string& out, std::ostream& log) {
    const std::string path = detail::require_path(out, "out");
    const Dataset ds = detail::load_dataset_checked(cfg);
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    tc.threads = cfg.threads;
    const Split split = split_dataset(ds, tc);
    log << "split: train " << split.train.size() << ", val " << split.val.size() << ", test " << split.test.size()
        << "\n";
    const auto init = build<float>(cfg.model, derive_seed(cfg.seed, 101));
    const auto result = fit(init, ds, split.train, split.val, tc, [&](const EpochRecord& r) {
        log << "epoch " << r.epoch << " train_loss " << format_double(r.train_loss) << " val_loss "
            << format_double(r.val_loss) << " lr " << format_double(r.lr) << "\n";
        log.flush();
    });
    save_checkpoint(path, result);
    std::filesystem::path history = path;
    history += ".history.csv";
    io::write_text_atomic(history, history_csv(result.history));
    detail::write_manifest(path, "train", cfg);
    log << "checkpoint: " << path << " (epoch " << result.best_epoch << ", val_loss "
        << format_double(result.best_val_loss) << ")\n"
        << "history: " << history.string() << "\n";
    return kOk;
}

inline int cmd_eval(const RunConfig& cfg, const std::string& out, std::ostream& log) {
    const std::string path = detail::require_path(out, "out");
    std::vector<std::string> methods;
    {
        std::stringstream ss(cfg.methods);
        std::string m;
        while (std::getline(ss, m, ',')) {
            m = detail::trim(m);
            if (m != "helena" && m != "ls" && m != "ls_raw") {
                throw ConfigError("methods: unknown method '" + m + "' (expected helena, ls, ls_raw)");
            }
            methods.push_back(m);
        }
        if (methods.empty()) throw ConfigError("methods: empty");
    }
    std::optional<ModelWeights<float>> weights;
    if (std::find(methods.begin(), methods.end(), "helena") != methods.end()) {
        weights = load_weights<float>(detail::require_path(cfg.checkpoint, "checkpoint"), cfg.model);
    }
    const Dataset ds = detail::load_dataset_checked(cfg);
    const Split split = split_dataset(ds, cfg.train.train_ratio, cfg.train.val_ratio, cfg.train.test_ratio, cfg.seed);
    std::vector<EvalReport> reports;
    for (const auto& m : methods) {
        if (m == "helena") {
            auto r = evaluate(detail::model_method_name(cfg.model), model_estimator(*weights), ds, split.test,
                              cfg.threads);
            r.param_count = count_params(*weights);
            r.flop_count = count_flops(cfg.model);
            reports.push_back(std::move(r));
        } else if (m == "ls") {
            reports.push_back(evaluate("ls_li", ls_li_estimator(cfg.pattern), ds, split.test, cfg.threads));
        } else {
            reports.push_back(evaluate("ls_raw", ls_estimator(), ds, split.test, cfg.threads));
        }
    }
    std::filesystem::path json_path = path;
    json_path.replace_extension(".json");
    io::write_text_atomic(path, reports_csv(reports));
    io::write_text_atomic(json_path, reports_json(reports));
    detail::write_manifest(path, "eval", cfg);
    for (const auto& r : reports) {
        log << r.method << ": " << format_double(r.overall.nmse_db) << " dB over " << r.overall.sample_count
            << " test samples\n";
    }
    log << "report: " << path << ", " << json_path.string() << "\n";
    return kOk;
}

/// Single-sample input for latency runs: one synthetic 10 dB pilot grid.
inline Tensor<float> bench_sample(const RunConfig& cfg) {
    std::vector<std::size_t> per(kSnrBuckets, 0);
    per[5] = 1;
    DatasetOptions opt;
    opt.grid.subcarriers = cfg.model.subcarriers;
    opt.grid.symbols = cfg.model.symbols;
    opt.pattern = cfg.pattern;
    return generate_dataset(per, cfg.seed, opt).input_tensor<float>(0);
}

inline int cmd_bench(const RunConfig& cfg, bool fresh, const std::string& out, std::ostream& log) {
    const std::string path = detail::require_path(out, "out");
    ModelWeights<float> w = fresh ? build<float>(cfg.model, derive_seed(cfg.seed, 101))
                                  : load_weights<float>(detail::require_path(cfg.checkpoint, "checkpoint"), cfg.model);
    const std::size_t params = count_params(w);
    const std::uint64_t flops = count_flops(cfg.model);
    const LatencyStats lat = benchmark_inference(w, bench_sample(cfg), cfg.runs, cfg.warmup);
    nlohmann::ordered_json j;
    j["model"] = detail::model_method_name(cfg.model);
    j["param_count"] = params;
    j["flop_count"] = flops;
    j["warmup_runs"] = cfg.warmup;
    j["latency"] = latency_json(lat);
    io::write_text_atomic(path, j.dump(2) + "\n");
    detail::write_manifest(path, "bench", cfg);
    log << "params: " << params << "\n"
        << "flops: " << flops << "\n"
        << "latency_ms: mean " << format_double(lat.mean_ms) << ", std " << format_double(lat.std_ms) << ", min "
        << format_double(lat.min_ms) << ", max " << format_double(lat.max_ms) << " over " << lat.runs << " runs\n"
        << "report: " << path << "\n";
    return kOk;
}

/// Parses `args` (without the program name), runs the command and returns its exit code.
inline int run(const std::vector<std::string>& args, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"HELENA OFDM channel estimator"};
    app.require_subcommand(1);
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads, samples, runs, epochs;
    std::optional<std::string> dataset, checkpoint, methods;
    std::vector<std::string> overrides;
    std::string out;
    bool no_se = false;
    bool fresh = false;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "key=value settings file");
        sub->add_option("--seed", seed, "master seed");
        sub->add_option("--threads", threads, "worker threads (default 1)");
        sub->add_option("--out", out, "output path");
        sub->add_option("--set", overrides, "extra key=value setting (repeatable)");
        sub->add_flag("--no-se", no_se, "drop the SE block (HELENA-MHSA)");
    };
    auto* gen = app.add_subcommand("generate", "synthesize a dataset file");
    common(gen);
    gen->add_option("--samples", samples, "sample count, a multiple of 11");
    auto* train = app.add_subcommand("train", "train on a dataset and write the best checkpoint");
    common(train);
    train->add_option("--dataset", dataset, "dataset file");
    train->add_option("--epochs", epochs, "maximum epochs");
    auto* ev = app.add_subcommand("eval", "NMSE per SNR on the test split");
    common(ev);
    ev->add_option("--dataset", dataset, "dataset file");
    ev->add_option("--checkpoint", checkpoint, "weight file");
    ev->add_option("--method", methods, "comma list of helena, ls, ls_raw");
    auto* bench = app.add_subcommand("bench", "parameter/FLOP counts and inference latency");
    common(bench);
    bench->add_option("--checkpoint", checkpoint, "weight file");
    bench->add_option("--runs", runs, "timed runs (default 100)");
    bench->add_flag("--fresh", fresh, "benchmark freshly initialized weights instead of a checkpoint");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(std::move(reversed));
    } catch (const CLI::CallForHelp& e) {
        log << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kConfigError;
    }

    try {
        RunConfig cfg;
        if (!config_path.empty()) apply_config_file(cfg, config_path);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
            set_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (seed) cfg.seed = *seed;
        if (threads) cfg.threads = *threads;
        if (samples) cfg.samples = *samples;
        if (runs) cfg.runs = *runs;
        if (epochs) cfg.train.max_epochs = *epochs;
        if (dataset) cfg.dataset = *dataset;
        if (checkpoint) cfg.checkpoint = *checkpoint;
        if (methods) cfg.methods = *methods;
        if (no_se) cfg.model.use_se = false;
        validate(cfg);

        if (gen->parsed()) return cmd_generate(cfg, out, log);
        if (train->parsed()) return cmd_train(cfg, out, log);
        if (ev->parsed()) return cmd_eval(cfg, out, log);
        return cmd_bench(cfg, fresh, out, log);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const DimensionError& e) {
        err << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const IoError& e) {
        err << "i/o error: " << e.what() << "\n";
        return kIoError;
    } catch (const TrainingError& e) {
        err << "training diverged: " << e.what() << "\n";
        return kDivergence;
    } catch (const FormatError& e) {
        err << "artifact mismatch: " << e.what() << "\n";
        return kArtifactMismatch;
    } catch (const ConsistencyError& e) {
        err << "artifact mismatch: " << e.what() << "\n";
        return kArtifactMismatch;
    }
}

}  // namespace helena::cli
