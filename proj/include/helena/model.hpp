#pragma once

// The HELENA estimator: shallow CNN -> frequency patches -> token embedding ->
// multi-head self-attention -> squeeze-and-excitation -> patch reconstruction,
// wrapped in a global residual around the sparse pilot estimate.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "helena/errors.hpp"
#include "helena/layers.hpp"
#include "helena/ops.hpp"
#include "helena/rng.hpp"
#include "helena/tensor.hpp"

namespace helena {

struct KernelSize {
    std::size_t freq = 1;
    std::size_t time = 1;
    bool operator==(const KernelSize&) const = default;
};

struct ModelConfig {
    std::size_t subcarriers = 612;  // N_S
    std::size_t symbols = 14;       // N_D
    KernelSize kernel1{12, 2};
    KernelSize kernel2{6, 7};
    std::size_t conv1_filters = 8;  // C1
    std::size_t conv2_filters = 8;  // C
    std::size_t patch = 12;         // p, along frequency
    std::size_t embed_dim = 64;     // d
    std::size_t heads = 4;          // h
    std::size_t se_reduction = 4;   // r
    double dropout_rate = 0.1;
    bool use_se = true;

    static constexpr std::size_t planes = 2;  // real, imaginary

    bool operator==(const ModelConfig&) const = default;

    std::size_t tokens() const { return subcarriers / patch; }
    std::size_t head_dim() const { return embed_dim / heads; }
    std::size_t patch_features(std::size_t channels) const { return patch * symbols * channels; }

    /// Throws ConfigError naming the first offending field.
    void validate() const {
        auto positive = [](std::size_t v, const char* field) {
            if (v == 0) throw ConfigError(std::string("model config: ") + field + " must be positive");
        };
        positive(subcarriers, "subcarriers");
        positive(symbols, "symbols");
        positive(kernel1.freq, "kernel1.freq");
        positive(kernel1.time, "kernel1.time");
        positive(kernel2.freq, "kernel2.freq");
        positive(kernel2.time, "kernel2.time");
        positive(conv1_filters, "conv1_filters");
        positive(conv2_filters, "conv2_filters");
        positive(patch, "patch");
        positive(embed_dim, "embed_dim");
        positive(heads, "heads");
        positive(se_reduction, "se_reduction");
        if (subcarriers % patch != 0) {
            throw ConfigError("model config: patch (" + std::to_string(patch) + ") must divide subcarriers (" +
                              std::to_string(subcarriers) + ")");
        }
        if (embed_dim % heads != 0) {
            throw ConfigError("model config: heads (" + std::to_string(heads) + ") must divide embed_dim (" +
                              std::to_string(embed_dim) + ")");
        }
        if (embed_dim % se_reduction != 0) {
            throw ConfigError("model config: se_reduction (" + std::to_string(se_reduction) +
                              ") must divide embed_dim (" + std::to_string(embed_dim) + ")");
        }
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
            throw ConfigError("model config: dropout_rate must lie in [0, 1)");
        }
    }
};

/// Named parameter tensors; the name set and every shape are fixed by the config.
template <typename T>
struct ModelWeights {
    ModelConfig config;
    std::map<std::string, Tensor<T>> tensors;

    const Tensor<T>& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ConsistencyError("missing weight '" + name + "'");
        return it->second;
    }
    Tensor<T>& at(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ConsistencyError("missing weight '" + name + "'");
        return it->second;
    }

    void set_requires_grad(bool on) {
        for (auto& [_, t] : tensors) t.set_requires_grad(on);
    }
    void zero_grad() {
        for (auto& [_, t] : tensors) t.zero_grad();
    }

    ModelWeights clone() const {
        ModelWeights out{config, {}};
        for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.clone());
        return out;
    }

    template <typename U>
    ModelWeights<U> cast() const {
        ModelWeights<U> out{config, {}};
        for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.template cast<U>());
        return out;
    }
};

inline std::string head_param(std::size_t head, const char* which) {
    return "mhsa.head" + std::to_string(head) + "." + which;
}

/// Parameter name -> shape table for a config, in the canonical (sorted) order.
inline std::map<std::string, Shape> parameter_shapes(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.embed_dim;
    const std::size_t dk = cfg.head_dim();
    std::map<std::string, Shape> shapes{
        {"conv1.kernel", {cfg.kernel1.freq, cfg.kernel1.time, ModelConfig::planes, cfg.conv1_filters}},
        {"conv1.bias", {cfg.conv1_filters}},
        {"conv2.kernel", {cfg.kernel2.freq, cfg.kernel2.time, cfg.conv1_filters, cfg.conv2_filters}},
        {"conv2.bias", {cfg.conv2_filters}},
        {"embed.weight", {cfg.patch_features(cfg.conv2_filters), d}},
        {"embed.bias", {d}},
        {"mhsa.out.weight", {cfg.heads * dk, d}},
        {"mhsa.out.bias", {d}},
        {"mhsa.ln.gamma", {d}},
        {"mhsa.ln.beta", {d}},
        {"recon.weight", {d, cfg.patch_features(ModelConfig::planes)}},
        {"recon.bias", {cfg.patch_features(ModelConfig::planes)}},
    };
    for (std::size_t j = 0; j < cfg.heads; ++j) {
        shapes[head_param(j, "wq")] = {d, dk};
        shapes[head_param(j, "wk")] = {d, dk};
        shapes[head_param(j, "wv")] = {d, dk};
    }
    if (cfg.use_se) {
        shapes["se.w1"] = {d, d / cfg.se_reduction};
        shapes["se.b1"] = {d / cfg.se_reduction};
        shapes["se.w2"] = {d / cfg.se_reduction, d};
        shapes["se.b2"] = {d};
    }
    return shapes;
}

/// Glorot-uniform weights, zero biases, unit layernorm gain; a pure function of (cfg, seed).
template <typename T>
ModelWeights<T> build(const ModelConfig& cfg, std::uint64_t seed) {
    ModelWeights<T> w{cfg, {}};
    Rng rng(seed);
    for (const auto& [name, shape] : parameter_shapes(cfg)) {
        Tensor<T> t(shape);
        if (name == "mhsa.ln.gamma") {
            for (auto& v : t.data()) v = T(1);
        } else if (shape.size() >= 2) {
            // Convolution fans include the receptive field.
            std::size_t receptive = 1;
            for (std::size_t i = 0; i + 2 < shape.size(); ++i) receptive *= shape[i];
            const double fan_in = static_cast<double>(receptive * shape[shape.size() - 2]);
            const double fan_out = static_cast<double>(receptive * shape.back());
            const double bound = std::sqrt(6.0 / (fan_in + fan_out));
            for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
        }
        w.tensors.emplace(name, std::move(t));
    }
    return w;
}

/// Every tensor filled with zeros (layernorm gain included).
template <typename T>
ModelWeights<T> build_zero(const ModelConfig& cfg) {
    ModelWeights<T> w{cfg, {}};
    for (const auto& [name, shape] : parameter_shapes(cfg)) w.tensors.emplace(name, Tensor<T>(shape));
    return w;
}

template <typename T>
std::size_t count_params(const ModelWeights<T>& w) {
    std::size_t total = 0;
    for (const auto& [_, t] : w.tensors) total += t.size();
    return total;
}

/// Splits F [N_S×N_D×C] into N = N_S/p frequency patches, each flattened in
/// (frequency row, symbol, channel) order: [N × p·N_D·C].
template <typename T>
Tensor<T> patchify(const Tensor<T>& features, std::size_t patch) {
    if (features.rank() != 3) throw DimensionError("patchify: expected [N_S×N_D×C], got " + shape_str(features.shape()));
    if (patch == 0 || features.dim(0) % patch != 0) {
        throw ConfigError("patchify: patch " + std::to_string(patch) + " does not divide " +
                          std::to_string(features.dim(0)) + " subcarriers");
    }
    // Row-major HWC already stores each patch contiguously in the flattening order.
    const std::size_t tokens = features.dim(0) / patch;
    return reshape(features, {tokens, patch * features.dim(1) * features.dim(2)});
}

/// Inverse of patchify for a two-plane grid: [N × p·N_D·2] -> [N_S×N_D×2].
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, const ModelConfig& cfg) {
    const Shape expected{cfg.tokens(), cfg.patch_features(ModelConfig::planes)};
    if (patches.shape() != expected) {
        throw DimensionError("unpatchify: expected " + shape_str(expected) + ", got " + shape_str(patches.shape()));
    }
    return reshape(patches, {cfg.subcarriers, cfg.symbols, ModelConfig::planes});
}

template <typename T>
MhsaParams<T> mhsa_params(const ModelWeights<T>& w) {
    MhsaParams<T> p;
    for (std::size_t j = 0; j < w.config.heads; ++j) {
        p.heads.push_back({w.at(head_param(j, "wq")), w.at(head_param(j, "wk")), w.at(head_param(j, "wv"))});
    }
    p.output = {w.at("mhsa.out.weight"), w.at("mhsa.out.bias")};
    p.gamma = w.at("mhsa.ln.gamma");
    p.beta = w.at("mhsa.ln.beta");
    return p;
}

template <typename T>
SeParams<T> se_params(const ModelWeights<T>& w) {
    return {{w.at("se.w1"), w.at("se.b1")}, {w.at("se.w2"), w.at("se.b2")}, w.config.se_reduction};
}

using StageTrace = std::vector<std::pair<std::string, Shape>>;

/// Ĥ = H_LR + HELENA(H_LR) for one grid [N_S×N_D×2].
///
/// Dropout is active only when `training` is set. When `trace` is given, the
/// output shape of every stage is appended to it.
template <typename T>
Tensor<T> forward(const ModelWeights<T>& w, const Tensor<T>& h_lr, bool training, Rng& rng,
                  StageTrace* trace = nullptr) {
    const ModelConfig& cfg = w.config;
    const Shape expected{cfg.subcarriers, cfg.symbols, ModelConfig::planes};
    if (h_lr.shape() != expected) {
        throw DimensionError("forward: input " + shape_str(h_lr.shape()) + " does not match configured grid " +
                             shape_str(expected));
    }
    auto note = [trace](const char* stage, const Tensor<T>& t) {
        if (trace) trace->emplace_back(stage, t.shape());
    };
    note("input", h_lr);
    const Tensor<T> f1 = relu(conv2d_same(h_lr, w.at("conv1.kernel"), w.at("conv1.bias")));
    note("conv1", f1);
    const Tensor<T> f2 = relu(conv2d_same(f1, w.at("conv2.kernel"), w.at("conv2.bias")));
    note("conv2", f2);
    const Tensor<T> dropped = dropout(f2, cfg.dropout_rate, training, rng);
    const Tensor<T> patches = patchify(dropped, cfg.patch);
    note("patchify", patches);
    const Tensor<T> tokens = dense(patches, DenseParams<T>{w.at("embed.weight"), w.at("embed.bias")});
    note("embed", tokens);
    Tensor<T> attended = mhsa(tokens, mhsa_params(w));
    note("mhsa", attended);
    if (cfg.use_se) {
        attended = se_block(attended, se_params(w));
        note("se", attended);
    }
    const Tensor<T> rebuilt = dense(attended, DenseParams<T>{w.at("recon.weight"), w.at("recon.bias")});
    note("recon", rebuilt);
    const Tensor<T> correction = unpatchify(rebuilt, cfg);
    note("reshape", correction);
    Tensor<T> out = add(h_lr, correction);
    note("output", out);
    return out;
}

// ---------------------------------------------------------------------------
// Analytic FLOP count
//
// One multiply-accumulate counts as 2 FLOPs. Convolutions count only their
// MACs; dense layers add one FLOP per bias add. Activations, softmax, score
// scaling, residual adds, layernorm, pooling and gating count 1 per element.
// Dropout is the identity at inference and counts 0.
// ---------------------------------------------------------------------------

struct FlopTerm {
    std::string stage;
    std::uint64_t flops;
};

constexpr std::uint64_t conv_flops(std::uint64_t height, std::uint64_t width, std::uint64_t kh, std::uint64_t kw,
                                   std::uint64_t cin, std::uint64_t cout) {
    return height * width * kh * kw * cin * cout * 2;
}

constexpr std::uint64_t dense_flops(std::uint64_t rows, std::uint64_t in, std::uint64_t out) {
    return rows * in * out * 2 + rows * out;
}

inline std::vector<FlopTerm> flop_breakdown(const ModelConfig& cfg) {
    cfg.validate();
    const std::uint64_t H = cfg.subcarriers, W = cfg.symbols;
    const std::uint64_t n = cfg.tokens(), d = cfg.embed_dim, h = cfg.heads, dk = cfg.head_dim();
    const std::uint64_t c1 = cfg.conv1_filters, c = cfg.conv2_filters;
    std::vector<FlopTerm> terms{
        {"conv1", conv_flops(H, W, cfg.kernel1.freq, cfg.kernel1.time, ModelConfig::planes, c1)},
        {"relu1", H * W * c1},
        {"conv2", conv_flops(H, W, cfg.kernel2.freq, cfg.kernel2.time, c1, c)},
        {"relu2", H * W * c},
        {"embed", dense_flops(n, cfg.patch_features(c), d)},
        {"qkv", h * 3 * n * d * dk * 2},
        {"scores", h * (n * n * dk * 2 + n * n)},
        {"softmax", h * n * n},
        {"attend", h * n * n * dk * 2},
        {"mhsa_out", dense_flops(n, h * dk, d)},
        {"residual_norm", n * d * 2},
    };
    if (cfg.use_se) {
        const std::uint64_t b = d / cfg.se_reduction;
        terms.push_back({"se", n * d + dense_flops(1, d, b) + b + dense_flops(1, b, d) + d + n * d});
    }
    terms.push_back({"recon", dense_flops(n, d, cfg.patch_features(ModelConfig::planes))});
    terms.push_back({"global_residual", H * W * ModelConfig::planes});
    return terms;
}

inline std::uint64_t count_flops(const ModelConfig& cfg) {
    std::uint64_t total = 0;
    for (const auto& term : flop_breakdown(cfg)) total += term.flops;
    return total;
}

}  // namespace helena
