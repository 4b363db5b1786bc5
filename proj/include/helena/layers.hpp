#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "helena/errors.hpp"
#include "helena/ops.hpp"
#include "helena/rng.hpp"
#include "helena/tensor.hpp"

namespace helena {

template <typename T>
struct DenseParams {
    Tensor<T> weight;  // [in×out]
    Tensor<T> bias;    // [out]
};

template <typename T>
struct AttentionHead {
    Tensor<T> wq, wk, wv;  // [d×d_k] each, no bias
};

template <typename T>
struct MhsaParams {
    std::vector<AttentionHead<T>> heads;
    DenseParams<T> output;  // W^O [h·d_k × d] plus bias
    Tensor<T> gamma, beta;  // layernorm, [d]
};

template <typename T>
struct SeParams {
    DenseParams<T> squeeze;  // [d × d/r]
    DenseParams<T> expand;   // [d/r × d]
    std::size_t reduction = 1;
};

/// Affine map along the last axis: x W + b.
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const DenseParams<T>& p) {
    if (p.weight.rank() != 2 || p.bias.rank() != 1 || p.bias.dim(0) != p.weight.dim(1)) {
        throw DimensionError("dense: weight " + shape_str(p.weight.shape()) + " and bias " +
                             shape_str(p.bias.shape()) + " are inconsistent");
    }
    const std::size_t in = p.weight.dim(0);
    if (x.rank() == 0 || x.shape().back() != in) {
        throw DimensionError("dense: input " + shape_str(x.shape()) + " does not end in " + std::to_string(in));
    }
    if (x.rank() == 2) return add(matmul(x, p.weight), p.bias);

    Shape out_shape = x.shape();
    out_shape.back() = p.weight.dim(1);
    const Tensor<T> rows = reshape(x, {x.size() / in, in});
    return reshape(add(matmul(rows, p.weight), p.bias), std::move(out_shape));
}

/// Row-wise layer normalization of x [N×d]: (x - mean) / sqrt(var + eps) * gamma + beta.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    if (x.rank() != 2 || x.dim(1) < 2) {
        throw DimensionError("layernorm: expected [N×d] with d >= 2, got " + shape_str(x.shape()));
    }
    const std::size_t rows = x.dim(0), d = x.dim(1);
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw DimensionError("layernorm: gain/offset must be [" + std::to_string(d) + "]");
    }
    Tensor<T> out(x.shape());
    std::vector<T> xhat(x.size());
    std::vector<T> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.ptr() + r * d;
        T mean = 0;
        for (std::size_t c = 0; c < d; ++c) mean += xr[c];
        mean /= static_cast<T>(d);
        T var = 0;
        for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= static_cast<T>(d);
        inv_std[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) {
            xhat[r * d + c] = (xr[c] - mean) * inv_std[r];
            out[r * d + c] = xhat[r * d + c] * gamma[c] + beta[c];
        }
    }
    if (auto* tape = detail::tape_for(out, x, gamma, beta)) {
        tape->record([x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                      d]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            if (gamma.requires_grad()) {
                auto gg = gamma.grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < d; ++c) gg[c] += go[r * d + c] * xhat[r * d + c];
            }
            if (beta.requires_grad()) {
                auto gb = beta.grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < d; ++c) gb[c] += go[r * d + c];
            }
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    T mean_g = 0, mean_gx = 0;
                    for (std::size_t c = 0; c < d; ++c) {
                        const T g = go[r * d + c] * gamma[c];
                        mean_g += g;
                        mean_gx += g * xhat[r * d + c];
                    }
                    mean_g /= static_cast<T>(d);
                    mean_gx /= static_cast<T>(d);
                    for (std::size_t c = 0; c < d; ++c) {
                        const T g = go[r * d + c] * gamma[c];
                        gx[r * d + c] += inv_std[r] * (g - mean_g - xhat[r * d + c] * mean_gx);
                    }
                }
            }
        });
    }
    return out;
}

/// Inverted dropout. With training off (or rate 0) the input handle is returned unchanged.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ConfigError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    }
    if (!training || rate == 0.0) return x;
    const T keep_scale = T(1) / static_cast<T>(1.0 - rate);
    std::vector<T> mask(x.size());
    for (auto& m : mask) m = rng.uniform() < rate ? T(0) : keep_scale;
    return mask_mul(x, std::move(mask));
}

/// Multi-head self-attention with post-norm residual:
/// LayerNorm(Z + Concat(head_1..head_h) W^O + b^O), head_j = softmax(Q_j K_jᵀ / √d_k) V_j.
template <typename T>
Tensor<T> mhsa(const Tensor<T>& z, const MhsaParams<T>& p) {
    if (z.rank() != 2) throw DimensionError("mhsa: expected tokens [N×d], got " + shape_str(z.shape()));
    const std::size_t d = z.dim(1);
    const std::size_t h = p.heads.size();
    if (h == 0) throw ConfigError("mhsa: heads must be positive");
    const std::size_t dk = p.heads.front().wq.dim(1);
    if (dk * h != d) {
        throw ConfigError("mhsa: heads*d_k = " + std::to_string(h) + "*" + std::to_string(dk) +
                          " does not equal d = " + std::to_string(d));
    }
    const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(dk));
    std::vector<Tensor<T>> heads;
    heads.reserve(h);
    for (const auto& head : p.heads) {
        const Tensor<T> q = matmul(z, head.wq);
        const Tensor<T> k = matmul(z, head.wk);
        const Tensor<T> v = matmul(z, head.wv);
        const Tensor<T> weights = softmax_lastaxis(scale(matmul(q, transpose(k)), inv_sqrt_dk));
        heads.push_back(matmul(weights, v));
    }
    const Tensor<T> attended = dense(concat_columns(heads), p.output);
    return layernorm(add(z, attended), p.gamma, p.beta);
}

/// Squeeze-and-excitation across tokens: every row of z is scaled by one shared
/// gate e = sigmoid(relu(mean_rows(z) W1 + b1) W2 + b2).
template <typename T>
Tensor<T> se_block(const Tensor<T>& z, const SeParams<T>& p) {
    if (z.rank() != 2) throw DimensionError("se_block: expected tokens [N×d], got " + shape_str(z.shape()));
    const std::size_t d = z.dim(1);
    if (p.reduction == 0 || d % p.reduction != 0) {
        throw ConfigError("se_block: reduction ratio " + std::to_string(p.reduction) + " does not divide d = " +
                          std::to_string(d));
    }
    if (p.squeeze.weight.rank() != 2 || p.squeeze.weight.dim(1) != d / p.reduction) {
        throw DimensionError("se_block: bottleneck weight " + shape_str(p.squeeze.weight.shape()) +
                             " must be [d x d/r]");
    }
    const Tensor<T> descriptor = reduce_mean(z, 0);
    const Tensor<T> gate = sigmoid(dense(relu(dense(descriptor, p.squeeze)), p.expand));
    return mul(z, gate);
}

}  // namespace helena
