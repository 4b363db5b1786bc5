#pragma once

// Differentiable tensor operations. Every op computes its forward value eagerly
// and, when recording, appends a backward rule to the active tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "helena/conv.hpp"
#include "helena/errors.hpp"
#include "helena/tape.hpp"
#include "helena/tensor.hpp"

namespace helena {

namespace kernels {

// c[m×n] += a[m×k] · b[k×n]
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::size_t t = 0; t < k; ++t) {
            const T av = arow[t];
            if (av == T(0)) continue;
            const T* brow = b + t * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// Returns a[m×n]ᵀ as a fresh n×m buffer.
template <typename T>
std::vector<T> transpose(const T* a, std::size_t m, std::size_t n) {
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
    return out;
}

// c[k×n] += a[m×k]ᵀ · g[m×n]
template <typename T>
void gemm_tn_acc(const T* a, const T* g, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* grow = g + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            const T av = arow[t];
            if (av == T(0)) continue;
            T* crow = c + t * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
        }
    }
}

}  // namespace kernels

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

// True when b is a last-axis vector broadcastable against a.
inline bool broadcasts_last(const Shape& a, const Shape& b) {
    return b.size() == 1 && !a.empty() && a.back() == b[0] && a != b;
}

inline void require_binary(const Shape& a, const Shape& b, const char* op) {
    if (a != b && !broadcasts_last(a, b)) {
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcastable");
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// c = a·b for a [m×k], b [k×n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> c({m, n});
    kernels::gemm_acc(a.ptr(), b.ptr(), c.ptr(), m, k, n);
    if (auto* tape = detail::tape_for(c, a, b)) {
        tape->record([a, b, c, m, k, n]() mutable {
            if (!c.has_grad()) return;
            const T* gc = c.grad().data();
            if (a.requires_grad()) {
                auto bt = kernels::transpose(b.ptr(), k, n);
                kernels::gemm_acc(gc, bt.data(), a.grad().data(), m, n, k);
            }
            if (b.requires_grad()) kernels::gemm_tn_acc(a.ptr(), gc, b.grad().data(), m, k, n);
        });
    }
    return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    if (x.rank() != 2) throw DimensionError("transpose: expected rank 2, got " + shape_str(x.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor<T> out({n, m}, kernels::transpose(x.ptr(), m, n));
    if (auto* tape = detail::tape_for(out, x)) {
        tape->record([x, out, m, n]() mutable {
            if (!out.has_grad()) return;
            auto gx = x.grad();
            auto go = out.grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[j * m + i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

/// a + b, where b may be a vector broadcast along a's last axis.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_binary(a.shape(), b.shape(), "add");
    const std::size_t n = a.size(), period = b.size();
    Tensor<T> out(a.shape());
    T* o = out.ptr();
    const T* ap = a.ptr();
    const T* bp = b.ptr();
    for (std::size_t i = 0; i < n; i += period)
        for (std::size_t j = 0; j < period; ++j) o[i + j] = ap[i + j] + bp[j];
    if (auto* tape = detail::tape_for(out, a, b)) {
        tape->record([a, b, out, n, period]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::size_t i = 0; i < n; i += period)
                    for (std::size_t j = 0; j < period; ++j) gb[j] += go[i + j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    const std::size_t n = a.size();
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
    if (auto* tape = detail::tape_for(out, a, b)) {
        tape->record([a, b, out, n]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::size_t i = 0; i < n; ++i) gb[i] -= go[i];
            }
        });
    }
    return out;
}

/// a ⊙ b, where b may be a vector broadcast along a's last axis.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_binary(a.shape(), b.shape(), "mul");
    const std::size_t n = a.size(), period = b.size();
    Tensor<T> out(a.shape());
    T* o = out.ptr();
    const T* ap = a.ptr();
    const T* bp = b.ptr();
    for (std::size_t i = 0; i < n; i += period)
        for (std::size_t j = 0; j < period; ++j) o[i + j] = ap[i + j] * bp[j];
    if (auto* tape = detail::tape_for(out, a, b)) {
        tape->record([a, b, out, n, period]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::size_t i = 0; i < n; i += period)
                    for (std::size_t j = 0; j < period; ++j) ga[i + j] += go[i + j] * b[j];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::size_t i = 0; i < n; i += period)
                    for (std::size_t j = 0; j < period; ++j) gb[j] += go[i + j] * a[i + j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    Tensor<T> out(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * factor;
    if (auto* tape = detail::tape_for(out, x)) {
        tape->record([x, out, n, factor]() mutable {
            if (!out.has_grad()) return;
            auto gx = x.grad();
            auto go = out.grad();
            for (std::size_t i = 0; i < n; ++i) gx[i] += go[i] * factor;
        });
    }
    return out;
}

/// x ⊙ mask with a constant (non-differentiable) mask of x's size.
template <typename T>
Tensor<T> mask_mul(const Tensor<T>& x, std::vector<T> mask) {
    if (mask.size() != x.size()) {
        throw DimensionError("mask_mul: mask of " + std::to_string(mask.size()) + " elements for tensor " +
                             shape_str(x.shape()));
    }
    Tensor<T> out(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * mask[i];
    if (auto* tape = detail::tape_for(out, x)) {
        tape->record([x, out, n, mask = std::move(mask)]() mutable {
            if (!out.has_grad()) return;
            auto gx = x.grad();
            auto go = out.grad();
            for (std::size_t i = 0; i < n; ++i) gx[i] += go[i] * mask[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    if (auto* tape = detail::tape_for(out, x)) {
        tape->record([x, out, n]() mutable {
            if (!out.has_grad()) return;
            auto gx = x.grad();
            auto go = out.grad();
            for (std::size_t i = 0; i < n; ++i)
                if (x[i] > T(0)) gx[i] += go[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) {
        // Split by sign so exp never overflows.
        const T v = x[i];
        if (v >= T(0)) {
            out[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out[i] = e / (T(1) + e);
        }
    }
    if (auto* tape = detail::tape_for(out, x)) {
        tape->record([x, out, n]() mutable {
            if (!out.has_grad()) return;
            auto gx = x.grad();
            auto go = out.grad();
            for (std::size_t i = 0; i < n; ++i) gx[i] += go[i] * out[i] * (T(1) - out[i]);
        });
    }
    return out;
}

/// Softmax over the last axis with max subtraction.
template <typename T>
Tensor<T> softmax_lastaxis(const Tensor<T>& x) {
    if (x.rank() == 0) throw DimensionError("softmax_lastaxis: rank-0 input");
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.size() / cols;
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.ptr() + r * cols;
        T* yr = out.ptr() + r * cols;
        const T mx = *std::max_element(xr, xr + cols);
        T total = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            total += yr[c];
        }
        for (std::size_t c = 0; c < cols; ++c) yr[c] /= total;
    }
    if (auto* tape = detail::tape_for(out, x)) {
        tape->record([x, out, rows, cols]() mutable {
            if (!out.has_grad()) return;
            auto gx = x.grad();
            auto go = out.grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t base = r * cols;
                T dot = 0;
                for (std::size_t c = 0; c < cols; ++c) dot += go[base + c] * out[base + c];
                for (std::size_t c = 0; c < cols; ++c) gx[base + c] += out[base + c] * (go[base + c] - dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and layout
// ---------------------------------------------------------------------------

enum class Reduction { sum, mean };

/// Sum or mean along one axis; the axis is removed (a full reduction yields shape [1]).
template <typename T>
Tensor<T> reduce(Reduction op, const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw DimensionError("reduce: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    }
    const Shape& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    Shape out_shape;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) out_shape.push_back(s[i]);
    if (out_shape.empty()) out_shape.push_back(1);

    const T weight = op == Reduction::mean ? T(1) / static_cast<T>(n) : T(1);
    Tensor<T> out(out_shape);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * n + j) * inner + i];
    if (weight != T(1))
        for (auto& v : out.data()) v *= weight;

    if (auto* tape = detail::tape_for(out, x)) {
        tape->record([x, out, outer, inner, n, weight]() mutable {
            if (!out.has_grad()) return;
            auto gx = x.grad();
            auto go = out.grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t i = 0; i < inner; ++i) gx[(o * n + j) * inner + i] += go[o * inner + i] * weight;
        });
    }
    return out;
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, std::size_t axis) {
    return reduce(Reduction::sum, x, axis);
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, std::size_t axis) {
    return reduce(Reduction::mean, x, axis);
}

/// Same elements, new extents (row-major order is unchanged).
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_size(shape) != x.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    Tensor<T> out = x.reshaped_copy(std::move(shape));
    if (auto* tape = detail::tape_for(out, x)) {
        tape->record([x, out]() mutable {
            if (!out.has_grad()) return;
            auto gx = x.grad();
            auto go = out.grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
        });
    }
    return out;
}

/// Sum of every element, shape [1].
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    return reduce_sum(reshape(x, {x.size()}), 0);
}

/// Concatenates rank-2 tensors with equal row counts along the column axis.
template <typename T>
Tensor<T> concat_columns(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_columns: no inputs");
    const std::size_t rows = parts.front().dim(0);
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows) {
            throw DimensionError("concat_columns: part " + shape_str(p.shape()) + " does not have " +
                                 std::to_string(rows) + " rows");
        }
        cols += p.dim(1);
    }
    Tensor<T> out({rows, cols});
    std::size_t offset = 0;
    bool needs_grad = false;
    for (const auto& p : parts) {
        const std::size_t pc = p.dim(1);
        for (std::size_t r = 0; r < rows; ++r) std::copy_n(p.ptr() + r * pc, pc, out.ptr() + r * cols + offset);
        offset += pc;
        needs_grad = needs_grad || p.requires_grad();
    }
    Tape<T>* tape = active_tape<T>();
    if (tape != nullptr && needs_grad) {
        out.set_requires_grad(true);
        tape->record([parts, out, rows, cols]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            std::size_t offset = 0;
            for (auto& p : parts) {
                const std::size_t pc = p.dim(1);
                if (p.requires_grad()) {
                    auto gp = p.grad();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < pc; ++c) gp[r * pc + c] += go[r * cols + offset + c];
                }
                offset += pc;
            }
        });
    }
    return out;
}

}  // namespace helena
