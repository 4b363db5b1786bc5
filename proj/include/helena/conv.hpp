#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "helena/errors.hpp"
#include "helena/tape.hpp"
#include "helena/tensor.hpp"

namespace helena {

namespace kernels {

/// Stride-1 "same" convolution geometry over an HWC grid.
struct ConvGeometry {
    std::size_t height, width, cin, cout, kh, kw;
    std::size_t pad_top, pad_left;  // floor((k-1)/2); the trailing side gets the remainder

    // Kernel rows that land inside the grid for output row y: [first, last).
    std::size_t tap_first(std::size_t pos, std::size_t pad) const { return pos >= pad ? 0 : pad - pos; }
    std::size_t tap_last(std::size_t pos, std::size_t pad, std::size_t k, std::size_t extent) const {
        return std::min(k, extent + pad - pos);
    }
};

// Kernels take channel counts as template arguments when they are known at
// compile time (CI/CO > 0), which lets the per-pixel accumulators live in
// registers; 0 means "read from the geometry".

template <typename T, std::size_t CI>
bool pixel_is_zero(const T* p, std::size_t cin) {
    if constexpr (CI > 0 && CI <= 2) {
        for (std::size_t c = 0; c < CI; ++c)
            if (p[c] != T(0)) return false;
        return true;
    } else {
        (void)p;
        (void)cin;
        return false;
    }
}

// Narrow inputs (the two-plane pilot grid) are mostly zero, so they are
// processed input-pixel first: each nonzero pixel scatters into the outputs it
// reaches and zero pixels cost nothing.
template <typename T, std::size_t CI>
constexpr bool scatter_input = CI > 0 && CI <= 2;

// Calls fn(input offset, output offset, tap offset) for every nonzero input pixel
// and every kernel tap that maps it inside the output grid.
template <typename T, std::size_t CI, typename Fn>
void for_each_nonzero_tap(const ConvGeometry& g, const T* in, Fn&& fn) {
    for (std::size_t iy = 0; iy < g.height; ++iy) {
        for (std::size_t ix = 0; ix < g.width; ++ix) {
            const std::size_t i_off = (iy * g.width + ix) * CI;
            if (pixel_is_zero<T, CI>(in + i_off, CI)) continue;
            for (std::size_t dy = 0; dy < g.kh; ++dy) {
                if (iy + g.pad_top < dy || iy + g.pad_top - dy >= g.height) continue;
                const std::size_t y = iy + g.pad_top - dy;
                for (std::size_t dx = 0; dx < g.kw; ++dx) {
                    if (ix + g.pad_left < dx || ix + g.pad_left - dx >= g.width) continue;
                    const std::size_t x = ix + g.pad_left - dx;
                    fn(i_off, (y * g.width + x) * g.cout, (dy * g.kw + dx) * CI * g.cout);
                }
            }
        }
    }
}

template <typename T, std::size_t CI, std::size_t CO>
void conv_forward(const ConvGeometry& g, const T* in, const T* kernel, const T* bias, T* out) {
    const std::size_t cin = CI ? CI : g.cin;
    const std::size_t cout = CO ? CO : g.cout;
    if constexpr (scatter_input<T, CI>) {
        for (std::size_t p = 0; p < g.height * g.width; ++p) std::copy_n(bias, cout, out + p * cout);
        for_each_nonzero_tap<T, CI>(g, in, [&](std::size_t i_off, std::size_t o_off, std::size_t k_off) {
            T* op = out + o_off;
            for (std::size_t ci = 0; ci < CI; ++ci) {
                const T a = in[i_off + ci];
                const T* krow = kernel + k_off + ci * cout;
#pragma omp simd
                for (std::size_t co = 0; co < cout; ++co) op[co] += a * krow[co];
            }
        });
        return;
    }
    // Independent partial sums over input channels break the FMA latency chain.
    constexpr std::size_t lanes = (CO && CI % 4 == 0) ? 4 : 1;
    std::vector<T> dynamic_acc(CO ? 0 : cout);
    for (std::size_t y = 0; y < g.height; ++y) {
        const std::size_t dy0 = g.tap_first(y, g.pad_top), dy1 = g.tap_last(y, g.pad_top, g.kh, g.height);
        for (std::size_t x = 0; x < g.width; ++x) {
            const std::size_t dx0 = g.tap_first(x, g.pad_left), dx1 = g.tap_last(x, g.pad_left, g.kw, g.width);
            T fixed_acc[lanes][CO ? CO : 1] = {};
            T* acc = CO ? fixed_acc[0] : dynamic_acc.data();
            std::fill_n(acc, cout, T(0));
            for (std::size_t dy = dy0; dy < dy1; ++dy) {
                const std::size_t iy = y + dy - g.pad_top;
                for (std::size_t dx = dx0; dx < dx1; ++dx) {
                    const std::size_t ix = x + dx - g.pad_left;
                    const T* ip = in + (iy * g.width + ix) * cin;
                    if (pixel_is_zero<T, CI>(ip, cin)) continue;
                    const T* kp = kernel + (dy * g.kw + dx) * cin * cout;
                    if constexpr (lanes > 1) {
                        for (std::size_t ci = 0; ci < cin; ci += lanes) {
                            for (std::size_t l = 0; l < lanes; ++l) {
                                const T a = ip[ci + l];
                                const T* krow = kp + (ci + l) * cout;
#pragma omp simd
                                for (std::size_t co = 0; co < cout; ++co) fixed_acc[l][co] += a * krow[co];
                            }
                        }
                    } else {
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                            const T a = ip[ci];
                            const T* krow = kp + ci * cout;
#pragma omp simd
                            for (std::size_t co = 0; co < cout; ++co) acc[co] += a * krow[co];
                        }
                    }
                }
            }
            T* op = out + (y * g.width + x) * cout;
            for (std::size_t co = 0; co < cout; ++co) {
                T total = bias[co] + acc[co];
                for (std::size_t l = 1; l < lanes; ++l) total += fixed_acc[l][co];
                op[co] = total;
            }
        }
    }
}

// grad_kernel[dy][dx][ci][co] += Σ_pixels in[iy][ix][ci] · grad_out[y][x][co]
template <typename T, std::size_t CI, std::size_t CO>
void conv_grad_kernel(const ConvGeometry& g, const T* in, const T* grad_out, T* grad_kernel) {
    const std::size_t cin = CI ? CI : g.cin;
    const std::size_t cout = CO ? CO : g.cout;
    if constexpr (scatter_input<T, CI>) {
        for_each_nonzero_tap<T, CI>(g, in, [&](std::size_t i_off, std::size_t o_off, std::size_t k_off) {
            const T* gp = grad_out + o_off;
            for (std::size_t ci = 0; ci < CI; ++ci) {
                const T a = in[i_off + ci];
                T* krow = grad_kernel + k_off + ci * cout;
#pragma omp simd
                for (std::size_t co = 0; co < cout; ++co) krow[co] += a * gp[co];
            }
        });
        return;
    }
    std::vector<T> dynamic_acc((CI && CO) ? 0 : cin * cout);
    for (std::size_t dy = 0; dy < g.kh; ++dy) {
        // Output rows y whose input row y + dy - pad_top is inside the grid.
        const std::size_t y0 = dy >= g.pad_top ? 0 : g.pad_top - dy;
        const std::size_t y1 = std::min(g.height, g.height + g.pad_top - dy);
        for (std::size_t dx = 0; dx < g.kw; ++dx) {
            const std::size_t x0 = dx >= g.pad_left ? 0 : g.pad_left - dx;
            const std::size_t x1 = std::min(g.width, g.width + g.pad_left - dx);
            T fixed_acc[(CI && CO) ? CI * CO : 1] = {};
            T* acc = (CI && CO) ? fixed_acc : dynamic_acc.data();
            std::fill_n(acc, cin * cout, T(0));
            for (std::size_t y = y0; y < y1; ++y) {
                const std::size_t iy = y + dy - g.pad_top;
                for (std::size_t x = x0; x < x1; ++x) {
                    const std::size_t ix = x + dx - g.pad_left;
                    const T* ip = in + (iy * g.width + ix) * cin;
                    if (pixel_is_zero<T, CI>(ip, cin)) continue;
                    const T* gp = grad_out + (y * g.width + x) * cout;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const T a = ip[ci];
                        T* arow = acc + ci * cout;
#pragma omp simd
                        for (std::size_t co = 0; co < cout; ++co) arow[co] += a * gp[co];
                    }
                }
            }
            T* gk = grad_kernel + (dy * g.kw + dx) * cin * cout;
            for (std::size_t i = 0; i < cin * cout; ++i) gk[i] += acc[i];
        }
    }
}

// grad_in[iy][ix][ci] += Σ_taps Σ_co grad_out[y][x][co] · kernel[dy][dx][ci][co],
// with the kernel pre-transposed to [kh][kw][Cout][Cin].
template <typename T, std::size_t CI, std::size_t CO>
void conv_grad_input(const ConvGeometry& g, const T* kernel_t, const T* grad_out, T* grad_in) {
    const std::size_t cin = CI ? CI : g.cin;
    const std::size_t cout = CO ? CO : g.cout;
    constexpr std::size_t lanes = (CI && CO % 4 == 0) ? 4 : 1;
    std::vector<T> dynamic_acc(CI ? 0 : cin);
    for (std::size_t iy = 0; iy < g.height; ++iy) {
        for (std::size_t ix = 0; ix < g.width; ++ix) {
            T fixed_acc[lanes][CI ? CI : 1] = {};
            T* acc = CI ? fixed_acc[0] : dynamic_acc.data();
            std::fill_n(acc, cin, T(0));
            for (std::size_t dy = 0; dy < g.kh; ++dy) {
                // y = iy - dy + pad_top must lie in [0, height).
                if (iy + g.pad_top < dy || iy + g.pad_top - dy >= g.height) continue;
                const std::size_t y = iy + g.pad_top - dy;
                for (std::size_t dx = 0; dx < g.kw; ++dx) {
                    if (ix + g.pad_left < dx || ix + g.pad_left - dx >= g.width) continue;
                    const std::size_t x = ix + g.pad_left - dx;
                    const T* gp = grad_out + (y * g.width + x) * cout;
                    const T* kp = kernel_t + (dy * g.kw + dx) * cout * cin;
                    if constexpr (lanes > 1) {
                        for (std::size_t co = 0; co < cout; co += lanes) {
                            for (std::size_t l = 0; l < lanes; ++l) {
                                const T gv = gp[co + l];
                                const T* krow = kp + (co + l) * cin;
#pragma omp simd
                                for (std::size_t ci = 0; ci < cin; ++ci) fixed_acc[l][ci] += gv * krow[ci];
                            }
                        }
                    } else {
                        for (std::size_t co = 0; co < cout; ++co) {
                            const T gv = gp[co];
                            const T* krow = kp + co * cin;
#pragma omp simd
                            for (std::size_t ci = 0; ci < cin; ++ci) acc[ci] += gv * krow[ci];
                        }
                    }
                }
            }
            T* gi = grad_in + (iy * g.width + ix) * cin;
            for (std::size_t ci = 0; ci < cin; ++ci) {
                T total = acc[ci];
                for (std::size_t l = 1; l < lanes; ++l) total += fixed_acc[l][ci];
                gi[ci] += total;
            }
        }
    }
}

/// Calls fn.template operator()<CI, CO>() with compile-time channel counts for
/// the shapes the default model uses, and <0, 0> otherwise.
template <typename Fn>
void dispatch_channels(std::size_t cin, std::size_t cout, Fn&& fn) {
    if (cin == 2 && cout == 8) {
        fn.template operator()<2, 8>();
    } else if (cin == 8 && cout == 8) {
        fn.template operator()<8, 8>();
    } else {
        fn.template operator()<0, 0>();
    }
}

}  // namespace kernels

/// Stride-1 2-D cross-correlation with "same" zero padding.
///
/// input [H×W×Cin], kernel [kh×kw×Cin×Cout], bias [Cout] -> [H×W×Cout].
/// Each spatial axis is padded floor((k-1)/2) before and ceil((k-1)/2) after,
/// so even kernels pad one fewer element on the leading side.
template <typename T>
Tensor<T> conv2d_same(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias) {
    if (input.rank() != 3 || kernel.rank() != 4) {
        throw DimensionError("conv2d_same: expected input [HxWxC] and kernel [khxkwxCinxCout], got " +
                             shape_str(input.shape()) + " and " + shape_str(kernel.shape()));
    }
    if (kernel.dim(2) != input.dim(2)) {
        throw DimensionError("conv2d_same: kernel " + shape_str(kernel.shape()) + " expects " +
                             std::to_string(kernel.dim(2)) + " input channels, input " + shape_str(input.shape()) +
                             " has " + std::to_string(input.dim(2)));
    }
    if (bias.rank() != 1 || bias.dim(0) != kernel.dim(3)) {
        throw DimensionError("conv2d_same: bias " + shape_str(bias.shape()) + " does not match " +
                             std::to_string(kernel.dim(3)) + " output channels");
    }
    const kernels::ConvGeometry geo{input.dim(0), input.dim(1), input.dim(2), kernel.dim(3),
                                    kernel.dim(0), kernel.dim(1), (kernel.dim(0) - 1) / 2, (kernel.dim(1) - 1) / 2};

    Tensor<T> out({geo.height, geo.width, geo.cout});
    kernels::dispatch_channels(geo.cin, geo.cout, [&]<std::size_t CI, std::size_t CO>() {
        kernels::conv_forward<T, CI, CO>(geo, input.ptr(), kernel.ptr(), bias.ptr(), out.ptr());
    });

    if (auto* tape = detail::tape_for(out, input, kernel, bias)) {
        tape->record([input, kernel, bias, out, geo]() {
            if (!out.has_grad()) return;
            const T* go = out.grad().data();
            if (bias.requires_grad()) {
                auto gb = bias.grad();
                for (std::size_t p = 0; p < geo.height * geo.width; ++p)
                    for (std::size_t co = 0; co < geo.cout; ++co) gb[co] += go[p * geo.cout + co];
            }
            kernels::dispatch_channels(geo.cin, geo.cout, [&]<std::size_t CI, std::size_t CO>() {
                if (kernel.requires_grad()) {
                    kernels::conv_grad_kernel<T, CI, CO>(geo, input.ptr(), go, kernel.grad().data());
                }
                if (input.requires_grad()) {
                    std::vector<T> kt(kernel.size());
                    const T* k = kernel.ptr();
                    for (std::size_t tap = 0; tap < geo.kh * geo.kw; ++tap)
                        for (std::size_t ci = 0; ci < geo.cin; ++ci)
                            for (std::size_t co = 0; co < geo.cout; ++co)
                                kt[(tap * geo.cout + co) * geo.cin + ci] = k[(tap * geo.cin + ci) * geo.cout + co];
                    kernels::conv_grad_input<T, CI, CO>(geo, kt.data(), go, input.grad().data());
                }
            });
        });
    }
    return out;
}

}  // namespace helena
