#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "helena/errors.hpp"
#include "helena/tape.hpp"
#include "helena/tensor.hpp"

namespace helena {

/// Central-difference gradient of a scalar function, one coordinate at a time.
///
/// `x` is perturbed in place and restored, so `f` may close over tensors that
/// alias it (e.g. a parameter inside a weight map). Recording is suspended
/// while `f` runs.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, Tensor<T> x, T step = T(1e-5)) {
    NoGradScope<T> no_grad;
    Tensor<T> grad(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T original = x[i];
        x[i] = original + step;
        const T up = f(x);
        x[i] = original - step;
        const T down = f(x);
        x[i] = original;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("finite_diff_grad: non-finite function value at coordinate " + std::to_string(i));
        }
        grad[i] = (up - down) / (T(2) * step);
    }
    return grad;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps coordinates whose
/// true gradient is ~0 from dividing central-difference noise by ~0.
template <typename T>
T max_relative_error(const Tensor<T>& a, const Tensor<T>& b, T floor = T(1e-6)) {
    if (a.shape() != b.shape()) {
        throw DimensionError("max_relative_error: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    T worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const T denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

}  // namespace helena
