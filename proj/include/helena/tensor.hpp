#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "helena/errors.hpp"

namespace helena {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major real array.
///
/// A Tensor is a shared handle: copies alias the same storage, which is what lets
/// the tape write gradients into parameters owned elsewhere. Use clone() for a
/// deep copy. The gradient buffer is allocated on first use and always mirrors
/// the value shape.
template <typename T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<Impl>()) {
        check_extents(shape);
        impl_->data.assign(shape_size(shape), fill);
        impl_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<Impl>()) {
        check_extents(shape);
        if (shape_size(shape) != data.size()) {
            throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                                 std::to_string(shape_size(shape)) + " elements, got " +
                                 std::to_string(data.size()));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

    bool defined() const { return static_cast<bool>(impl_); }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
    std::size_t size() const { return impl_->data.size(); }

    std::span<T> data() { return impl_->data; }
    std::span<const T> data() const { return impl_->data; }
    T* ptr() { return impl_->data.data(); }
    const T* ptr() const { return impl_->data.data(); }

    T& operator[](std::size_t i) { return impl_->data[i]; }
    const T& operator[](std::size_t i) const { return impl_->data[i]; }

    T& at(std::size_t i, std::size_t j) { return impl_->data[i * impl_->shape[1] + j]; }
    const T& at(std::size_t i, std::size_t j) const { return impl_->data[i * impl_->shape[1] + j]; }
    T& at(std::size_t i, std::size_t j, std::size_t k) {
        return impl_->data[(i * impl_->shape[1] + j) * impl_->shape[2] + k];
    }
    const T& at(std::size_t i, std::size_t j, std::size_t k) const {
        return impl_->data[(i * impl_->shape[1] + j) * impl_->shape[2] + k];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        impl_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }

    /// Gradient buffer, zero-allocated on first access. Gradient accumulation is
    /// the one mutation allowed through a const handle.
    std::span<T> grad() const {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
        return impl_->grad;
    }

    void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }
    void clear_grad() { impl_->grad.clear(); }

    /// Gradient as a standalone tensor (zeros when none was accumulated).
    Tensor grad_tensor() const {
        Tensor g(impl_->shape);
        if (!impl_->grad.empty()) std::copy(impl_->grad.begin(), impl_->grad.end(), g.ptr());
        return g;
    }

    /// Deep copy of shape, values and the requires_grad flag; the gradient is not copied.
    Tensor clone() const {
        Tensor t(impl_->shape, impl_->data);
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    /// New tensor sharing nothing with this one, same values, new shape.
    Tensor reshaped_copy(Shape shape) const { return Tensor(std::move(shape), impl_->data); }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(impl_->data.begin(), impl_->data.end());
        return Tensor<U>(impl_->shape, std::move(out));
    }

   private:
    struct Impl {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;
        bool requires_grad = false;
    };

    static void check_extents(const Shape& shape) {
        for (auto e : shape) {
            if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        }
    }

    std::shared_ptr<Impl> impl_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace helena
