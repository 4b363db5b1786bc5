#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "helena/errors.hpp"
#include "helena/tensor.hpp"

namespace helena {

/// Ordered record of differentiable operations for one forward pass.
///
/// Ops append a backward closure when a tape is active on the current thread
/// and at least one operand requires a gradient. backward() replays the
/// closures in reverse recording order, once each; a tape cannot be replayed.
template <typename T>
class Tape {
   public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> backward_rule) { rules_.push_back(std::move(backward_rule)); }

    std::size_t size() const { return rules_.size(); }
    bool consumed() const { return consumed_; }

    /// Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad ancestor.
    void backward(Tensor<T>& loss) {
        if (consumed_) throw std::logic_error("tape already replayed");
        if (loss.size() != 1) {
            throw DimensionError("backward needs a scalar loss, got " + shape_str(loss.shape()));
        }
        consumed_ = true;
        loss.grad()[0] += T(1);
        for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
        rules_.clear();
    }

   private:
    std::vector<std::function<void()>> rules_;
    bool consumed_ = false;
};

namespace detail {
template <typename T>
Tape<T>*& active_tape_slot() {
    thread_local Tape<T>* slot = nullptr;
    return slot;
}
}  // namespace detail

template <typename T>
Tape<T>* active_tape() {
    return detail::active_tape_slot<T>();
}

/// Makes a tape the recording target for the current thread while in scope.
template <typename T>
class RecordScope {
   public:
    explicit RecordScope(Tape<T>& tape) : previous_(detail::active_tape_slot<T>()) {
        detail::active_tape_slot<T>() = &tape;
    }
    ~RecordScope() { detail::active_tape_slot<T>() = previous_; }
    RecordScope(const RecordScope&) = delete;
    RecordScope& operator=(const RecordScope&) = delete;

   private:
    Tape<T>* previous_;
};

/// Suspends recording on the current thread while in scope.
template <typename T>
class NoGradScope {
   public:
    NoGradScope() : previous_(detail::active_tape_slot<T>()) { detail::active_tape_slot<T>() = nullptr; }
    ~NoGradScope() { detail::active_tape_slot<T>() = previous_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

   private:
    Tape<T>* previous_;
};

namespace detail {

template <typename T, typename... Ts>
bool any_requires_grad(const Tensor<T>& first, const Ts&... rest) {
    return (first.requires_grad() || ... || rest.requires_grad());
}

/// Returns the active tape when the op result needs a backward rule, else nullptr.
/// Marks `out` as requiring grad in that case.
template <typename T, typename... Ts>
Tape<T>* tape_for(Tensor<T>& out, const Tensor<T>& first, const Ts&... rest) {
    Tape<T>* tape = active_tape<T>();
    if (tape == nullptr || !any_requires_grad(first, rest...)) return nullptr;
    out.set_requires_grad(true);
    return tape;
}

}  // namespace detail

}  // namespace helena
