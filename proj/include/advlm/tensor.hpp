#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace advlm {

/// Raised when a caller breaks an operation's preconditions (shapes, ranges, ids).
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array of reals. Public constructors reject NaN/Inf and
/// zero-sized dimensions; engine internals use `unchecked` so overflow can be
/// detected and reported by the caller instead of throwing mid-graph.
template <class T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() : shape_{1}, data_(1, T{0}) {}

    explicit BasicTensor(Shape shape) : shape_(std::move(shape)) {
        check_shape(shape_);
        data_.assign(shape_numel(shape_), T{0});
    }

    BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape(shape_);
        if (shape_numel(shape_) != data_.size()) {
            throw ContractViolation("tensor shape " + shape_string(shape_) + " does not match " +
                                    std::to_string(data_.size()) + " values");
        }
        if (!all_finite()) throw ContractViolation("tensor data contains non-finite values");
    }

    static BasicTensor filled(Shape shape, T value) {
        BasicTensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        if (!std::isfinite(static_cast<double>(value))) {
            throw ContractViolation("tensor data contains non-finite values");
        }
        return t;
    }

    static BasicTensor scalar(T value) { return BasicTensor({1}, {value}); }

    static BasicTensor unchecked(Shape shape, std::vector<T> data) {
        BasicTensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(data);
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t numel() const noexcept { return data_.size(); }
    std::size_t rows() const noexcept { return shape_[0]; }
    std::size_t cols() const noexcept { return shape_.size() > 1 ? shape_[1] : 1; }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& at(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
    const T& at(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_[1] + c]; }

    T item() const {
        if (data_.size() != 1) throw ContractViolation("item() on tensor of shape " + shape_string(shape_));
        return data_[0];
    }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(),
                           [](T v) { return std::isfinite(static_cast<double>(v)); });
    }

    std::size_t count_nonfinite() const noexcept {
        return static_cast<std::size_t>(std::count_if(
            data_.begin(), data_.end(), [](T v) { return !std::isfinite(static_cast<double>(v)); }));
    }

    template <class U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return BasicTensor<U>::unchecked(shape_, std::move(out));
    }

    friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

private:
    static void check_shape(const Shape& shape) {
        if (shape.empty()) throw ContractViolation("tensor shape must have at least one dimension");
        for (std::size_t d : shape) {
            if (d == 0) throw ContractViolation("tensor shape " + shape_string(shape) + " has a zero dimension");
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

template <class T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ContractViolation("shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    T worst{0};
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

}  // namespace advlm
