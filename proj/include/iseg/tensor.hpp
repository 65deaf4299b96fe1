#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "iseg/error.hpp"

namespace iseg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

/// Dense row-major N-dimensional array. Plain value type: copies are deep.
template <class T>
class BasicTensor {
   public:
    using value_type = T;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(numel(shape_), fill) {
        check_dims();
    }

    BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_dims();
        if (data_.size() != numel(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             to_string(shape_));
        }
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    /// Element access for rank-2 (y, x), rank-3 (c, y, x) and rank-4 (n, c, y, x) tensors.
    template <class... I>
    T& operator()(I... idx) noexcept {
        return data_[offset(static_cast<std::size_t>(idx)...)];
    }
    template <class... I>
    const T& operator()(I... idx) const noexcept {
        return data_[offset(static_cast<std::size_t>(idx)...)];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    BasicTensor reshaped(Shape shape) const {
        if (numel(shape) != size()) {
            throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
        }
        return BasicTensor(std::move(shape), data_);
    }

    template <class U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return BasicTensor<U>(shape_, std::move(out));
    }

    friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

   private:
    void check_dims() const {
        for (auto d : shape_) {
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape_));
        }
    }

    std::size_t offset(std::size_t y, std::size_t x) const noexcept { return y * shape_[1] + x; }
    std::size_t offset(std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return (c * shape_[1] + y) * shape_[2] + x;
    }
    std::size_t offset(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return ((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
    }

    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
    }
}

}  // namespace iseg
