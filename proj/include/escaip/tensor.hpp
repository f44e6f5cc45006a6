#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "memory.hpp"

namespace escaip {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? ", " : "") << shape[i];
    }
    os << ')';
    return os.str();
}

template <class T>
using Buffer = std::vector<T, TrackingAllocator<T>>;

/// Dense row-major tensor. Storage is counted by MemoryTracker.
template <class T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(numel(shape_), fill) {}
    Tensor(Shape shape, std::initializer_list<T> values) : shape_(std::move(shape)), data_(values) {
        check_size();
    }
    Tensor(Shape shape, std::span<const T> values)
        : shape_(std::move(shape)), data_(values.begin(), values.end()) {
        check_size();
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return {data_.data(), data_.size()}; }
    std::span<const T> values() const noexcept { return {data_.data(), data_.size()}; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& at(std::size_t i, std::size_t j) { return data_[i * shape_.back() + j]; }
    const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_.back() + j]; }

    /// Same buffer, new shape with equal element count.
    Tensor reshaped(Shape shape) const {
        if (numel(shape) != data_.size()) {
            throw DimensionError("reshape " + to_string(shape_) + " -> " + to_string(shape));
        }
        Tensor out = *this;
        out.shape_ = std::move(shape);
        return out;
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
        return out;
    }

    bool operator==(const Tensor& other) const {
        return shape_ == other.shape_ && std::equal(data_.begin(), data_.end(), other.data_.begin());
    }

   private:
    void check_size() const {
        if (numel(shape_) != data_.size()) {
            throw DimensionError("tensor data size " + std::to_string(data_.size()) +
                                 " does not match shape " + to_string(shape_));
        }
    }

    Shape shape_;
    Buffer<T> data_;
};

}  // namespace escaip
