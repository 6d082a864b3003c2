#pragma once

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "feathernet/error.hpp"

namespace feathernet {

// Extents of a rank-4 N-C-H-W tensor.
struct Shape4 {
    std::size_t n = 0;
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    constexpr std::size_t size() const { return n * c * h * w; }
    constexpr std::size_t plane() const { return h * w; }
    constexpr std::size_t sample() const { return c * h * w; }

    friend constexpr bool operator==(const Shape4&, const Shape4&) = default;
};

std::string to_string(const Shape4& shape);

// Dense N-C-H-W tensor with an optional gradient buffer of the same shape.
// Scalar is float for storage and training, double for gradient checking.
template <typename Scalar>
class Tensor {
public:
    using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

    Tensor() = default;
    explicit Tensor(Shape4 shape) : shape_(shape), data_(Vector::Zero(static_cast<Eigen::Index>(shape.size()))) {}
    Tensor(Shape4 shape, Scalar fill)
        : shape_(shape), data_(Vector::Constant(static_cast<Eigen::Index>(shape.size()), fill)) {}
    Tensor(Shape4 shape, std::span<const Scalar> values);

    static Tensor zeros(Shape4 shape) { return Tensor(shape); }
    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

    const Shape4& shape() const { return shape_; }
    std::size_t size() const { return shape_.size(); }
    bool empty() const { return shape_.size() == 0; }

    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }
    std::span<Scalar> span() { return {data_.data(), size()}; }
    std::span<const Scalar> span() const { return {data_.data(), size()}; }

    // Flat view for Eigen expressions.
    Vector& values() { return data_; }
    const Vector& values() const { return data_; }

    Scalar& operator[](std::size_t i) { return data_[static_cast<Eigen::Index>(i)]; }
    Scalar operator[](std::size_t i) const { return data_[static_cast<Eigen::Index>(i)]; }

    std::size_t offset(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }
    Scalar& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) { return (*this)[offset(n, c, y, x)]; }
    Scalar at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const { return (*this)[offset(n, c, y, x)]; }

    // Same values, new extents. The element count must match.
    Tensor reshaped(Shape4 shape) const;

    bool all_finite() const { return data_.allFinite(); }

    bool has_grad() const { return grad_.size() == data_.size() && !empty(); }
    void ensure_grad() {
        if (grad_.size() != data_.size()) grad_ = Vector::Zero(data_.size());
    }
    void zero_grad() {
        if (grad_.size() == data_.size()) grad_.setZero();
    }
    void drop_grad() { grad_.resize(0); }
    Vector& grad() { return grad_; }
    const Vector& grad() const { return grad_; }

    template <typename Other>
    Tensor<Other> cast() const {
        Tensor<Other> out(shape_);
        out.values() = data_.template cast<Other>();
        return out;
    }

private:
    Shape4 shape_{};
    Vector data_;
    Vector grad_;
};

// Kernel, stride, padding and group count of a 2-D convolution.
struct ConvGeometry {
    std::array<std::size_t, 2> kernel{1, 1};
    std::array<std::size_t, 2> stride{1, 1};
    std::array<std::size_t, 2> padding{0, 0};
    std::size_t groups = 1;

    static ConvGeometry square(std::size_t k, std::size_t s, std::size_t p, std::size_t g = 1) {
        return {{k, k}, {s, s}, {p, p}, g};
    }

    // floor((in + 2*pad - kernel) / stride) + 1; throws when the result would be < 1.
    std::size_t output_extent(std::size_t in, int axis) const;

    friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace feathernet
