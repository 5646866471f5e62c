#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "nextou/error.hpp"

namespace nextou {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape);

/// Row-major strides for `shape` (last axis contiguous).
inline Shape row_major_strides(const Shape& shape) {
    Shape strides(shape.size(), 1);
    for (Index i = static_cast<Index>(shape.size()) - 2; i >= 0; --i) {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    return strides;
}

/// Dense n-d array in row-major (C) order backed by an Eigen column array.
///
/// Feature maps use the layout (batch, channels, spatial...), node sets use
/// (batch, nodes, features) and label maps use (batch, spatial...).
template <typename Scalar>
class BasicTensor {
public:
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
    using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MatrixMap = Eigen::Map<RowMatrix>;
    using ConstMatrixMap = Eigen::Map<const RowMatrix>;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape)
        : shape_(std::move(shape)), data_(Array::Zero(shape_numel(shape_))) {}

    BasicTensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_)) {
            throw InvalidArgument("tensor data size " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_to_string(shape_));
        }
    }

    static BasicTensor constant(Shape shape, Scalar value) {
        const Index n = shape_numel(shape);
        return BasicTensor(std::move(shape), Array::Constant(n, value));
    }

    static BasicTensor from_values(Shape shape, std::initializer_list<Scalar> values) {
        Array data(static_cast<Index>(values.size()));
        Index i = 0;
        for (Scalar v : values) data[i++] = v;
        return BasicTensor(std::move(shape), std::move(data));
    }

    const Shape& shape() const { return shape_; }
    Index rank() const { return static_cast<Index>(shape_.size()); }
    Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    Index numel() const { return data_.size(); }
    bool empty() const { return data_.size() == 0; }

    Array& data() { return data_; }
    const Array& data() const { return data_; }
    Scalar* raw() { return data_.data(); }
    const Scalar* raw() const { return data_.data(); }

    Scalar& operator[](Index i) { return data_[i]; }
    Scalar operator[](Index i) const { return data_[i]; }

    /// Row-major matrix view over a contiguous slab of `rows * cols` entries.
    MatrixMap matrix(Index rows, Index cols, Index offset = 0) {
        return MatrixMap(data_.data() + offset, rows, cols);
    }
    ConstMatrixMap matrix(Index rows, Index cols, Index offset = 0) const {
        return ConstMatrixMap(data_.data() + offset, rows, cols);
    }

    /// Same data, new shape with identical element count.
    BasicTensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel()) {
            throw InvalidArgument("cannot reshape " + shape_to_string(shape_) + " to " +
                                  shape_to_string(shape));
        }
        return BasicTensor(std::move(shape), data_);
    }

    template <typename Other>
    BasicTensor<Other> cast() const {
        return BasicTensor<Other>(shape_, data_.template cast<Other>());
    }

    bool operator==(const BasicTensor& other) const {
        return shape_ == other.shape_ && (data_ == other.data_).all();
    }

private:
    Shape shape_;
    Array data_;
};

using Tensor = BasicTensor<double>;
using LabelMap = BasicTensor<std::int32_t>;
using BinaryMask = BasicTensor<std::uint8_t>;

/// Spatial extents of a (batch, channels, spatial...) feature map.
inline Shape spatial_extents(const Shape& fmap_shape) {
    return Shape(fmap_shape.begin() + 2, fmap_shape.end());
}

inline Index spatial_rank_of(const Shape& fmap_shape) {
    return static_cast<Index>(fmap_shape.size()) - 2;
}

/// Decode a flat row-major index over `extents` into per-axis coordinates.
inline void unravel(Index flat, const Shape& extents, Index* coords) {
    for (Index a = static_cast<Index>(extents.size()) - 1; a >= 0; --a) {
        coords[a] = flat % extents[a];
        flat /= extents[a];
    }
}

inline Index ravel(const Index* coords, const Shape& extents) {
    Index flat = 0;
    for (std::size_t a = 0; a < extents.size(); ++a) flat = flat * extents[a] + coords[a];
    return flat;
}

}  // namespace nextou
