#include "x2edit/tensor.hpp"

#include <cmath>
#include <utility>

#include "x2edit/error.hpp"

namespace x2edit {

Index shape_product(const std::vector<Index>& shape) {
    Index n = 1;
    for (Index d : shape) {
        if (d <= 0) {
            throw DimensionError("tensor shape must have positive extents");
        }
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<Index> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(shape_product(shape_)), 0.0);
}

Tensor Tensor::from_data(std::vector<Index> shape, std::vector<Scalar> values) {
    if (shape_product(shape) != static_cast<Index>(values.size())) {
        throw DimensionError("tensor data length does not match shape");
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    return t;
}

MatMap Tensor::mat(Index rows, Index cols) {
    if (rows * cols != size()) {
        throw DimensionError("matrix view does not cover tensor storage");
    }
    return MatMap(data(), rows, cols);
}

ConstMatMap Tensor::mat(Index rows, Index cols) const {
    if (rows * cols != size()) {
        throw DimensionError("matrix view does not cover tensor storage");
    }
    return ConstMatMap(data(), rows, cols);
}

MatMap Tensor::mat() {
    if (rank() != 2) {
        throw DimensionError("mat() without extents requires a rank-2 tensor");
    }
    return MatMap(data(), shape_[0], shape_[1]);
}

ConstMatMap Tensor::mat() const {
    if (rank() != 2) {
        throw DimensionError("mat() without extents requires a rank-2 tensor");
    }
    return ConstMatMap(data(), shape_[0], shape_[1]);
}

Tensor Tensor::reshaped(std::vector<Index> new_shape) const {
    if (shape_product(new_shape) != size()) {
        throw DimensionError("reshape changes element count");
    }
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    return t;
}

void Tensor::fill(Scalar v) {
    for (Scalar& x : data_) {
        x = v;
    }
}

bool Tensor::all_finite() const {
    for (Scalar x : data_) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

}  // namespace x2edit
