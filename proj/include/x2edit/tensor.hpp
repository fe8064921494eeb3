#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <initializer_list>
#include <vector>

namespace x2edit {

// All training and verification math runs in 64-bit floats; checkpoints
// persist 32-bit (see checkpoint.hpp).
using Scalar = double;
using Index = Eigen::Index;

using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatrixRM>;
using ConstMatMap = Eigen::Map<const MatrixRM>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

// Dense row-major tensor with dynamic rank. Storage is a flat contiguous
// buffer; matrix math goes through Eigen maps over that buffer, so a Tensor
// of any rank can be treated as a (rows, cols) matrix whenever
// rows * cols == size().
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<Index> shape);
    Tensor(std::initializer_list<Index> shape)
        : Tensor(std::vector<Index>(shape)) {}

    static Tensor from_data(std::vector<Index> shape, std::vector<Scalar> values);

    int rank() const { return static_cast<int>(shape_.size()); }
    const std::vector<Index>& shape() const { return shape_; }
    Index dim(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
    Index size() const { return static_cast<Index>(data_.size()); }
    bool empty() const { return data_.empty(); }
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }

    Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
    Scalar operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

    Scalar& at(Index i, Index j) {
        return data_[static_cast<std::size_t>(i * shape_[1] + j)];
    }
    Scalar at(Index i, Index j) const {
        return data_[static_cast<std::size_t>(i * shape_[1] + j)];
    }
    Scalar& at(Index i, Index j, Index k) {
        return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
    }
    Scalar at(Index i, Index j, Index k) const {
        return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
    }
    Scalar& at(Index i, Index j, Index k, Index l) {
        return data_[static_cast<std::size_t>(
            ((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
    }
    Scalar at(Index i, Index j, Index k, Index l) const {
        return data_[static_cast<std::size_t>(
            ((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
    }

    // Matrix view over the flat buffer; rows * cols must equal size().
    MatMap mat(Index rows, Index cols);
    ConstMatMap mat(Index rows, Index cols) const;
    // Rank-2 view using the tensor's own shape.
    MatMap mat();
    ConstMatMap mat() const;
    VecMap vec() { return VecMap(data(), size()); }
    ConstVecMap vec() const { return ConstVecMap(data(), size()); }

    // Copy with a new shape of identical element count.
    Tensor reshaped(std::vector<Index> new_shape) const;

    void fill(Scalar v);
    void set_zero() { fill(0.0); }
    bool all_finite() const;

private:
    std::vector<Index> shape_;
    std::vector<Scalar> data_;
};

Index shape_product(const std::vector<Index>& shape);

}  // namespace x2edit
