#pragma once

#include <cstdint>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ibr/core/error.hpp"

namespace ibr {

using Index = std::ptrdiff_t;
using NodeId = std::int32_t;

template <typename Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<Index> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<Index> dims) : dims_(std::move(dims)) { validate(); }

  Index rank() const { return static_cast<Index>(dims_.size()); }
  Index operator[](Index i) const { return dims_.at(static_cast<std::size_t>(i)); }
  Index numel() const {
    Index n = 1;
    for (Index d : dims_) n *= d;
    return n;
  }
  const std::vector<Index>& dims() const { return dims_; }

  // Shape with the leading (batch) dimension replaced.
  Shape with_batch(Index n) const {
    std::vector<Index> d = dims_;
    d.at(0) = n;
    return Shape(std::move(d));
  }
  // Shape without the leading dimension.
  Shape sample_shape() const {
    return Shape(std::vector<Index>(dims_.begin() + 1, dims_.end()));
  }

  std::string to_string() const;

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  void validate() const {
    for (Index d : dims_)
      if (d <= 0) throw Error(ErrorCode::shape_mismatch, "dimensions must be positive");
  }

  std::vector<Index> dims_;
};

/// Dense real array in row-major (NCHW for images) order.
template <typename Scalar>
struct Tensor {
  Shape shape;
  Array<Scalar> data;
  std::optional<Array<Scalar>> grad;
  std::optional<NodeId> node;

  Tensor() = default;
  Tensor(Shape s, Array<Scalar> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape.numel() != data.size())
      throw Error(ErrorCode::shape_mismatch,
                  "shape " + shape.to_string() + " does not match " + std::to_string(data.size()) +
                      " values");
  }

  static Tensor zeros(const Shape& s) { return Tensor(s, Array<Scalar>::Zero(s.numel())); }
  static Tensor full(const Shape& s, Scalar v) { return Tensor(s, Array<Scalar>::Constant(s.numel(), v)); }
  static Tensor from(const Shape& s, std::initializer_list<Scalar> values) {
    Array<Scalar> d(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) d[i++] = v;
    return Tensor(s, std::move(d));
  }
  static Tensor scalar(Scalar v) { return from(Shape{1}, {v}); }

  Index numel() const { return data.size(); }
  Scalar item() const {
    if (data.size() != 1) throw Error(ErrorCode::shape_mismatch, "item() on non-scalar tensor");
    return data[0];
  }

  Tensor reshaped(const Shape& s) const { return Tensor(s, data); }

  // Rows of the leading dimension [first, first + count) as a new tensor.
  Tensor rows(Index first, Index count) const {
    const Index stride = numel() / shape[0];
    return Tensor(shape.with_batch(count), data.segment(first * stride, count * stride));
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape, data.template cast<Other>());
  }
};

// Stack of per-sample tensors (each of identical shape) along a new leading dimension.
template <typename Scalar>
Tensor<Scalar> stack(const std::vector<Tensor<Scalar>>& items);

// Gathers rows of the leading dimension by index.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& t, const std::vector<Index>& indices);

}  // namespace ibr
