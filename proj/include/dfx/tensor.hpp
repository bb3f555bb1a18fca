#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dfx/error.hpp"

namespace dfx {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor: a shape plus a flat Eigen array.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Array::Zero(numel(shape_))) {}
  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel(shape_))
      throw DfxError(ErrorCode::kShapeMismatch, "tensor data size does not match shape " + shape_string(shape_));
  }

  static Tensor from(Shape shape, std::initializer_list<Scalar> values) {
    Array data(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) data[i++] = v;
    return Tensor(std::move(shape), std::move(data));
  }

  const Shape& shape() const { return shape_; }
  Index size() const { return data_.size(); }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }

  const Array& data() const { return data_; }
  Array& data() { return data_; }

  Scalar operator[](Index i) const { return data_[i]; }
  Scalar& operator[](Index i) { return data_[i]; }

  /// Same data under a new shape with equal element count.
  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  /// Rank-2 view as a row-major Eigen matrix.
  auto matrix() const {
    return Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        data_.data(), shape_.at(0), shape_.at(1));
  }
  auto matrix() {
    return Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        data_.data(), shape_.at(0), shape_.at(1));
  }

 private:
  Shape shape_;
  Array data_;
};

using FloatTensor = Tensor<float>;

template <typename Scalar>
Tensor<Scalar> from_matrix(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& m) {
  Tensor<Scalar> t({m.rows(), m.cols()});
  t.matrix() = m;
  return t;
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b)
    throw DfxError(ErrorCode::kShapeMismatch,
                   std::string(what) + ": " + shape_string(a) + " vs " + shape_string(b));
}

}  // namespace dfx
