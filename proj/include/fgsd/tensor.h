#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "fgsd/rng.h"

namespace fgsd {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d < 0) throw std::invalid_argument("negative tensor dimension");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor over a contiguous Eigen array. Rank conventions used
// throughout: [N,F] for batches of vectors, [N,C,H,W] for batches of images,
// [Cout,Cin,Kh,Kw] for conv weights. Flat index of (n,c,h,w) is
// ((n*C + c)*H + h)*W + w.
template <class S>
class TensorT {
public:
  using Scalar = S;
  using Storage = Eigen::Array<S, Eigen::Dynamic, 1>;
  using MatrixMap =
      Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatrixMap = Eigen::Map<
      const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  TensorT() = default;
  explicit TensorT(Shape shape) : shape_(std::move(shape)) {
    data_ = Storage::Zero(numel_of(shape_));
  }

  static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

  static TensorT full(Shape shape, S value) {
    TensorT t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static TensorT from_data(Shape shape, std::vector<S> values) {
    TensorT t;
    t.shape_ = std::move(shape);
    if (std::int64_t(values.size()) != numel_of(t.shape_))
      throw std::invalid_argument("from_data: " + std::to_string(values.size()) +
                                  " values for shape " + shape_str(t.shape_));
    t.data_ = Eigen::Map<const Storage>(values.data(), values.size());
    return t;
  }

  static TensorT randn(Shape shape, Rng& rng, S stddev = S(1)) {
    TensorT t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i)
      t.data_[i] = S(rng.normal()) * stddev;
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return int(shape_.size()); }
  std::int64_t dim(int i) const { return shape_.at(std::size_t(i)); }
  std::int64_t numel() const { return data_.size(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  S& operator[](std::int64_t i) { return data_[i]; }
  S operator[](std::int64_t i) const { return data_[i]; }

  S& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[((n * dim(1) + c) * dim(2) + h) * dim(3) + w];
  }
  S at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[((n * dim(1) + c) * dim(2) + h) * dim(3) + w];
  }
  S& at(std::int64_t n, std::int64_t f) { return data_[n * dim(1) + f]; }
  S at(std::int64_t n, std::int64_t f) const { return data_[n * dim(1) + f]; }

  // Whole-buffer coefficient-wise view (shape-agnostic, used for axpy-style math).
  Storage& array() { return data_; }
  const Storage& array() const { return data_; }

  // 2-D matrix view onto the flat buffer; rows*cols must cover it exactly.
  MatrixMap mat(std::int64_t rows, std::int64_t cols) {
    check_view_(rows, cols);
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap mat(std::int64_t rows, std::int64_t cols) const {
    check_view_(rows, cols);
    return ConstMatrixMap(data_.data(), rows, cols);
  }
  // Natural matrix view of a rank-2 tensor.
  MatrixMap mat() { return mat(dim(0), dim(1)); }
  ConstMatrixMap mat() const { return mat(dim(0), dim(1)); }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  TensorT<S> reshaped(Shape shape) const {
    if (numel_of(shape) != numel())
      throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " +
                                  shape_str(shape) + " changes element count");
    TensorT t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  template <class T>
  TensorT<T> cast() const {
    TensorT<T> t(shape_);
    for (std::int64_t i = 0; i < numel(); ++i) t[i] = T(data_[i]);
    return t;
  }

private:
  void check_view_(std::int64_t rows, std::int64_t cols) const {
    if (rows * cols != numel())
      throw std::invalid_argument("matrix view " + std::to_string(rows) + "x" +
                                  std::to_string(cols) + " does not cover " +
                                  shape_str(shape_));
  }

  Shape shape_;
  Storage data_;
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

}  // namespace fgsd
