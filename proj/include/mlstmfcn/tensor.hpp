#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace mlstmfcn {

// Dense row-major array of 64-bit floats with shape metadata. Tensors are
// plain values: copyable, movable, immutable by convention once handed to
// the tape (the autodiff core never mutates recorded values).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);  // zero-filled
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double value);

  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const;
  const std::vector<std::size_t>& shape() const { return shape_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // rank-2 access
  double& at(std::size_t row, std::size_t col) { return data_[row * shape_[1] + col]; }
  double at(std::size_t row, std::size_t col) const { return data_[row * shape_[1] + col]; }
  // rank-3 access
  double& at(std::size_t outer, std::size_t row, std::size_t col) {
    return data_[(outer * shape_[1] + row) * shape_[2] + col];
  }
  double at(std::size_t outer, std::size_t row, std::size_t col) const {
    return data_[(outer * shape_[1] + row) * shape_[2] + col];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  std::string shape_str() const;  // e.g. "2x3x4"

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_str(std::span<const std::size_t> shape);

}  // namespace mlstmfcn
