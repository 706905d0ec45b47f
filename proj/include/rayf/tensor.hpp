#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "rayf/common.hpp"

namespace rayf {

// Dense row-major n-d array. Deliberately minimal: the heavy math lives in
// Eigen matrices; this type carries masks, frame stacks, measurements and
// images between modules and to/from disk.
template <typename T>
class NdArray {
 public:
  NdArray() = default;

  explicit NdArray(std::vector<std::size_t> dims, T fill_value = T(0))
      : dims_(std::move(dims)) {
    data_.assign(numel_of(dims_), fill_value);
  }

  NdArray(std::initializer_list<std::size_t> dims, T fill_value = T(0))
      : NdArray(std::vector<std::size_t>(dims), fill_value) {}

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t numel() const { return data_.size(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::size_t flat) { return data_[flat]; }
  const T& operator[](std::size_t flat) const { return data_[flat]; }

  T& operator()(std::size_t i) { return data_[i]; }
  const T& operator()(std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) {
    return data_[i * dims_[1] + j];
  }
  const T& operator()(std::size_t i, std::size_t j) const {
    return data_[i * dims_[1] + j];
  }

  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }

  T& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k,
                      std::size_t l) const {
    return data_[((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const NdArray& other) const { return dims_ == other.dims_; }

  template <typename U>
  NdArray<U> cast() const {
    NdArray<U> out(dims_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = U(data_[i]);
    return out;
  }

  static std::size_t numel_of(const std::vector<std::size_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t(1),
                           std::multiplies<>());
  }

 private:
  std::vector<std::size_t> dims_;
  std::vector<T> data_;
};

using Array = NdArray<double>;

}  // namespace rayf
