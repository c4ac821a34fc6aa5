#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ciseg/rng.hpp"

namespace ciseg {

// Dense row-major tensor. Dimensions are logical only; all math routines in
// graph.hpp interpret them per-op. Small enough to copy freely at this scale.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> dims) : dims_(std::move(dims)) {
    data_.assign(size_t(numel()), T(0));
  }

  Tensor(std::vector<int> dims, std::vector<T> data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    if (int64_t(data_.size()) != numel())
      throw std::invalid_argument("Tensor: data size does not match dims");
  }

  static Tensor full(std::vector<int> dims, T v) {
    Tensor t(std::move(dims));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor randn(std::vector<int> dims, SplitMix64& rng, T scale = T(1)) {
    Tensor t(std::move(dims));
    for (auto& x : t.data_) x = T(rng.normal()) * scale;
    return t;
  }

  static Tensor rand_uniform(std::vector<int> dims, SplitMix64& rng, T lo, T hi) {
    Tensor t(std::move(dims));
    for (auto& x : t.data_) x = T(rng.uniform(double(lo), double(hi)));
    return t;
  }

  int64_t numel() const {
    int64_t n = 1;
    for (int d : dims_) n *= d;
    return dims_.empty() ? 0 : n;
  }

  int dim(int i) const { return dims_.at(size_t(i)); }
  int ndim() const { return int(dims_.size()); }
  const std::vector<int>& dims() const { return dims_; }

  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](int64_t i) { return data_[size_t(i)]; }
  const T& operator[](int64_t i) const { return data_[size_t(i)]; }

  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  // 2-D accessor (row-major).
  T& at(int r, int c) { return data_[size_t(r) * dims_[1] + c]; }
  const T& at(int r, int c) const { return data_[size_t(r) * dims_[1] + c]; }

  Tensor reshaped(std::vector<int> dims) const {
    Tensor t(std::move(dims), data_);
    return t;
  }

  bool empty() const { return data_.empty(); }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
    os << "]";
    return os.str();
  }

 private:
  std::vector<int> dims_;
  std::vector<T> data_;
};

}  // namespace ciseg
