#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ctseg/error.hpp"

namespace ctseg {

// Fixed alignment keeps Eigen's vectorized reductions on the same summation
// order regardless of where the allocator happens to place a buffer.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense NCHW tensor. All network code works on batches of this shape; a
/// single image is a 1x1xHxW tensor.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, T fill = T{0})
      : n_(n), c_(c), h_(h), w_(w),
        data_(static_cast<std::size_t>(n) * c * h * w, fill) {
    require(n >= 0 && c >= 0 && h >= 0 && w >= 0, ErrorCode::kShape, "negative tensor extent");
  }

  int n() const { return n_; }
  int c() const { return c_; }
  int h() const { return h_; }
  int w() const { return w_; }
  std::array<int, 4> shape() const { return {n_, c_, h_, w_}; }
  std::size_t size() const { return data_.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h_) * w_; }
  std::size_t sample_size() const { return static_cast<std::size_t>(c_) * h_ * w_; }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  AlignedVector<T>& vec() { return data_; }
  const AlignedVector<T>& vec() const { return data_; }

  T* sample(int i) { return data_.data() + i * sample_size(); }
  const T* sample(int i) const { return data_.data() + i * sample_size(); }
  T* channel(int i, int ch) { return sample(i) + ch * plane(); }
  const T* channel(int i, int ch) const { return sample(i) + ch * plane(); }

  T& operator()(int i, int ch, int y, int x) {
    return data_[((static_cast<std::size_t>(i) * c_ + ch) * h_ + y) * w_ + x];
  }
  const T& operator()(int i, int ch, int y, int x) const {
    return data_[((static_cast<std::size_t>(i) * c_ + ch) * h_ + y) * w_ + x];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Tensor& o) const { return shape() == o.shape(); }

  Tensor& operator+=(const Tensor& o) {
    require(same_shape(o), ErrorCode::kShape, "tensor add: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  std::string shape_str() const {
    return std::to_string(n_) + "x" + std::to_string(c_) + "x" + std::to_string(h_) + "x" +
           std::to_string(w_);
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(n_, c_, h_, w_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

 private:
  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  AlignedVector<T> data_;
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

/// Concatenate along channels; all inputs share n, h, w.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.n() == b.n() && a.h() == b.h() && a.w() == b.w(), ErrorCode::kShape,
          "concat: " + a.shape_str() + " vs " + b.shape_str());
  Tensor<T> out(a.n(), a.c() + b.c(), a.h(), a.w());
  for (int i = 0; i < a.n(); ++i) {
    std::copy_n(a.sample(i), a.sample_size(), out.sample(i));
    std::copy_n(b.sample(i), b.sample_size(), out.sample(i) + a.sample_size());
  }
  return out;
}

/// Inverse of concat_channels for gradients: returns the leading `c_first`
/// channels and the remainder.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& t, int c_first) {
  require(c_first >= 0 && c_first <= t.c(), ErrorCode::kShape, "split: bad channel count");
  Tensor<T> a(t.n(), c_first, t.h(), t.w());
  Tensor<T> b(t.n(), t.c() - c_first, t.h(), t.w());
  for (int i = 0; i < t.n(); ++i) {
    std::copy_n(t.sample(i), a.sample_size(), a.sample(i));
    std::copy_n(t.sample(i) + a.sample_size(), b.sample_size(), b.sample(i));
  }
  return {std::move(a), std::move(b)};
}

// FNV-1a over the raw bytes; used as a cheap parameter checksum.
template <typename T>
std::uint64_t checksum(std::span<const T> values, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
  for (std::size_t i = 0; i < values.size_bytes(); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace ctseg
