#pragma once

#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sfr/errors.hpp"

namespace sfr::nn {

// Eigen's kernels pick their vectorization split from the pointer alignment,
// so buffers share one fixed alignment to keep results reproducible run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

// Dense row-major tensor. Activations are (C, H, W); conv weights are
// (C_out, C_in, k, k); biases are (C_out).
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, T fill = T{}) : shape_(std::move(shape)) {
    for (int d : shape_) {
      if (d < 0) throw ShapeMismatch("negative tensor dimension");
    }
    data_.assign(count(shape_), fill);
  }
  Tensor(std::vector<int> shape, const std::vector<T>& values)
      : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    if (data_.size() != count(shape_)) throw ShapeMismatch("tensor value count does not match shape");
  }

  const std::vector<int>& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int c, int h, int w) { return data_[offset3(c, h, w)]; }
  const T& at(int c, int h, int w) const { return data_[offset3(c, h, w)]; }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const Tensor& other) const = default;

  static std::size_t count(const std::vector<int>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }

 private:
  std::size_t offset3(int c, int h, int w) const {
    return (static_cast<std::size_t>(c) * static_cast<std::size_t>(shape_[1]) +
            static_cast<std::size_t>(h)) *
               static_cast<std::size_t>(shape_[2]) +
           static_cast<std::size_t>(w);
  }

  std::vector<int> shape_;
  AlignedVector<T> data_;
};

std::string shape_string(const std::vector<int>& shape);

// Zero-padded convolution, padding (k - 1) / 2; odd k keeps the size at stride 1.
// x: (C_in, H, W), weight: (C_out, C_in, k, k), bias: (C_out).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride);

// Accumulates dL/dweight and dL/dbias into *dweight / *dbias when non-null and
// returns dL/dx (empty tensor when need_dx is false).
template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, int stride,
                          const Tensor<T>& dy, Tensor<T>* dweight, Tensor<T>* dbias,
                          bool need_dx = true);

template <typename T>
void leaky_relu_inplace(Tensor<T>& x, T slope);
// y is the activation output; its sign equals the input sign for slope > 0.
template <typename T>
void leaky_relu_backward_inplace(const Tensor<T>& y, Tensor<T>& dy, T slope);

// Per-channel normalization over (H, W), no affine parameters.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps, std::vector<T>& inv_std);
template <typename T>
Tensor<T> instance_norm_backward(const Tensor<T>& y, const std::vector<T>& inv_std,
                                 const Tensor<T>& dy);

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x);
template <typename T>
Tensor<T> upsample_nearest2x_backward(const Tensor<T>& dy);

template <typename T>
Tensor<T> concat_channels(std::initializer_list<const Tensor<T>*> parts);
template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, const std::vector<int>& sizes);

template <typename T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& x);

}  // namespace sfr::nn
