#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace eviscrib {

using Shape = std::vector<int>;

/// Cache-line aligned storage. Vectorized reductions peel a scalar prologue
/// whose length depends on the start address, so unaligned buffers would
/// make summation order, and the last bits of results, vary between runs.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. Image-like data is NCHW unless a
/// function says otherwise; token maps in the state-space branch are NHWC.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, v); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

  const Shape& shape() const { return shape_; }
  int dim(int i) const;
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(int n, int c, int h, int w) {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(int n, int c, int h, int w) const {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Same data, new shape; element count must match.
  Tensor reshaped(Shape shape) const;
  void fill(double v);
  void add_(const Tensor& other);
  bool all_finite() const;
  double sum() const;

 private:
  Shape shape_;
  std::vector<double, AlignedAllocator<double>> data_;
};

/// Throws ContractError unless the shapes are equal.
void expect_same_shape(const Tensor& a, const Tensor& b, const char* what);

}  // namespace eviscrib
