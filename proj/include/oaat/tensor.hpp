#pragma once

// Dense row-major tensor. Scalar type is a template parameter so the same
// layer/attack code can run in float for speed and in double for numeric
// oracle tests.

#include <cassert>
#include <cstdint>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace oaat {

template <typename T>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), T(0));
  }
  Tensor(std::initializer_list<int64_t> s) : Tensor(std::vector<int64_t>(s)) {}

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      if (d < 0) throw std::invalid_argument("tensor: negative dim");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int dim() const { return static_cast<int>(shape.size()); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // 4-d accessor for [N,C,H,W] layouts.
  T& at(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }
  const T& at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }
  // 2-d accessor for [N,M] layouts.
  T& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
  const T& at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
  void zero() { fill(T(0)); }

  Tensor& operator+=(const Tensor& o) {
    assert(same_shape(o));
    for (size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    assert(same_shape(o));
    for (size_t i = 0; i < data.size(); ++i) data[i] -= o.data[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (auto& v : data) v *= s;
    return *this;
  }

  // this += a * o
  void axpy(T a, const Tensor& o) {
    assert(same_shape(o));
    for (size_t i = 0; i < data.size(); ++i) data[i] += a * o.data[i];
  }

  T sum() const {
    T s = 0;
    for (T v : data) s += v;
    return s;
  }
  T abs_max() const {
    T m = 0;
    for (T v : data) m = std::max(m, std::abs(v));
    return m;
  }
  T sq_norm() const {
    T s = 0;
    for (T v : data) s += v * v;
    return s;
  }
  T norm() const { return std::sqrt(sq_norm()); }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace oaat
