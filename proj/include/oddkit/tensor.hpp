#pragma once

#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "oddkit/common.hpp"

namespace oddkit {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                     shape_str(b) + " differ");
}

/// Dense row-major n-dimensional array. Plain value type: copying copies the
/// buffer. Differentiation lives in Var (autodiff.hpp), which wraps one of
/// these per graph node.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), v(static_cast<std::size_t>(numel(shape)), T(0)) {}
  Tensor(Shape s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
    if (static_cast<std::int64_t>(v.size()) != numel(shape))
      throw ShapeError("tensor data length " + std::to_string(v.size()) +
                       " does not match shape " + shape_str(shape));
  }
  Tensor(Shape s, std::initializer_list<T> data) : Tensor(std::move(s), std::vector<T>(data)) {}

  static Tensor scalar(T value) { return Tensor({1}, {value}); }
  static Tensor full(Shape s, T value) {
    Tensor t(std::move(s));
    for (auto& x : t.v) x = value;
    return t;
  }

  std::int64_t size() const { return static_cast<std::int64_t>(v.size()); }
  std::int64_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const { return shape.size(); }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  T& operator[](std::int64_t i) { return v[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return v[static_cast<std::size_t>(i)]; }

  /// 2-d accessor; callers on hot paths index flat instead.
  T& at2(std::int64_t i, std::int64_t j) { return v[static_cast<std::size_t>(i * shape[1] + j)]; }
  const T& at2(std::int64_t i, std::int64_t j) const {
    return v[static_cast<std::size_t>(i * shape[1] + j)];
  }

  Tensor reshaped(Shape s) const {
    if (numel(s) != size())
      throw ShapeError("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
    return Tensor(std::move(s), v);
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.v.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }

  void fill(T value) {
    for (auto& x : v) x = value;
  }
};

}  // namespace oddkit
