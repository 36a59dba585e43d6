#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace diffseg {

/// Dense row-major tensor. Rank 0 (empty shape) is a scalar with one element.
/// Immutable by convention once handed to a Graph; plain value semantics.
template <typename T>
struct Tensor {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "Tensor supports float32 and float64 only");

  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("Tensor: dimension sizes must be positive, got " + shape_string(shape));
    }
    data.assign(static_cast<size_t>(numel_of(shape)), fill);
  }

  Tensor(std::vector<int> s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (static_cast<int64_t>(data.size()) != numel_of(shape)) {
      throw std::invalid_argument("Tensor: data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_string(shape));
    }
  }

  static Tensor scalar(T v) {
    Tensor t;
    t.data.assign(1, v);
    return t;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, T v) { return Tensor(std::move(s), v); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  bool is_scalar() const { return data.size() == 1; }

  int dim(int axis) const { return shape.at(static_cast<size_t>(axis)); }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  bool all_finite() const {
    for (T v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  static std::string shape_string(const std::vector<int>& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
      if (i) os << ',';
      os << s[i];
    }
    os << ']';
    return os.str();
  }
};

template <typename T>
const char* dtype_name() {
  return std::is_same_v<T, float> ? "float32" : "float64";
}

/// Row-major strides for a shape.
inline std::vector<int64_t> strides_of(const std::vector<int>& shape) {
  std::vector<int64_t> st(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * shape[static_cast<size_t>(i) + 1];
  }
  return st;
}

}  // namespace diffseg
